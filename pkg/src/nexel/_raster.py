# Compiled per-tile loops for the collection pass and its reverse mode.
#
# Each call handles a caller-chosen subset of tiles; tiles write disjoint
# pixels and disjoint rows of the per-entry gradient buffer, so splitting the
# tile set across threads never changes a single bit of the output.
import math

import numba as nb
import numpy as np

ALPHA_MIN = 1.0 / 255.0
GRAZING_EPS = 1e-8
NEAR_EPS = 1e-2

# columns of the per-(tile, primitive) gradient rows
G_MU, G_V1, G_V2, G_V3, G_LOGS, G_OPAC, G_GAMMA, G_COLOR, G_ERR = 0, 3, 6, 9, 12, 14, 15, 17, 20
N_GRAD_COLS = 21


@nb.njit(cache=True, nogil=True)
def topk_insert(ids, weights, depths, seqs, count, pid, w, d, seq):
    """Insert into a K-slot buffer; returns the new fill count.

    Keeps the K largest weights. A newcomer must strictly beat the current
    minimum; among tied minima the most recently composited slot is evicted.
    """
    k = ids.shape[0]
    if k == 0:
        return count
    if count < k:
        ids[count] = pid
        weights[count] = w
        depths[count] = d
        seqs[count] = seq
        return count + 1
    m = 0
    for j in range(1, k):
        if weights[j] < weights[m] or (weights[j] == weights[m] and seqs[j] > seqs[m]):
            m = j
    if w > weights[m]:
        ids[m] = pid
        weights[m] = w
        depths[m] = d
        seqs[m] = seq
    return count


@nb.njit(cache=True, nogil=True)
def topk_finalize(ids, weights, depths, seqs, count):
    """Sort the filled slots by descending weight, then compositing order."""
    for a in range(1, count):
        j = a
        while j > 0 and (weights[j] > weights[j - 1]
                         or (weights[j] == weights[j - 1] and seqs[j] < seqs[j - 1])):
            ids[j], ids[j - 1] = ids[j - 1], ids[j]
            weights[j], weights[j - 1] = weights[j - 1], weights[j]
            depths[j], depths[j - 1] = depths[j - 1], depths[j]
            seqs[j], seqs[j - 1] = seqs[j - 1], seqs[j]
            j -= 1


@nb.njit(cache=True, nogil=True, inline="always")
def _hit(i, ox, oy, oz, dx, dy, dz, mu, rot, sigma, opac, gamma):
    n0, n1, n2 = rot[i, 0, 2], rot[i, 1, 2], rot[i, 2, 2]
    dn = dx * n0 + dy * n1 + dz * n2
    if abs(dn) < GRAZING_EPS:
        return False, 0.0, 0.0, 0.0, 0.0
    t = ((mu[i, 0] - ox) * n0 + (mu[i, 1] - oy) * n1 + (mu[i, 2] - oz) * n2) / dn
    if t <= NEAR_EPS:
        return False, 0.0, 0.0, 0.0, 0.0
    rx = ox + t * dx - mu[i, 0]
    ry = oy + t * dy - mu[i, 1]
    rz = oz + t * dz - mu[i, 2]
    u = (rx * rot[i, 0, 0] + ry * rot[i, 1, 0] + rz * rot[i, 2, 0]) / sigma[i, 0]
    v = (rx * rot[i, 0, 1] + ry * rot[i, 1, 1] + rz * rot[i, 2, 1]) / sigma[i, 1]
    a = math.pow(u * u, gamma[i, 0])
    b = math.pow(v * v, gamma[i, 1])
    alpha = opac[i] * math.exp(-(a + b) / 2)
    if alpha < ALPHA_MIN:
        return False, 0.0, 0.0, 0.0, 0.0
    return True, alpha, u, v, t


@nb.njit(cache=True, nogil=True)
def collect_tiles(tiles, tile_start, tile_prims, tiles_x, tile_size, origin, dirs,
                  mu, rot, sigma, opac, gamma, color, bg, alpha_max, early_stop,
                  out_n, out_i, out_d, out_w, out_tfinal, out_stop):
    height, width = dirs.shape[0], dirs.shape[1]
    k = out_i.shape[2]
    ids = np.empty(k, np.int64)
    ws = np.empty(k)
    ds = np.empty(k)
    seqs = np.empty(k, np.int64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for tile in tiles:
        ty, tx = tile // tiles_x, tile % tiles_x
        lo, hi = tile_start[tile], tile_start[tile + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                dx, dy, dz = dirs[py, px, 0], dirs[py, px, 1], dirs[py, px, 2]
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                count = 0
                stop = lo
                for e in range(lo, hi):
                    if trans < early_stop:
                        break
                    stop = e + 1
                    i = tile_prims[e]
                    ok, alpha, u, v, t = _hit(i, ox, oy, oz, dx, dy, dz, mu, rot, sigma, opac, gamma)
                    if not ok:
                        continue
                    alpha = min(alpha, alpha_max)
                    w = alpha * trans
                    c0 += w * color[i, 0]
                    c1 += w * color[i, 1]
                    c2 += w * color[i, 2]
                    count = topk_insert(ids, ws, ds, seqs, count, i, w, t, e)
                    trans *= 1.0 - alpha
                topk_finalize(ids, ws, ds, seqs, count)
                for j in range(k):
                    if j < count:
                        i = ids[j]
                        c0 -= ws[j] * color[i, 0]
                        c1 -= ws[j] * color[i, 1]
                        c2 -= ws[j] * color[i, 2]
                        out_i[py, px, j] = i
                        out_w[py, px, j] = ws[j]
                        out_d[py, px, j] = ds[j]
                    else:
                        out_i[py, px, j] = -1
                        out_w[py, px, j] = 0.0
                        out_d[py, px, j] = 0.0
                out_n[py, px, 0] = c0 + trans * bg[0]
                out_n[py, px, 1] = c1 + trans * bg[1]
                out_n[py, px, 2] = c2 + trans * bg[2]
                out_tfinal[py, px] = trans
                out_stop[py, px] = stop


@nb.njit(cache=True, nogil=True)
def backward_tiles(tiles, tile_start, tile_prims, tiles_x, tile_size, origin, dirs,
                   mu, rot, sigma, opac, gamma, color, bg, alpha_max,
                   buf_i, stop_idx, grad_n, grad_w, grad_d, err_map, rows):
    height, width = dirs.shape[0], dirs.shape[1]
    k = buf_i.shape[2]
    max_len = 0
    for tile in tiles:
        max_len = max(max_len, tile_start[tile + 1] - tile_start[tile])
    s_entry = np.empty(max_len, np.int64)
    s_alpha = np.empty(max_len)
    s_raw = np.empty(max_len)
    s_trans = np.empty(max_len)
    s_u = np.empty(max_len)
    s_v = np.empty(max_len)
    s_t = np.empty(max_len)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for tile in tiles:
        ty, tx = tile // tiles_x, tile % tiles_x
        lo = tile_start[tile]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                dx, dy, dz = dirs[py, px, 0], dirs[py, px, 1], dirs[py, px, 2]
                # replay the forward compositing up to where it stopped
                n = 0
                trans = 1.0
                for e in range(lo, stop_idx[py, px]):
                    i = tile_prims[e]
                    ok, alpha, u, v, t = _hit(i, ox, oy, oz, dx, dy, dz, mu, rot, sigma, opac, gamma)
                    if not ok:
                        continue
                    s_entry[n] = e
                    s_raw[n] = alpha
                    s_alpha[n] = min(alpha, alpha_max)
                    s_trans[n] = trans
                    s_u[n] = u
                    s_v[n] = v
                    s_t[n] = t
                    trans *= 1.0 - s_alpha[n]
                    n += 1
                g0, g1, g2 = grad_n[py, px, 0], grad_n[py, px, 1], grad_n[py, px, 2]
                err = err_map[py, px]
                acc = trans * (g0 * bg[0] + g1 * bg[1] + g2 * bg[2])
                for m in range(n - 1, -1, -1):
                    e = s_entry[m]
                    i = tile_prims[e]
                    alpha = s_alpha[m]
                    w = alpha * s_trans[m]
                    slot = -1
                    for j in range(k):
                        if buf_i[py, px, j] == i:
                            slot = j
                    dt = 0.0
                    if slot >= 0:
                        gw = grad_w[py, px, slot]
                        dt = grad_d[py, px, slot]
                    else:
                        gw = g0 * color[i, 0] + g1 * color[i, 1] + g2 * color[i, 2]
                        rows[e, G_COLOR] += w * g0
                        rows[e, G_COLOR + 1] += w * g1
                        rows[e, G_COLOR + 2] += w * g2
                    rows[e, G_ERR] += w * err
                    dalpha = s_trans[m] * gw - acc / (1.0 - alpha)
                    acc += w * gw
                    raw = s_raw[m]
                    if raw > alpha_max:
                        dalpha = 0.0
                    u, v, t = s_u[m], s_v[m], s_t[m]
                    ga, gb = gamma[i, 0], gamma[i, 1]
                    uu, vv = u * u, v * v
                    du = dalpha * (-raw * ga * u * math.pow(uu, ga - 1.0))
                    dv = dalpha * (-raw * gb * v * math.pow(vv, gb - 1.0))
                    rows[e, G_OPAC] += dalpha * raw / opac[i]
                    if uu > 0.0:
                        rows[e, G_GAMMA] += dalpha * (-0.5 * raw * math.pow(uu, ga) * math.log(uu))
                    if vv > 0.0:
                        rows[e, G_GAMMA + 1] += dalpha * (-0.5 * raw * math.pow(vv, gb) * math.log(vv))
                    s1, s2 = sigma[i, 0], sigma[i, 1]
                    dv1 = dx * rot[i, 0, 0] + dy * rot[i, 1, 0] + dz * rot[i, 2, 0]
                    dv2 = dx * rot[i, 0, 1] + dy * rot[i, 1, 1] + dz * rot[i, 2, 1]
                    dn = dx * rot[i, 0, 2] + dy * rot[i, 1, 2] + dz * rot[i, 2, 2]
                    dt += du * dv1 / s1 + dv * dv2 / s2
                    rx = ox + t * dx - mu[i, 0]
                    ry = oy + t * dy - mu[i, 1]
                    rz = oz + t * dz - mu[i, 2]
                    for a in range(3):
                        ra = rx if a == 0 else (ry if a == 1 else rz)
                        rows[e, G_MU + a] += -du * rot[i, a, 0] / s1 - dv * rot[i, a, 1] / s2 + dt * rot[i, a, 2] / dn
                        rows[e, G_V1 + a] += du * ra / s1
                        rows[e, G_V2 + a] += dv * ra / s2
                        rows[e, G_V3 + a] += -dt * ra / dn
                    rows[e, G_LOGS] += -du * u
                    rows[e, G_LOGS + 1] += -dv * v
