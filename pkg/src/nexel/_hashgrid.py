# Compiled inner loops for the hash grid. Serial on purpose: the scatter-add
# in grid_backward must be bit-stable regardless of the worker count.
import numba as nb
import numpy as np

PRIME_Y = 2654435761
PRIME_Z = 805459861
MASK32 = 0xFFFFFFFF


@nb.njit(cache=True, nogil=True)
def map_positive(x):
    if x > 0:
        return 2 * x - 1
    return -2 * x


@nb.njit(cache=True, nogil=True)
def spatial_hash(cx, cy, cz, table_size):
    h = map_positive(cx) & MASK32
    h ^= (map_positive(cy) * PRIME_Y) & MASK32
    h ^= (map_positive(cz) * PRIME_Z) & MASK32
    if table_size & (table_size - 1) == 0:
        return h & (table_size - 1)
    return h % table_size


@nb.njit(cache=True, nogil=True)
def hash_many(cells, table_size, out):
    for i in range(cells.shape[0]):
        out[i] = spatial_hash(cells[i, 0], cells[i, 1], cells[i, 2], table_size)


@nb.njit(cache=True, nogil=True, inline="always")
def _corners(px, py, pz, table_size, idx, wts, dwx, dwy, dwz):
    """Hash indices, trilinear weights and weight derivatives of the 8 corners."""
    fx, fy, fz = np.floor(px), np.floor(py), np.floor(pz)
    ix, iy, iz = np.int64(fx), np.int64(fy), np.int64(fz)
    rx, ry, rz = px - fx, py - fy, pz - fz
    hx0 = map_positive(ix) & MASK32
    hx1 = map_positive(ix + 1) & MASK32
    hy0 = (map_positive(iy) * PRIME_Y) & MASK32
    hy1 = (map_positive(iy + 1) * PRIME_Y) & MASK32
    hz0 = (map_positive(iz) * PRIME_Z) & MASK32
    hz1 = (map_positive(iz + 1) * PRIME_Z) & MASK32
    pow2 = table_size & (table_size - 1) == 0
    for c in range(8):
        bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        h = (hx1 if bx else hx0) ^ (hy1 if by else hy0) ^ (hz1 if bz else hz0)
        idx[c] = h & (table_size - 1) if pow2 else h % table_size
        wx = rx if bx else 1.0 - rx
        wy = ry if by else 1.0 - ry
        wz = rz if bz else 1.0 - rz
        wts[c] = wx * wy * wz
        dwx[c] = (1.0 if bx else -1.0) * wy * wz
        dwy[c] = (1.0 if by else -1.0) * wx * wz
        dwz[c] = (1.0 if bz else -1.0) * wx * wy


@nb.njit(cache=True, nogil=True)
def grid_interp(x, scales, tables, out):
    n_levels, table_size, feat = tables.shape
    idx = np.empty(8, dtype=np.int64)
    wts = np.empty(8)
    dwx, dwy, dwz = np.empty(8), np.empty(8), np.empty(8)
    for q in range(x.shape[0]):
        for lvl in range(n_levels):
            s = scales[lvl]
            _corners(x[q, 0] * s, x[q, 1] * s, x[q, 2] * s, table_size, idx, wts, dwx, dwy, dwz)
            for c in range(8):
                for f in range(feat):
                    out[q, lvl, f] += wts[c] * tables[lvl, idx[c], f]


@nb.njit(cache=True, nogil=True)
def grid_backward(x, scales, tables, grad_feat, grad_tables, grad_x):
    n_levels, table_size, feat = tables.shape
    idx = np.empty(8, dtype=np.int64)
    wts = np.empty(8)
    dwx, dwy, dwz = np.empty(8), np.empty(8), np.empty(8)
    for q in range(x.shape[0]):
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for lvl in range(n_levels):
            s = scales[lvl]
            _corners(x[q, 0] * s, x[q, 1] * s, x[q, 2] * s, table_size, idx, wts, dwx, dwy, dwz)
            for c in range(8):
                dot = 0.0
                for f in range(feat):
                    g = grad_feat[q, lvl, f]
                    grad_tables[lvl, idx[c], f] += wts[c] * g
                    dot += g * tables[lvl, idx[c], f]
                gx += dot * s * dwx[c]
                gy += dot * s * dwy[c]
                gz += dot * s * dwz[c]
        grad_x[q, 0] += gx
        grad_x[q, 1] += gy
        grad_x[q, 2] += gz
