"""Two-pass renderer.

The collection pass composites per-primitive SH colours front to back over
16x16 tiles while a per-pixel top-K buffer keeps the highest-weight
intersections; the texturing pass queries the neural field only at those
K intersections and adds them back in:

    final_p = N_p + sum_j W[p, j] * T_tex[p, j]

``render_backward`` is the full reverse mode of both passes. The top-K
membership and the early-termination point are treated as constants.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _raster
from .field import FieldCache
from .geometry import ALPHA_MIN, eval_sh_backward, kernel_radius, normalize_backward, quat_to_rotation_backward, sigmoid
from .scene import Camera, Scene

SENTINEL = -1
MAX_K = 8


class RenderError(RuntimeError):
    pass


def default_workers():
    env = os.environ.get("NEXEL_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@dataclass
class RenderConfig:
    k: int = 2
    tile_size: int = 16
    early_stop: float = 1e-4
    alpha_max: float = 0.999
    sh_degree: int = 3
    gamma_fixed: bool = False
    workers: int | None = None

    def __post_init__(self):
        if not 0 <= self.k <= MAX_K:
            raise ValueError(f"k must be in [0, {MAX_K}], got {self.k}")


class TopKBuffer:
    """Per-pixel buffer of the K highest-weight intersections seen so far."""

    def __init__(self, k):
        self.ids = np.full(k, SENTINEL, dtype=np.int64)
        self.weights = np.zeros(k)
        self.depths = np.zeros(k)
        self.seqs = np.zeros(k, dtype=np.int64)
        self.count = 0
        self._seq = 0

    def insert(self, pid, weight, depth):
        if weight < 0:
            raise ValueError("weights must be non-negative")
        self.count = _raster.topk_insert(self.ids, self.weights, self.depths, self.seqs, self.count,
                                         int(pid), float(weight), float(depth), self._seq)
        self._seq += 1
        return self

    def finalize(self):
        """Slots ordered by descending weight (ties: earlier insertion first)."""
        _raster.topk_finalize(self.ids, self.weights, self.depths, self.seqs, self.count)
        n = self.count
        return self.ids[:n].copy(), self.weights[:n].copy(), self.depths[:n].copy()

    def as_dict(self):
        ids, ws, _ = self.finalize()
        return dict(zip(ids.tolist(), ws.tolist()))


def topk_insert(buffer: TopKBuffer, pid, weight, depth):
    return buffer.insert(pid, weight, depth)


@dataclass
class FrameBuffers:
    n: np.ndarray        # (H, W, 3) non-textured render
    ids: np.ndarray      # (H, W, K) primitive ids, SENTINEL when empty
    depths: np.ndarray   # (H, W, K)
    weights: np.ndarray  # (H, W, K)
    t_final: np.ndarray  # (H, W) residual transmittance
    stop: np.ndarray     # (H, W) tile-list index where compositing stopped
    texture: np.ndarray | None = None  # (H, W, K, 3)
    final: np.ndarray | None = None    # (H, W, 3)


@dataclass
class Prepared:
    """Camera-dependent per-primitive quantities and tile bins."""

    opacity: np.ndarray
    scale: np.ndarray
    gamma: np.ndarray
    rotation: np.ndarray
    colors: np.ndarray
    view_dirs: np.ndarray
    depth: np.ndarray
    tile_start: np.ndarray
    tile_prims: np.ndarray
    tiles_x: int
    tiles_y: int
    dirs: np.ndarray
    origin: np.ndarray


@dataclass
class RenderResult:
    buffers: FrameBuffers
    prep: Prepared
    config: RenderConfig
    query_index: np.ndarray | None = None   # flat (pixel*K + slot) of textured queries
    field_cache: FieldCache | None = None

    @property
    def image(self):
        return self.buffers.final


@dataclass
class SceneGrads:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_raw: np.ndarray
    gamma_raw: np.ndarray
    sh: np.ndarray
    tables: np.ndarray
    mlp: list
    errors: np.ndarray = dc_field(default=None)

    def flat(self):
        parts = [self.mu, self.quat, self.log_scale, self.opacity_raw, self.gamma_raw, self.sh, self.tables] + list(self.mlp)
        return np.concatenate([np.ravel(p) for p in parts])


# ----------------------------------------------------------------- preprocessing

def _footprints(prep_mu, act_scale, rotation, radius, camera: Camera):
    """Conservative pixel bounding boxes of each primitive's kernel support."""
    n = prep_mu.shape[0]
    corners = np.empty((n, 4, 3))
    a1 = (radius[:, 0] * act_scale[:, 0])[:, None] * rotation[:, :, 0]
    a2 = (radius[:, 1] * act_scale[:, 1])[:, None] * rotation[:, :, 1]
    for c, (s1, s2) in enumerate(((-1, -1), (1, -1), (1, 1), (-1, 1))):
        corners[:, c] = prep_mu + s1 * a1 + s2 * a2
    cam = camera.to_camera(corners.reshape(-1, 3)).reshape(n, 4, 3)
    z = cam[..., 2]
    in_front = np.all(z > 1e-6, axis=1)
    behind = np.all(z <= 1e-6, axis=1)
    safe_z = np.where(z > 1e-6, z, 1.0)
    px = camera.fx * cam[..., 0] / safe_z + camera.cx
    py = camera.fy * cam[..., 1] / safe_z + camera.cy
    x0 = np.floor(px.min(axis=1) - 0.5) - 1
    x1 = np.ceil(px.max(axis=1) - 0.5) + 1
    y0 = np.floor(py.min(axis=1) - 0.5) - 1
    y1 = np.ceil(py.max(axis=1) - 0.5) + 1
    full = ~in_front & ~behind
    x0 = np.where(full, 0, x0)
    y0 = np.where(full, 0, y0)
    x1 = np.where(full, camera.width - 1, x1)
    y1 = np.where(full, camera.height - 1, y1)
    visible = ~behind & (x1 >= 0) & (y1 >= 0) & (x0 <= camera.width - 1) & (y0 <= camera.height - 1)
    box = np.stack([np.clip(x0, 0, camera.width - 1), np.clip(y0, 0, camera.height - 1),
                    np.clip(x1, 0, camera.width - 1), np.clip(y1, 0, camera.height - 1)], axis=1)
    return box.astype(np.int64), visible


def prepare(scene: Scene, camera: Camera, config: RenderConfig) -> Prepared:
    act = scene.activated(gamma_fixed=config.gamma_fixed)
    mu = np.asarray(scene.mu, dtype=np.float64)
    if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(scene.sh)):
        bad = np.flatnonzero(~np.all(np.isfinite(mu), axis=1) | ~np.all(np.isfinite(scene.sh.reshape(len(scene), -1)), axis=1))
        from .geometry import InvalidPrimitiveError
        raise InvalidPrimitiveError(bad)
    ts = config.tile_size
    tiles_x = -(-camera.width // ts)
    tiles_y = -(-camera.height // ts)
    n = len(scene)
    if n:
        view_dirs = scene.view_dirs(camera)
        colors = scene.colors(camera, config.sh_degree)
        depth = camera.to_camera(mu)[:, 2]
        radius = kernel_radius(act.opacity, act.gamma)
        box, visible = _footprints(mu, act.scale, act.rotation, radius, camera)
        visible &= act.opacity >= ALPHA_MIN
        order = np.argsort(depth, kind="stable")
        order = order[visible[order]]
        b = box[order] // ts
        ntx = b[:, 2] - b[:, 0] + 1
        nty = b[:, 3] - b[:, 1] + 1
        counts = ntx * nty
        rep = np.repeat(np.arange(len(order)), counts)
        local = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts)
        tx = b[rep, 0] + local % ntx[rep]
        ty = b[rep, 1] + local // ntx[rep]
        tile = ty * tiles_x + tx
        srt = np.lexsort((rep, tile))
        tile_prims = order[rep[srt]].astype(np.int64)
        tile_start = np.searchsorted(tile[srt], np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    else:
        view_dirs = colors = np.zeros((0, 3))
        depth = np.zeros(0)
        tile_prims = np.zeros(0, dtype=np.int64)
        tile_start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    return Prepared(np.ascontiguousarray(act.opacity, dtype=np.float64),
                    np.ascontiguousarray(act.scale, dtype=np.float64),
                    np.ascontiguousarray(act.gamma, dtype=np.float64),
                    np.ascontiguousarray(act.rotation, dtype=np.float64),
                    np.ascontiguousarray(colors, dtype=np.float64), view_dirs, depth,
                    tile_start, tile_prims, tiles_x, tiles_y,
                    np.ascontiguousarray(camera.ray_dirs()), np.ascontiguousarray(camera.center))


def _tile_chunks(prep: Prepared, workers):
    tiles = np.arange(prep.tiles_x * prep.tiles_y, dtype=np.int64)
    workers = max(1, min(workers, len(tiles)))
    return np.array_split(tiles, workers)


def _run_chunks(fn, chunks):
    if len(chunks) == 1:
        fn(chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(fn, chunks))


# ----------------------------------------------------------------------- passes

def collection_pass(scene: Scene, camera: Camera, config: RenderConfig | None = None, prep: Prepared | None = None):
    config = config or RenderConfig()
    prep = prep or prepare(scene, camera, config)
    h, w, k = camera.height, camera.width, config.k
    out_n = np.zeros((h, w, 3))
    out_i = np.full((h, w, k), SENTINEL, dtype=np.int64)
    out_d = np.zeros((h, w, k))
    out_w = np.zeros((h, w, k))
    out_t = np.ones((h, w))
    out_stop = np.zeros((h, w), dtype=np.int64)
    mu = np.ascontiguousarray(scene.mu, dtype=np.float64)
    bg = np.ascontiguousarray(scene.background, dtype=np.float64)

    def run(tiles):
        _raster.collect_tiles(tiles, prep.tile_start, prep.tile_prims, prep.tiles_x, config.tile_size,
                              prep.origin, prep.dirs, mu, prep.rotation, prep.scale, prep.opacity, prep.gamma,
                              prep.colors, bg, config.alpha_max, config.early_stop,
                              out_n, out_i, out_d, out_w, out_t, out_stop)

    _run_chunks(run, _tile_chunks(prep, config.workers or default_workers()))
    return FrameBuffers(out_n, out_i, out_d, out_w, out_t, out_stop), prep


def texturing_pass(buffers: FrameBuffers, camera: Camera, field, prep: Prepared | None = None):
    """Query the field at every buffered slot and form the final image."""
    h, w, k = buffers.ids.shape
    dirs = prep.dirs if prep is not None else camera.ray_dirs()
    origin = camera.center
    flat_ids = buffers.ids.reshape(-1)
    query = np.flatnonzero(flat_ids != SENTINEL)
    texture = np.zeros((h * w * k, 3))
    cache = None
    if query.size:
        pix = query // k
        d = dirs.reshape(-1, 3)[pix]
        t = buffers.depths.reshape(-1)[query]
        x = origin + t[:, None] * d
        rgb, cache = field.forward(x, t, camera.focal, d)
        texture[query] = rgb
    texture = texture.reshape(h, w, k, 3)
    buffers.texture = texture
    buffers.final = buffers.n + np.einsum("hwk,hwkc->hwc", buffers.weights, texture)
    return buffers, query, cache


def render(scene: Scene, camera: Camera, config: RenderConfig | None = None) -> RenderResult:
    config = config or RenderConfig()
    buffers, prep = collection_pass(scene, camera, config)
    buffers, query, cache = texturing_pass(buffers, camera, scene.field, prep)
    return RenderResult(buffers, prep, config, query, cache)


def render_image(scene: Scene, camera: Camera, config: RenderConfig | None = None):
    return render(scene, camera, config).buffers.final


# --------------------------------------------------------------------- backward

def render_backward(scene: Scene, camera: Camera, result: RenderResult, grad_final,
                    grad_weights=None, grad_texture=None, error_map=None) -> SceneGrads:
    """Reverse mode of :func:`render`.

    ``grad_weights`` / ``grad_texture`` are extra upstream gradients on the
    W and T_tex buffers (used by the texture and alpha losses); ``error_map``
    (H, W) is blended into per-primitive error accumulators.
    """
    if result is None or result.buffers.final is None:
        raise RenderError("render_backward needs the cached forward result")
    buf, prep, cfg = result.buffers, result.prep, result.config
    h, w, k = buf.ids.shape
    grad_final = np.asarray(grad_final, dtype=np.float64)
    if grad_final.shape != (h, w, 3):
        raise RenderError(f"grad_final shape {grad_final.shape} != {(h, w, 3)}")
    grad_w = np.einsum("hwc,hwkc->hwk", grad_final, buf.texture)
    if grad_weights is not None:
        grad_w = grad_w + grad_weights
    grad_tex = buf.weights[..., None] * grad_final[:, :, None, :]
    if grad_texture is not None:
        grad_tex = grad_tex + grad_texture
    grad_d = np.zeros(h * w * k)
    field = scene.field
    tables_grad = np.zeros(field.grid.tables.shape)
    mlp_grad = [np.zeros(wt.shape) for wt in field.mlp.weights]
    if result.query_index is not None and result.query_index.size:
        q = result.query_index
        fg = field.backward(result.field_cache, grad_tex.reshape(-1, 3)[q])
        tables_grad, mlp_grad = fg.tables, fg.mlp
        d = prep.dirs.reshape(-1, 3)[q // k]
        grad_d[q] = np.sum(fg.x * d, axis=1) + fg.t_star
    grad_d = grad_d.reshape(h, w, k)

    n = len(scene)
    rows = np.zeros((prep.tile_prims.size, _raster.N_GRAD_COLS))
    err = np.zeros((h, w)) if error_map is None else np.ascontiguousarray(error_map, dtype=np.float64)
    mu = np.ascontiguousarray(scene.mu, dtype=np.float64)
    bg = np.ascontiguousarray(scene.background, dtype=np.float64)
    gn = np.ascontiguousarray(grad_final)
    gw = np.ascontiguousarray(grad_w)

    def run(tiles):
        _raster.backward_tiles(tiles, prep.tile_start, prep.tile_prims, prep.tiles_x, cfg.tile_size,
                               prep.origin, prep.dirs, mu, prep.rotation, prep.scale, prep.opacity, prep.gamma,
                               prep.colors, bg, cfg.alpha_max, buf.ids, buf.stop, gn, gw, grad_d, err, rows)

    _run_chunks(run, _tile_chunks(prep, cfg.workers or default_workers()))
    per_prim = np.zeros((n, _raster.N_GRAD_COLS))
    np.add.at(per_prim, prep.tile_prims, rows)
    return _chain_primitive_grads(scene, camera, prep, cfg, per_prim, tables_grad, mlp_grad)


def _chain_primitive_grads(scene, camera, prep, cfg, g, tables_grad, mlp_grad):
    R = _raster
    n = len(scene)
    d_mu = g[:, R.G_MU:R.G_MU + 3].copy()
    d_rot = np.stack([g[:, R.G_V1:R.G_V1 + 3], g[:, R.G_V2:R.G_V2 + 3], g[:, R.G_V3:R.G_V3 + 3]], axis=-1)
    d_quat = quat_to_rotation_backward(np.asarray(scene.quat, dtype=np.float64), d_rot) if n else np.zeros((0, 4))
    d_log_scale = g[:, R.G_LOGS:R.G_LOGS + 2].copy()
    o = prep.opacity
    d_opacity_raw = g[:, R.G_OPAC] * o * (1 - o)
    if cfg.gamma_fixed:
        d_gamma_raw = np.zeros((n, 2))
    else:
        d_gamma_raw = g[:, R.G_GAMMA:R.G_GAMMA + 2] * sigmoid(np.asarray(scene.gamma_raw, dtype=np.float64))
    d_color = g[:, R.G_COLOR:R.G_COLOR + 3]
    if n:
        sh = scene.truncated_sh(cfg.sh_degree)
        d_sh, d_dir = eval_sh_backward(sh, prep.view_dirs, d_color)
        if cfg.sh_degree < 3:
            d_sh[:, (cfg.sh_degree + 1) ** 2:] = 0.0
        d_mu += normalize_backward(np.asarray(scene.mu, dtype=np.float64) - camera.center, d_dir)
    else:
        d_sh = np.zeros((0, 16, 3))
    return SceneGrads(d_mu, d_quat, d_log_scale, d_opacity_raw, d_gamma_raw, d_sh,
                      tables_grad, mlp_grad, g[:, R.G_ERR].copy())
