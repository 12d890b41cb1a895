"""Initialization by farthest point sampling, and the interleaved
stochastic split / opacity prune used during training."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import TextureField
from .geometry import SH_C0, SH_COEFFS, sigmoid
from .scene import PRIM_FIELDS, Scene

MAX_FPS_POINTS = 200_000
PRUNE_OPACITY = 0.005
SPLIT_FRACTION = 0.05
INIT_GAMMA_RAW = -5.0


class DensityError(ValueError):
    pass


def farthest_point_sample(points, n):
    """Greedy argmax-min ordering starting at index 0.

    Returns ``(order, pred_dist)`` where ``pred_dist[i]`` is the distance from
    sample ``i`` to its nearest earlier sample (``nan`` for the first).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DensityError("farthest point sampling needs a non-empty point array")
    if not 1 <= n <= pts.shape[0]:
        raise DensityError(f"sample count {n} outside [1, {pts.shape[0]}]")
    order = np.empty(n, dtype=np.int64)
    pred = np.full(n, np.nan)
    order[0] = 0
    mind = np.linalg.norm(pts - pts[0], axis=1)
    mind[0] = -np.inf
    for i in range(1, n):
        j = int(np.argmax(mind))
        order[i] = j
        pred[i] = mind[j]
        mind = np.minimum(mind, np.linalg.norm(pts - pts[j], axis=1))
        mind[order[:i + 1]] = -np.inf
    return order, pred


def scene_extent(points):
    pts = np.asarray(points, dtype=np.float64)
    ext = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    return ext if ext > 0 else 1.0


def initialize(points, budget, colors=None, *, rng=None, field: TextureField | None = None,
               dtype=np.float32, background=(0.0, 0.0, 0.0), **field_kwargs) -> Scene:
    """Seed ``floor(budget / 2)`` nexels from a point cloud.

    Scales come from the FPS predecessor distances, so early (coarse) samples
    are large and later ones small.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DensityError("empty point cloud")
    if pts.shape[0] < 2:
        raise DensityError("initialization needs at least two points")
    rng = np.random.default_rng(rng)
    if pts.shape[0] > MAX_FPS_POINTS:
        keep = np.sort(rng.choice(pts.shape[0], MAX_FPS_POINTS, replace=False))
        pts = pts[keep]
        colors = None if colors is None else np.asarray(colors)[keep]
    n = min(int(math.floor(0.5 * budget)), pts.shape[0])
    if n < 1:
        raise DensityError(f"budget {budget} yields no primitives")
    order, pred = farthest_point_sample(pts, n)
    dist = pred.copy()
    if n > 1:
        dist[0] = np.max(pred[1:])
    else:
        dist[0] = np.max(np.linalg.norm(pts - pts[0], axis=1))
    dist = np.maximum(dist, 1e-7)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    sh = np.zeros((n, SH_COEFFS, 3))
    if colors is not None:
        sh[:, 0] = (np.asarray(colors, dtype=np.float64)[order] - 0.5) / SH_C0
    if field is None:
        field = TextureField.create(extent=scene_extent(pts), rng=rng, dtype=dtype, **field_kwargs)
    return Scene(mu=pts[order].astype(dtype), quat=quat.astype(dtype),
                 log_scale=np.repeat(np.log(dist)[:, None], 2, axis=1).astype(dtype),
                 opacity_raw=np.zeros(n, dtype=dtype),
                 gamma_raw=np.full((n, 2), INIT_GAMMA_RAW, dtype=dtype),
                 sh=sh.astype(dtype), field=field, background=background)


@dataclass
class BlendedErrorAccumulator:
    """Per-primitive sum of blended L1 errors across iterations."""

    errors: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))

    def add(self, blended):
        self.errors += np.maximum(blended, 0.0)

    def reset(self):
        self.errors[:] = 0.0

    def remap(self, source, fresh):
        e = self.errors[source]
        e[fresh] = 0.0
        self.errors = e


def weighted_sample_without_replacement(weights, k, rng):
    """Efraimidis-Spirakis reservoir keys: top-k of log(U) / w over w > 0."""
    w = np.asarray(weights, dtype=np.float64)
    pos = np.flatnonzero(w > 0)
    k = min(k, pos.size)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.log(rng.random(pos.size)) / w[pos]
    top = np.argsort(-keys, kind="stable")[:k]
    return np.sort(pos[top])


def densify_split(scene: Scene, errors, budget, rng, fraction=SPLIT_FRACTION):
    """Split ``ceil(fraction * N)`` error-sampled primitives along their long axis.

    Each parent becomes two children with the long scale halved, centred at
    mu -/+ (sigma_long / 2) * v_long; every other raw parameter is copied.
    The minus child keeps the parent's row, the plus children are appended.
    Returns ``(scene, source, fresh)`` for remapping optimizer state.
    """
    n = len(scene)
    ident = np.arange(n)
    errors = np.asarray(errors, dtype=np.float64)
    k = min(int(math.ceil(fraction * n)), budget - n)
    if n == 0 or k <= 0 or not np.sum(errors) > 0:
        return scene, ident, np.zeros(n, dtype=bool)
    chosen = weighted_sample_without_replacement(errors, k, rng)
    if chosen.size == 0:
        return scene, ident, np.zeros(n, dtype=bool)
    act = scene.activated()
    scale = act.scale[chosen]
    long_axis = np.where(scale[:, 1] > scale[:, 0], 1, 0)
    rows = np.arange(chosen.size)
    sigma_long = scale[rows, long_axis]
    v_long = act.rotation[chosen, :, long_axis]
    offset = (sigma_long / 2)[:, None] * v_long
    arrays = {k_: np.array(getattr(scene, k_)) for k_ in PRIM_FIELDS}
    mu = arrays["mu"].astype(np.float64)
    log_scale = arrays["log_scale"].astype(np.float64)
    new_log_scale = log_scale[chosen].copy()
    new_log_scale[rows, long_axis] -= math.log(2.0)
    plus = {k_: arrays[k_][chosen].copy() for k_ in PRIM_FIELDS}
    plus["mu"] = (mu[chosen] + offset).astype(arrays["mu"].dtype)
    plus["log_scale"] = new_log_scale.astype(arrays["log_scale"].dtype)
    arrays["mu"][chosen] = (mu[chosen] - offset).astype(arrays["mu"].dtype)
    arrays["log_scale"][chosen] = new_log_scale.astype(arrays["log_scale"].dtype)
    merged = {k_: np.concatenate([arrays[k_], plus[k_]]) for k_ in PRIM_FIELDS}
    source = np.concatenate([ident, chosen])
    fresh = np.zeros(source.size, dtype=bool)
    fresh[chosen] = True
    fresh[n:] = True
    return scene.with_prims(**merged), source, fresh


def prune(scene: Scene, threshold=PRUNE_OPACITY):
    """Drop primitives whose activated opacity is below ``threshold``.

    Returns ``(scene, kept_indices)``; survivors keep their relative order.
    """
    o = sigmoid(np.asarray(scene.opacity_raw, dtype=np.float64))
    keep = np.flatnonzero(o >= threshold)
    if keep.size == len(scene):
        return scene, keep
    return scene.select(keep), keep
