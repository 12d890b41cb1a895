"""Shared neural texture: an unbounded multiresolution hash grid feeding a
bias-free ReLU MLP that emits degree-3 SH coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _hashgrid
from .geometry import SH_COEFFS, eval_sh_backward, sh_basis

MAP_POSITIVE_LIMIT = 1 << 30


class FieldError(ValueError):
    pass


def map_positive(x):
    """Fold signed integers onto the non-negatives: 2x-1 for x>0, -2x otherwise."""
    x = np.asarray(x, dtype=np.int64)
    if np.any(np.abs(x) >= MAP_POSITIVE_LIMIT):
        raise FieldError("map_positive input outside |x| < 2^30")
    out = np.where(x > 0, 2 * x - 1, -2 * x)
    return out if out.ndim else int(out)


def hash_cell(cell, table_size):
    """Spatial hash of integer lattice cell(s) ``(..., 3)`` into ``[0, table_size)``.

    XOR of MapPositive-folded coordinates times the primes (1, 2654435761,
    805459861) in wrapping 32-bit arithmetic, then modulo ``table_size``.
    """
    cells = np.asarray(cell, dtype=np.int64)
    flat = np.ascontiguousarray(cells.reshape(-1, 3))
    if np.any(np.abs(flat) >= MAP_POSITIVE_LIMIT):
        raise FieldError("cell coordinate outside the MapPositive domain")
    out = np.empty(flat.shape[0], dtype=np.int64)
    _hashgrid.hash_many(flat, int(table_size), out)
    out = out.reshape(cells.shape[:-1])
    return out if out.ndim else int(out)


def downweight(scale, t_star, focal):
    """Anti-aliasing attenuation 1 - exp(-(f / (s t))^2 / (2 pi)).

    Broadcasts; ``scale`` is usually the per-level vector and ``t_star`` a
    column of depths.
    """
    t_star = np.asarray(t_star, dtype=np.float64)
    if np.any(t_star <= 0):
        raise FieldError("downweight requires t_star > 0")
    r = focal / (np.asarray(scale, dtype=np.float64) * t_star)
    return -np.expm1(-(r * r) / (2 * np.pi))


def downweight_dt(scale, t_star, focal):
    t_star = np.asarray(t_star, dtype=np.float64)
    r = focal / (np.asarray(scale, dtype=np.float64) * t_star)
    a = (r * r) / (2 * np.pi)
    return -np.exp(-a) * 2 * a / t_star


def level_scales(extent, n_levels=16, finest_ratio=2.0 ** 15):
    """Geometric scales whose coarsest cell spans ``extent`` and finest ``extent / finest_ratio``."""
    s0 = 1.0 / extent
    if n_levels == 1:
        return np.array([s0])
    growth = finest_ratio ** (1.0 / (n_levels - 1))
    return s0 * growth ** np.arange(n_levels)


@dataclass
class HashGrid:
    scales: np.ndarray
    tables: np.ndarray  # (L, T, F)

    @classmethod
    def create(cls, scales, table_size=1 << 20, feat_dim=2, rng=None, init_range=1e-4, dtype=np.float32):
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(np.diff(scales) <= 0):
            raise FieldError("level scales must be strictly increasing")
        rng = np.random.default_rng(rng)
        tables = rng.uniform(-init_range, init_range, size=(len(scales), table_size, feat_dim)).astype(dtype)
        return cls(scales, tables)

    @property
    def n_levels(self):
        return self.tables.shape[0]

    @property
    def table_size(self):
        return self.tables.shape[1]

    @property
    def feat_dim(self):
        return self.tables.shape[2]

    @property
    def n_params(self):
        return int(np.prod(self.tables.shape))

    def hash_cell(self, level, cell):
        # every level uses the hashed table, coarse ones included
        del level
        return hash_cell(cell, self.table_size)

    def interpolate(self, x):
        """Trilinear per-level features ``(Q, L, F)`` at world positions ``x``."""
        x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(x)):
            raise FieldError("grid lookup at non-finite position")
        out = np.zeros((x.shape[0], self.n_levels, self.feat_dim))
        _hashgrid.grid_interp(x, self.scales, self.tables, out)
        return out

    def lookup(self, x, t_star, focal, use_downweight=True):
        """Concatenated, down-weighted features ``(Q, L*F)``."""
        feats = self.interpolate(x)
        if use_downweight:
            delta = downweight(self.scales[None, :], np.reshape(t_star, (-1, 1)), focal)
            feats = feats * delta[:, :, None]
        return feats.reshape(feats.shape[0], -1)

    def interpolate_backward(self, x, grad_feat):
        """Scatter ``d/d(interp)`` into table gradients and positional gradients."""
        x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        grad_feat = np.ascontiguousarray(grad_feat, dtype=np.float64).reshape(x.shape[0], self.n_levels, self.feat_dim)
        grad_tables = np.zeros(self.tables.shape)
        grad_x = np.zeros_like(x)
        _hashgrid.grid_backward(x, self.scales, self.tables, grad_feat, grad_tables, grad_x)
        return grad_tables, grad_x


@dataclass
class TextureMLP:
    """Bias-free ReLU network; weights stored as ``(fan_in, fan_out)`` matrices."""

    weights: list = dc_field(default_factory=list)

    @classmethod
    def create(cls, n_in=32, hidden=64, n_hidden_layers=2, n_out=3 * SH_COEFFS, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        dims = [n_in] + [hidden] * n_hidden_layers + [n_out]
        weights = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        return cls(weights)

    @property
    def n_params(self):
        return int(sum(w.size for w in self.weights))

    def forward(self, x):
        # matmuls run at the weights' precision (32-bit in training, 64-bit in checks)
        acts = [np.asarray(x, dtype=self.weights[0].dtype)]
        h = acts[0]
        for i, w in enumerate(self.weights):
            h = h @ w
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        grads = [None] * len(self.weights)
        g = np.asarray(grad_out, dtype=self.weights[0].dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            grads[i] = (acts[i].T @ g).astype(np.float64)
            g = g @ self.weights[i].T
            if i > 0:
                g *= acts[i] > 0
        return grads, g.astype(np.float64)


@dataclass
class FieldCache:
    x: np.ndarray
    t_star: np.ndarray
    view_dirs: np.ndarray
    delta: np.ndarray
    interp: np.ndarray
    acts: list
    coeffs: np.ndarray
    focal: float


@dataclass
class FieldGrads:
    tables: np.ndarray
    mlp: list
    x: np.ndarray
    t_star: np.ndarray


@dataclass
class TextureField:
    grid: HashGrid
    mlp: TextureMLP
    use_downweight: bool = True

    @classmethod
    def create(cls, extent=1.0, n_levels=16, table_size=1 << 20, feat_dim=2, hidden=64,
               finest_ratio=2.0 ** 15, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        grid = HashGrid.create(level_scales(extent, n_levels, finest_ratio), table_size, feat_dim, rng=rng, dtype=dtype)
        mlp = TextureMLP.create(n_levels * feat_dim, hidden, rng=rng, dtype=dtype)
        return cls(grid, mlp)

    def coefficients(self, x, t_star, focal):
        """Raw MLP outputs ``(Q, 16, 3)`` (no SH evaluation)."""
        feats = self.grid.lookup(x, t_star, focal, self.use_downweight)
        out, _ = self.mlp.forward(feats)
        return out.reshape(-1, SH_COEFFS, 3)

    def forward(self, x, t_star, focal, view_dirs):
        """Filtered texture radiance at queries; returns ``(rgb (Q, 3), cache)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        t_star = np.asarray(t_star, dtype=np.float64).reshape(-1)
        view_dirs = np.asarray(view_dirs, dtype=np.float64).reshape(-1, 3)
        interp = self.grid.interpolate(x)
        if self.use_downweight:
            delta = downweight(self.grid.scales[None, :], t_star[:, None], focal)
        else:
            delta = np.ones((x.shape[0], self.grid.n_levels))
        feats = (interp * delta[:, :, None]).reshape(x.shape[0], -1)
        out, acts = self.mlp.forward(feats)
        coeffs = out.reshape(-1, SH_COEFFS, 3)
        rgb = np.maximum(np.einsum("qk,qkc->qc", sh_basis(view_dirs), coeffs) + 0.5, 0.0)
        return rgb, FieldCache(x, t_star, view_dirs, delta, interp, acts, coeffs, float(focal))

    def backward(self, cache: FieldCache, grad_rgb) -> FieldGrads:
        grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
        if grad_rgb.shape != (cache.x.shape[0], 3):
            raise FieldError(f"upstream gradient shape {grad_rgb.shape} does not match cached batch {cache.x.shape[0]}")
        dcoeffs, _ = eval_sh_backward(cache.coeffs, cache.view_dirs, grad_rgb, need_dir=False)
        mlp_grads, dfeats = self.mlp.backward(cache.acts, dcoeffs.reshape(grad_rgb.shape[0], -1))
        dfeats = dfeats.reshape(cache.interp.shape)
        grad_tables, grad_x = self.grid.interpolate_backward(cache.x, dfeats * cache.delta[:, :, None])
        if self.use_downweight:
            ddelta = np.sum(dfeats * cache.interp, axis=-1)
            grad_t = np.sum(ddelta * downweight_dt(self.grid.scales[None, :], cache.t_star[:, None], cache.focal), axis=-1)
        else:
            grad_t = np.zeros_like(cache.t_star)
        return FieldGrads(grad_tables, mlp_grads, grad_x, grad_t)


def field_forward(field: TextureField, x, t_star, focal, view_dir):
    """Convenience single/batched query returning only RGB."""
    rgb, _ = field.forward(x, t_star, focal, view_dir)
    return rgb[0] if np.ndim(x) == 1 else rgb
