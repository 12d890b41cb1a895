"""Image metrics and the storage accounting used for model-size figures."""
from __future__ import annotations

import math

import numpy as np

from ..optim.losses import ssim_with_grad

PSNR_CAP = 99.0
GRID_BYTES = 2  # half precision for hash-grid and MLP parameters
PRIM_BYTES = 4
PRIM_PARAMS_FULL = 3 + 4 + 2 + 1 + 2 + 48
PRIM_PARAMS_NO_SH = PRIM_PARAMS_FULL - 45


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; identical images report ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b):
    """Channel-averaged SSIM, 11x11 Gaussian window (sigma 1.5), valid region."""
    return ssim_with_grad(a, b, need_grad=False)[0]


def memory_bytes(n_prims, grid_params, mlp_params, prim_sh=True):
    per_prim = PRIM_PARAMS_FULL if prim_sh else PRIM_PARAMS_NO_SH
    return GRID_BYTES * (grid_params + mlp_params) + PRIM_BYTES * n_prims * per_prim


def report_memory(scene, prim_sh=True):
    """Logical model size, ``(bytes, summary line)``, independent of in-memory dtype."""
    grid = int(scene.field.grid.tables.size)
    mlp = int(scene.field.mlp.n_params)
    total = memory_bytes(len(scene), grid, mlp, prim_sh)
    text = (f"primitives={len(scene)} grid_params={grid} mlp_params={mlp} "
            f"per_prim_params={PRIM_PARAMS_FULL if prim_sh else PRIM_PARAMS_NO_SH} "
            f"bytes={total} ({total / 1e6:.1f} MB)")
    return total, text
