"""Training losses, each returned together with its gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
TEXTURE_MIN_WEIGHT = 1e-6


@dataclass
class LossWeights:
    dssim: float = 0.2
    alpha: float = 0.005
    texture: float = 0.5
    opacity: float = 0.01
    grid: float = 0.01

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    """Separable 'valid' correlation over the two leading axes."""
    k = win.size
    h, w = img.shape[:2]
    tmp = sum(win[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(win[i] * tmp[:, i:w - k + 1 + i] for i in range(k))


def _filter_valid_adjoint(grad, win, shape):
    k = win.size
    h, w = shape[:2]
    tmp = np.zeros((grad.shape[0], w) + grad.shape[2:])
    for i in range(k):
        tmp[:, i:w - k + 1 + i] += win[i] * grad
    out = np.zeros((h, w) + grad.shape[2:])
    for i in range(k):
        out[i:h - k + 1 + i] += win[i] * tmp
    return out


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim_with_grad(pred, gt, win_size=11, sigma=1.5, need_grad=True):
    """Mean SSIM over the valid (un-padded) window positions, channel-averaged.

    Returns ``(ssim, d ssim / d pred)``.
    """
    x, y = _check_pair(pred, gt)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    win = gaussian_window(win_size, sigma)
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    exx, eyy, exy = _filter_valid(x * x, win), _filter_valid(y * y, win), _filter_valid(x * y, win)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))
    if not need_grad:
        return value, None
    g = np.full(smap.shape, 1.0 / smap.size)
    # partials of the map w.r.t. the filtered moments of x
    d_mx = g * ((2 * my * a2) / (b1 * b2) - smap * (2 * mx) / b1)
    d_vx = g * (-smap / b2)
    d_cxy = g * (2 * a1 / (b1 * b2))
    d_exx = d_vx
    d_exy = d_cxy
    d_mx = d_mx - 2 * mx * d_vx - my * d_cxy
    grad = (_filter_valid_adjoint(d_mx, win, x.shape)
            + 2 * x * _filter_valid_adjoint(d_exx, win, x.shape)
            + y * _filter_valid_adjoint(d_exy, win, x.shape))
    return value, grad.reshape(np.shape(pred))


def ssim(pred, gt):
    return ssim_with_grad(pred, gt, need_grad=False)[0]


def loss_image(pred, gt, lambda_dssim=0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2; returns ``(value, grad)``."""
    x, y = _check_pair(pred, gt)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g = (1 - lambda_dssim) * np.sign(diff) / diff.size
    value = (1 - lambda_dssim) * l1
    if lambda_dssim > 0:
        s, gs = ssim_with_grad(x, y)
        value += lambda_dssim * (1 - s) / 2
        g = g - lambda_dssim * gs / 2
    return value, g


def loss_texture(weights, texture, gt):
    """Mean |gt - (sum_j W_j T_j) / (sum_j W_j)| over pixels with buffered weight.

    Returns ``(value, d/dW, d/dT)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    texture = np.asarray(texture, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    wsum = weights.sum(axis=-1)
    valid = wsum >= TEXTURE_MIN_WEIGHT
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(weights), np.zeros_like(texture)
    safe = np.where(valid, wsum, 1.0)
    blended = np.einsum("...k,...kc->...c", weights, texture) / safe[..., None]
    diff = gt - blended
    value = float(np.sum(np.abs(diff) * valid[..., None]) / (3 * n_valid))
    d_blend = -np.sign(diff) * valid[..., None] / (3 * n_valid)
    d_tex = weights[..., None] * (d_blend / safe[..., None])[..., None, :]
    d_w = np.einsum("...c,...kc->...k", d_blend / safe[..., None], texture) \
        - np.sum(d_blend * blended, axis=-1, keepdims=True) / safe[..., None]
    return value, d_w, d_tex


def loss_alpha(weights):
    """Mean over pixels of (1 - sum_j W_j); returns ``(value, d/dW)``."""
    weights = np.asarray(weights, dtype=np.float64)
    npix = int(np.prod(weights.shape[:-1]))
    value = float(np.mean(1.0 - weights.sum(axis=-1)))
    return value, np.full(weights.shape, -1.0 / max(npix, 1))


def loss_opacity(opacity):
    """Mean activated opacity; returns ``(value, d/do)``."""
    o = np.asarray(opacity, dtype=np.float64)
    if o.size == 0:
        return 0.0, o
    return float(np.mean(o)), np.full(o.shape, 1.0 / o.size)


def loss_grid(tables, scales):
    """sum_l s_l^-3 * sum_{i,j} H[l, i, j]^2; returns ``(value, d/dH)``."""
    tables = np.asarray(tables, dtype=np.float64)
    wl = np.asarray(scales, dtype=np.float64) ** -3.0
    value = float(np.sum(wl * np.sum(tables * tables, axis=(1, 2))))
    return value, 2 * wl[:, None, None] * tables


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of already-computed terms (``image`` is unweighted)."""
    return (terms["image"] + weights.alpha * terms.get("alpha", 0.0) + weights.texture * terms.get("texture", 0.0)
            + weights.opacity * terms.get("opacity", 0.0) + weights.grid * terms.get("grid", 0.0))
