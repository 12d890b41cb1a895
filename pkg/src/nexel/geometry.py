"""Per-intersection math: activations, the separable generalized-Gaussian
kernel, ray/surfel intersection and real spherical harmonics up to degree 3.

Everything here broadcasts over leading array dimensions and works in
whatever float precision it is handed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_MIN = 1.0 / 255.0
GRAZING_EPS = 1e-8
NEAR_EPS = 1e-2
SH_COEFFS = 16

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class InvalidPrimitiveError(ValueError):
    """Raised when raw primitive parameters are not finite."""

    def __init__(self, ids):
        self.ids = [int(i) for i in np.atleast_1d(ids)]
        super().__init__(f"non-finite parameters for primitive(s) {self.ids}")


@dataclass
class Nexel:
    """Raw (pre-activation) parameters of one surfel."""

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_raw: float
    gamma_raw: np.ndarray
    sh: np.ndarray

    @classmethod
    def create(cls, mu=(0.0, 0.0, 0.0), quat=(1.0, 0.0, 0.0, 0.0), log_scale=(0.0, 0.0),
               opacity_raw=0.0, gamma_raw=(-5.0, -5.0), sh=None) -> "Nexel":
        sh = np.zeros((SH_COEFFS, 3)) if sh is None else np.asarray(sh, dtype=np.float64).reshape(SH_COEFFS, 3)
        return cls(np.asarray(mu, dtype=np.float64), np.asarray(quat, dtype=np.float64),
                   np.asarray(log_scale, dtype=np.float64), float(opacity_raw),
                   np.asarray(gamma_raw, dtype=np.float64), sh)


@dataclass
class Activated:
    opacity: np.ndarray
    scale: np.ndarray
    gamma: np.ndarray
    rotation: np.ndarray  # (..., 3, 3), columns are v1, v2, v3


@dataclass
class Intersection:
    u: np.ndarray
    v: np.ndarray
    t_star: np.ndarray
    x_star: np.ndarray


# ---------------------------------------------------------------- activations

def sigmoid(x):
    x = np.asarray(x)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def inverse_sigmoid(p):
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


def inverse_softplus(y):
    y = np.asarray(y)
    return y + np.log(-np.expm1(-y))


def activate_gamma(gamma_raw):
    return 1.0 + softplus(gamma_raw)


def quat_to_rotation(quat):
    """Rotation matrix from an (unnormalized) w-x-y-z quaternion."""
    q = np.asarray(quat)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_rotation_backward(quat, grad_rotation):
    """Vector-Jacobian product of :func:`quat_to_rotation` w.r.t. the raw quaternion."""
    q = np.asarray(quat)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_rotation
    g = lambda r, c: G[..., r, c]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial direction of the normalization
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def activate(nexel: Nexel | None = None, *, opacity_raw=None, log_scale=None, gamma_raw=None,
             quat=None, ids=None) -> Activated:
    """Map raw parameters to (o, sigma, gamma, R).

    Accepts either a single :class:`Nexel` or stacked raw arrays as keywords.
    Non-finite inputs raise :class:`InvalidPrimitiveError` naming the offenders.
    """
    if nexel is not None:
        opacity_raw, log_scale, gamma_raw, quat = nexel.opacity_raw, nexel.log_scale, nexel.gamma_raw, nexel.quat
        mu, sh = nexel.mu, nexel.sh
        if not all(np.all(np.isfinite(a)) for a in (mu, sh, quat, log_scale, gamma_raw, opacity_raw)):
            raise InvalidPrimitiveError(0 if ids is None else ids)
    opacity_raw = np.asarray(opacity_raw, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    gamma_raw = np.asarray(gamma_raw, dtype=np.float64)
    quat = np.asarray(quat, dtype=np.float64)
    bad = ~(np.isfinite(opacity_raw)
            & np.all(np.isfinite(log_scale), axis=-1)
            & np.all(np.isfinite(gamma_raw), axis=-1)
            & np.all(np.isfinite(quat), axis=-1))
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise InvalidPrimitiveError(idx if ids is None else np.asarray(ids)[idx])
    return Activated(sigmoid(opacity_raw), np.exp(log_scale), activate_gamma(gamma_raw), quat_to_rotation(quat))


# --------------------------------------------------------------------- kernel

def _axis_power(u, gamma):
    # |u|^(2*gamma) as (u^2)^gamma: exact u^2 at gamma == 1, 0 at u == 0
    return np.power(u * u, gamma)


def eval_kernel(u, v, o, gamma):
    """alpha = o * exp(-|u|^{2 g1} / 2) * exp(-|v|^{2 g2} / 2)."""
    gamma = np.asarray(gamma)
    a = _axis_power(np.asarray(u), gamma[..., 0])
    b = _axis_power(np.asarray(v), gamma[..., 1])
    return o * np.exp(-(a + b) / 2)


def eval_kernel_grad(u, v, o, gamma):
    """Analytic partials (d/du, d/dv, d/do, d/dg1, d/dg2) of :func:`eval_kernel`."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    g1, g2 = gamma[..., 0], gamma[..., 1]
    alpha = eval_kernel(u, v, o, gamma)
    uu, vv = u * u, v * v
    du = -alpha * g1 * u * np.power(uu, g1 - 1)
    dv = -alpha * g2 * v * np.power(vv, g2 - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dg1 = np.where(uu > 0, -0.5 * alpha * np.power(uu, g1) * np.log(np.where(uu > 0, uu, 1.0)), 0.0)
        dg2 = np.where(vv > 0, -0.5 * alpha * np.power(vv, g2) * np.log(np.where(vv > 0, vv, 1.0)), 0.0)
    do = np.exp(-(_axis_power(u, g1) + _axis_power(v, g2)) / 2)
    return du, dv, do, dg1, dg2


def kernel_radius(o, gamma):
    """Largest |u| (per axis) at which alpha can still reach ALPHA_MIN."""
    o = np.asarray(o, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = 2.0 * np.log(np.maximum(o / ALPHA_MIN, 1.0))
        return np.power(arg[..., None], 1.0 / (2.0 * np.asarray(gamma)))


# --------------------------------------------------------------- intersection

def intersect(origin, direction, mu, rotation, scale, o=None, gamma=None):
    """Ray/plane intersection in primitive space.

    Returns an :class:`Intersection` and a boolean ``hit`` mask. A miss is a
    grazing ray, a hit behind the near plane or, when ``o`` and ``gamma`` are
    given, a kernel value below ALPHA_MIN.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    v1, v2, v3 = rotation[..., :, 0], rotation[..., :, 1], rotation[..., :, 2]
    denom = np.sum(direction * v3, axis=-1)
    grazing = np.abs(denom) < GRAZING_EPS
    safe = np.where(grazing, 1.0, denom)
    t = np.sum((mu - origin) * v3, axis=-1) / safe
    x = origin + t[..., None] * direction
    rel = x - mu
    u = np.sum(rel * v1, axis=-1) / scale[..., 0]
    v = np.sum(rel * v2, axis=-1) / scale[..., 1]
    hit = ~grazing & (t > NEAR_EPS)
    if o is not None:
        hit &= eval_kernel(u, v, o, gamma) >= ALPHA_MIN
    return Intersection(u, v, t, x), hit


# ----------------------------------------------------------- spherical harmonics

def sh_basis(dirs):
    """Real SH basis (16 functions, degree 3) at directions ``(..., 3)``."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    one = np.ones_like(x)
    out = [
        SH_C0 * one,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy), SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs):
    """d(sh_basis)/d(dir) treating the basis as polynomials in R^3, shape (..., 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    c2, c3 = SH_C2, SH_C3
    rows = [
        (zero, zero, zero),
        (zero, -SH_C1 + zero, zero),
        (zero, zero, SH_C1 + zero),
        (-SH_C1 + zero, zero, zero),
        (c2[0] * y, c2[0] * x, zero),
        (zero, c2[1] * z, c2[1] * y),
        (-2 * c2[2] * x, -2 * c2[2] * y, 4 * c2[2] * z),
        (c2[3] * z, zero, c2[3] * x),
        (2 * c2[4] * x, -2 * c2[4] * y, zero),
        (6 * c3[0] * x * y, c3[0] * (3 * xx - 3 * yy), zero),
        (c3[1] * y * z, c3[1] * x * z, c3[1] * x * y),
        (-2 * c3[2] * x * y, c3[2] * (4 * zz - xx - 3 * yy), 8 * c3[2] * y * z),
        (-6 * c3[3] * x * z, -6 * c3[3] * y * z, c3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (c3[4] * (4 * zz - 3 * xx - yy), -2 * c3[4] * x * y, 8 * c3[4] * x * z),
        (2 * c3[5] * x * z, -2 * c3[5] * y * z, c3[5] * (xx - yy)),
        (c3[6] * (3 * xx - 3 * yy), -6 * c3[6] * x * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs, dirs):
    """RGB from SH coefficients ``(..., 16, 3)`` with the +0.5 offset and zero clamp."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != 3:
        coeffs = coeffs.reshape(coeffs.shape[:-1] + (SH_COEFFS, 3))
    basis = sh_basis(dirs)
    return np.maximum(np.einsum("...k,...kc->...c", basis, coeffs) + 0.5, 0.0)


def eval_sh_backward(coeffs, dirs, grad_rgb, need_dir=True):
    """Gradients of :func:`eval_sh` w.r.t. coefficients and (polynomial) direction."""
    basis = sh_basis(dirs)
    raw = np.einsum("...k,...kc->...c", basis, coeffs) + 0.5
    g = np.where(raw > 0, grad_rgb, 0.0)
    dcoeffs = basis[..., :, None] * g[..., None, :]
    if not need_dir:
        return dcoeffs, None
    jac = sh_basis_jacobian(dirs)
    ddir = np.einsum("...kj,...kc,...c->...j", jac, coeffs, g)
    return dcoeffs, ddir


def normalize_backward(vec, grad_unit):
    """VJP of ``vec / |vec|``."""
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    unit = vec / norm
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=-1, keepdims=True)) / norm
