"""Brute-force references: a tile-free, buffer-free 64-bit renderer, central
finite differences, and an analytic ray tracer for synthetic training data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .geometry import eval_kernel, intersect
from .scene import Camera, Scene


class OracleError(RuntimeError):
    pass


def naive_render(scene: Scene, camera: Camera, k: int, *, alpha_max=0.999, sh_degree=3,
                 gamma_fixed=False, return_parts=False):
    """Render by intersecting every primitive with every pixel ray.

    Contributions are composited exactly in center-depth order, the textured
    set is the top-``k`` weights of a full stable sort, and there is no early
    termination.
    """
    h, w = camera.height, camera.width
    dirs = camera.ray_dirs().reshape(-1, 3)
    origin = camera.center
    bg = np.asarray(scene.background, dtype=np.float64)
    n = len(scene)
    if n == 0:
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        return (img, {}) if return_parts else img
    act = scene.activated(gamma_fixed=gamma_fixed)
    colors = scene.colors(camera, sh_degree)
    mu = np.asarray(scene.mu, dtype=np.float64)
    order = np.argsort(camera.to_camera(mu)[:, 2], kind="stable")
    npix = dirs.shape[0]
    alpha = np.zeros((npix, n))
    depth = np.zeros((npix, n))
    for col, i in enumerate(order):
        inter, hit = intersect(origin, dirs, mu[i], act.rotation[i], act.scale[i], act.opacity[i], act.gamma[i])
        a = eval_kernel(inter.u, inter.v, act.opacity[i], act.gamma[i])
        alpha[:, col] = np.where(hit, np.minimum(a, alpha_max), 0.0)
        depth[:, col] = np.where(hit, inter.t_star, 0.0)
    keep = 1.0 - alpha
    trans = np.concatenate([np.ones((npix, 1)), np.cumprod(keep, axis=1)[:, :-1]], axis=1)
    weight = alpha * trans
    t_final = np.prod(keep, axis=1)
    rank = np.argsort(-weight, axis=1, kind="stable")[:, :k]
    selected = np.zeros((npix, n), dtype=bool)
    if k:
        rows = np.arange(npix)[:, None]
        selected[rows, rank] = weight[rows, rank] > 0
    color = np.broadcast_to(colors[order][None], (npix, n, 3)).copy()
    pix, col = np.nonzero(selected)
    if pix.size:
        t = depth[pix, col]
        d = dirs[pix]
        rgb, _ = scene.field.forward(origin + t[:, None] * d, t, camera.focal, d)
        color[pix, col] = rgb
    img = np.einsum("pn,pnc->pc", weight, color) + t_final[:, None] * bg
    img = img.reshape(h, w, 3)
    if return_parts:
        return img, {"weight": weight.reshape(h, w, n), "selected": selected.reshape(h, w, n),
                     "order": order, "t_final": t_final.reshape(h, w), "color": color.reshape(h, w, n, 3)}
    return img


def finite_diff_grad(loss_fn, params, step=1e-5):
    """Central-difference gradient of ``loss_fn`` at ``params`` (64-bit)."""
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn(x)
        flat[i] = orig - step
        fm = loss_fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite loss while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# analytic synthetic scenes

THREE_QUADS = {
    "background": [0.0, 0.0, 0.0],
    "quads": [
        {"center": [0.0, 0.0, 0.0], "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 1.0, 0.0],
         "half_size": [1.0, 1.0],
         "texture": {"type": "checkerboard", "cells": 4, "colors": [[0.9, 0.9, 0.85], [0.15, 0.2, 0.6]]}},
        {"center": [-1.0, 0.0, 0.9], "u_axis": [0.0, 0.0, 1.0], "v_axis": [0.0, 1.0, 0.0],
         "half_size": [0.9, 1.0],
         "texture": {"type": "checkerboard", "cells": 4, "colors": [[0.85, 0.3, 0.2], [0.95, 0.85, 0.3]]}},
        {"center": [0.0, 1.0, 0.9], "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 0.0, 1.0],
         "half_size": [1.0, 0.9],
         "texture": {"type": "checkerboard", "cells": 4, "colors": [[0.2, 0.7, 0.3], [0.9, 0.9, 0.9]]}},
    ],
}

PRESETS = {"three-quads": THREE_QUADS}


@dataclass
class Quad:
    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_size: np.ndarray
    texture: dict = dc_field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        u = np.asarray(d["u_axis"], dtype=np.float64)
        v = np.asarray(d["v_axis"], dtype=np.float64)
        u = u / np.linalg.norm(u)
        v = v - (v @ u) * u
        v = v / np.linalg.norm(v)
        return cls(np.asarray(d["center"], dtype=np.float64), u, v,
                   np.asarray(d.get("half_size", (1.0, 1.0)), dtype=np.float64), dict(d.get("texture", {})))

    @property
    def normal(self):
        return np.cross(self.u_axis, self.v_axis)

    def shade(self, a, b):
        """Texture colour at local coordinates ``a, b`` in [-1, 1]."""
        tex = self.texture
        kind = tex.get("type", "checkerboard")
        c0, c1 = (np.asarray(c, dtype=np.float64) for c in tex.get("colors", ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])))
        s, t = (a + 1) / 2, (b + 1) / 2
        n = int(tex.get("cells", 4))
        if kind == "checkerboard":
            parity = (np.floor(s * n).astype(np.int64) + np.floor(t * n).astype(np.int64)) % 2
            return np.where(parity[..., None] == 0, c0, c1)
        if kind == "stripes":
            parity = np.floor(s * n).astype(np.int64) % 2
            return np.where(parity[..., None] == 0, c0, c1)
        if kind == "radial":
            r = np.clip(np.sqrt(a * a + b * b) / np.sqrt(2.0), 0.0, 1.0)[..., None]
            return (1 - r) * c0 + r * c1
        raise OracleError(f"unknown texture type {kind!r}")


def parse_scene_spec(spec):
    if isinstance(spec, (str, Path)):
        if str(spec) in PRESETS:
            spec = PRESETS[str(spec)]
        else:
            try:
                spec = json.loads(Path(spec).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise OracleError(f"cannot read scene spec {spec}: {exc}") from exc
    quads = [Quad.from_dict(q) for q in spec.get("quads", [])]
    return quads, np.asarray(spec.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)


def _trace(quads, background, origin, dirs):
    best = np.full(dirs.shape[0], np.inf)
    out = np.broadcast_to(background, dirs.shape).copy()
    for q in quads:
        denom = dirs @ q.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((q.center - origin) @ q.normal) / denom
        p = origin + t[:, None] * dirs
        a = ((p - q.center) @ q.u_axis) / q.half_size[0]
        b = ((p - q.center) @ q.v_axis) / q.half_size[1]
        hit = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(a) <= 1) & (np.abs(b) <= 1) & (t < best)
        if hit.any():
            best[hit] = t[hit]
            out[hit] = q.shade(a[hit], b[hit])
    return out


def raytrace_synthetic(scene_spec, camera: Camera, supersample=1):
    """Nearest-hit ray tracing of opaque analytic quads, ``(H, W, 3)`` in 64-bit.

    ``supersample`` traces an s-by-s grid of sub-pixel rays and box-filters them.
    """
    quads, bg = parse_scene_spec(scene_spec)
    s = int(supersample)
    h, w = camera.height, camera.width
    off = (np.arange(s) + 0.5) / s
    xs = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    ys = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    gx, gy = np.meshgrid((xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy)
    d = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    img = _trace(quads, bg, camera.center, d.reshape(-1, 3)).reshape(h * s, w * s, 3)
    return img.reshape(h, s, w, s, 3).mean(axis=(1, 3))


def ring_cameras(center, radius, height, n_views, resolution, fov_deg=60.0, up=(0.0, 0.0, 1.0)):
    """``n_views`` cameras evenly spaced on a horizontal ring, all facing ``center``."""
    center = np.asarray(center, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fx = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(Camera.look_at(eye, center, up, resolution, resolution, fx))
    return cams


def surface_points(quads, per_quad, rng):
    """Jittered stratified samples on each quad (in-plane jitter only) with their colours."""
    side = int(np.ceil(np.sqrt(per_quad)))
    pts, cols = [], []
    for q in quads:
        g = (np.arange(side) + 0.5) / side * 2 - 1
        a, b = np.meshgrid(g, g)
        a = np.clip(a.ravel() + rng.uniform(-1, 1, a.size) / side, -1, 1)[:per_quad]
        b = np.clip(b.ravel() + rng.uniform(-1, 1, b.size) / side, -1, 1)[:per_quad]
        pts.append(q.center + (a * q.half_size[0])[:, None] * q.u_axis + (b * q.half_size[1])[:, None] * q.v_axis)
        cols.append(q.shade(a, b))
    return np.concatenate(pts), np.concatenate(cols)


def make_synthetic_bundle(scene_spec, out_dir, n_views=20, resolution=128, seed=0, *, n_test=None,
                          points_per_quad=300, supersample=4, radius=None, height=None, fov_deg=60.0):
    """Render ring views of an analytic scene and write them as a bundle.

    Every ``n_views / n_test``-th view (offset so test views sit between
    training views) is held out; by default a quarter-of-five split (16/4 for 20).
    """
    from .io.bundle import Bundle, save_bundle

    quads, bg = parse_scene_spec(scene_spec)
    rng = np.random.default_rng(seed)
    if quads:
        corners = np.array([q.center + su * q.half_size[0] * q.u_axis + sv * q.half_size[1] * q.v_axis
                            for q in quads for su in (-1, 1) for sv in (-1, 1)])
        center = corners.mean(axis=0)
        ext = float(np.max(np.linalg.norm(corners - center, axis=1)))
    else:
        center, ext = np.zeros(3), 1.0
    radius = 2.0 * ext if radius is None else radius
    height = 1.0 * ext if height is None else height
    cams = ring_cameras(center, radius, height, n_views, resolution, fov_deg)
    images = [raytrace_synthetic(scene_spec, c, supersample) for c in cams]
    names = [f"view_{i:03d}.png" for i in range(n_views)]
    n_test = n_views // 5 if n_test is None else n_test
    stride = n_views / n_test if n_test else 0
    test = sorted({int(stride * j + stride / 2) for j in range(n_test)}) if n_test else []
    split = {"train": [names[i] for i in range(n_views) if i not in test], "test": [names[i] for i in test]}
    if quads:
        points, colors = surface_points(quads, points_per_quad, rng)
    else:
        raise OracleError("a synthetic bundle needs at least one quad for its point cloud")
    bundle = Bundle(names=names, cameras=cams, images=images, points=points, colors=colors,
                    split=split, background=bg)
    save_bundle(bundle, out_dir)
    return bundle
