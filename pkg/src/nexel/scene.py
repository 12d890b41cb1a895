"""Scene container (struct-of-arrays primitives plus the shared field) and the
pinhole camera model."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import TextureField
from .geometry import SH_COEFFS, Nexel, activate, eval_sh

PRIM_FIELDS = ("mu", "quat", "log_scale", "opacity_raw", "gamma_raw", "sh")
PRIM_SHAPES = {"mu": (3,), "quat": (4,), "log_scale": (2,), "opacity_raw": (), "gamma_raw": (2,), "sh": (SH_COEFFS, 3)}


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        rot = self.world_to_camera[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise CameraError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def center(self):
        """Camera position in world space (the ray origin)."""
        return -self.rotation.T @ self.world_to_camera[:3, 3]

    @property
    def focal(self):
        return float(self.fx)

    def ray_dirs(self):
        """Unit world-space ray directions through pixel centers, ``(H, W, 3)``."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d = d @ self.rotation  # row-vector form of R^T d
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_camera(self, pts):
        return pts @ self.rotation.T + self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, cx=None, cy=None):
        """OpenCV-style camera (x right, y down, z forward) at ``eye`` facing ``target``."""
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(width, height, fx, fx if fy is None else fy,
                   width / 2 if cx is None else cx, height / 2 if cy is None else cy, w2c)

    def to_dict(self):
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy,
                "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4))


@dataclass
class Scene:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_raw: np.ndarray
    gamma_raw: np.ndarray
    sh: np.ndarray
    field: TextureField
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def empty(cls, field: TextureField, dtype=np.float32, background=(0.0, 0.0, 0.0)):
        arrays = {k: np.zeros((0,) + PRIM_SHAPES[k], dtype=dtype) for k in PRIM_FIELDS}
        return cls(field=field, background=background, **arrays)

    @classmethod
    def from_nexels(cls, nexels, field: TextureField, dtype=np.float64, background=(0.0, 0.0, 0.0)):
        if not nexels:
            return cls.empty(field, dtype, background)
        arrays = {k: np.stack([np.asarray(getattr(n, k), dtype=dtype) for n in nexels]) for k in PRIM_FIELDS}
        return cls(field=field, background=background, **arrays)

    def nexel(self, i) -> Nexel:
        return Nexel(*(np.array(getattr(self, k)[i], dtype=np.float64) for k in PRIM_FIELDS[:3]),
                     float(self.opacity_raw[i]), np.array(self.gamma_raw[i], dtype=np.float64),
                     np.array(self.sh[i], dtype=np.float64))

    def prim_arrays(self):
        return {k: getattr(self, k) for k in PRIM_FIELDS}

    def with_prims(self, **arrays):
        return replace(self, **arrays)

    def select(self, keep):
        return replace(self, **{k: getattr(self, k)[keep] for k in PRIM_FIELDS})

    def astype(self, dtype):
        return replace(self, **{k: getattr(self, k).astype(dtype) for k in PRIM_FIELDS})

    def activated(self, gamma_fixed=False):
        act = activate(opacity_raw=self.opacity_raw, log_scale=self.log_scale, gamma_raw=self.gamma_raw, quat=self.quat)
        if gamma_fixed:
            act.gamma = np.ones_like(act.gamma)
        return act

    def colors(self, camera: Camera, sh_degree=3):
        """Per-primitive SH colour seen from the camera center, ``(N, 3)``."""
        dirs = self.view_dirs(camera)
        return eval_sh(self.truncated_sh(sh_degree), dirs)

    def view_dirs(self, camera: Camera):
        d = np.asarray(self.mu, dtype=np.float64) - camera.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def truncated_sh(self, sh_degree=3):
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh_degree >= 3:
            return sh
        n = (sh_degree + 1) ** 2
        out = np.zeros_like(sh)
        out[:, :n] = sh[:, :n]
        return out


def flatten_params(scene: Scene) -> np.ndarray:
    """All learnable scalars (primitives, grid tables, MLP weights) as one vector."""
    parts = [np.ravel(getattr(scene, k)) for k in PRIM_FIELDS]
    parts.append(np.ravel(scene.field.grid.tables))
    parts.extend(np.ravel(w) for w in scene.field.mlp.weights)
    return np.concatenate(parts).astype(np.float64)


def unflatten_params(scene: Scene, vec) -> Scene:
    """Inverse of :func:`flatten_params`; returns a new scene (field copied)."""
    from .field import HashGrid, TextureField, TextureMLP

    vec = np.asarray(vec, dtype=np.float64)
    pos = 0
    arrays = {}
    for k in PRIM_FIELDS:
        a = getattr(scene, k)
        arrays[k] = vec[pos:pos + a.size].reshape(a.shape).astype(a.dtype)
        pos += a.size
    f = scene.field
    tab = f.grid.tables
    tables = vec[pos:pos + tab.size].reshape(tab.shape).astype(tab.dtype)
    pos += tab.size
    weights = []
    for w in f.mlp.weights:
        weights.append(vec[pos:pos + w.size].reshape(w.shape).astype(w.dtype))
        pos += w.size
    field = TextureField(HashGrid(f.grid.scales, tables), TextureMLP(weights), f.use_downweight)
    return replace(scene, field=field, **arrays)
