"""Binary checkpoint format (all integers and floats little-endian):

    b"NEXL"  u32 version
    u32 n    n bytes of UTF-8 JSON (sorted keys): shapes, level scales, config, cameras
    f32      primitive arrays in PRIM_FIELDS order
    f32      grid tables (L, T, F), then each MLP weight matrix
    u32 flag optional optimizer section: per group m, v (f32) and u64 step
    u64      iteration counter
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..field import HashGrid, TextureField, TextureMLP
from ..optim.adam import AdamState
from ..scene import PRIM_FIELDS, PRIM_SHAPES, Camera, Scene

MAGIC = b"NEXL"
VERSION = 1
F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    code = "checkpoint"


@dataclass
class Checkpoint:
    scene: Scene
    config: dict = field(default_factory=dict)
    cameras: list = field(default_factory=list)
    optimizer: dict | None = None
    iteration: int = 0


def _f32(a):
    return np.ascontiguousarray(a, dtype=F32).tobytes()


def checkpoint_bytes(scene: Scene, *, config=None, cameras=(), optimizer=None, iteration=0) -> bytes:
    f = scene.field
    header = {
        "n_prims": len(scene),
        "scales": [float(s) for s in f.grid.scales],
        "table_shape": list(f.grid.tables.shape),
        "mlp_shapes": [list(w.shape) for w in f.mlp.weights],
        "use_downweight": bool(f.use_downweight),
        "background": [float(c) for c in scene.background],
        "config": config or {},
        "cameras": [c.to_dict() for c in cameras],
        "optimizer_groups": None if optimizer is None else
        [[name, list(st.m.shape)] for name, st in optimizer.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [_f32(getattr(scene, k)) for k in PRIM_FIELDS]
    parts.append(_f32(f.grid.tables))
    parts += [_f32(w) for w in f.mlp.weights]
    parts.append(struct.pack("<I", 0 if optimizer is None else 1))
    for st in (optimizer or {}).values():
        parts += [_f32(st.m), _f32(st.v), struct.pack("<Q", int(st.step))]
    parts.append(struct.pack("<Q", int(iteration)))
    return b"".join(parts)


def save_checkpoint(path, scene: Scene, *, config=None, cameras=(), optimizer=None, iteration=0):
    Path(path).write_bytes(checkpoint_bytes(scene, config=config, cameras=cameras,
                                            optimizer=optimizer, iteration=iteration))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype=F32).reshape(shape).astype(np.float32)


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        head = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    n_prims = int(head["n_prims"])
    prims = {k: r.array((n_prims,) + PRIM_SHAPES[k]) for k in PRIM_FIELDS}
    tables = r.array(tuple(head["table_shape"]))
    weights = [r.array(tuple(s)) for s in head["mlp_shapes"]]
    grid = HashGrid(np.asarray(head["scales"], dtype=np.float64), tables)
    fld = TextureField(grid, TextureMLP(weights), bool(head["use_downweight"]))
    (has_opt,) = r.unpack("<I")
    optimizer = None
    if has_opt:
        optimizer = {}
        for name, shape in head["optimizer_groups"] or []:
            m = r.array(tuple(shape))
            v = r.array(tuple(shape))
            (step,) = r.unpack("<Q")
            optimizer[name] = AdamState(m, v, int(step))
    (iteration,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    scene = Scene(field=fld, background=head["background"], **prims)
    cams = [Camera.from_dict(c) for c in head.get("cameras", [])]
    return Checkpoint(scene, head.get("config", {}), cams, optimizer, int(iteration))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {p} does not exist")
    return parse_checkpoint(p.read_bytes())
