"""On-disk dataset: ``images/`` (8-bit RGB PNG), ``cameras.json``,
``points.ply`` (ASCII) and ``split.json``.

Pixel values are used as stored (no sRGB linearization). ``cameras.json``
holds ``{"background": [r, g, b], "views": [...]}`` where each view has
``file, width, height, fx, fy, cx, cy`` and a row-major 4x4
``world_to_camera``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..scene import Camera, CameraError


class BundleError(ValueError):
    code = "bundle"


class BundleMissingFile(BundleError):
    code = "bundle-missing-file"


class BundleDimensionMismatch(BundleError):
    code = "bundle-dimension-mismatch"


class BundleMalformedJSON(BundleError):
    code = "bundle-malformed-json"


class BundleMalformedPLY(BundleError):
    code = "bundle-malformed-ply"


@dataclass
class Bundle:
    names: list
    cameras: list
    images: list
    points: np.ndarray
    colors: np.ndarray | None = None
    split: dict = field(default_factory=dict)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self):
        return len(self.names)

    def indices(self, split):
        if split == "all":
            return list(range(len(self.names)))
        if split not in self.split:
            raise BundleError(f"bundle has no split named {split!r}")
        pos = {n: i for i, n in enumerate(self.names)}
        return [pos[n] for n in self.split[split]]


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_ply(path, points, colors=None):
    pts = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {pts.shape[0]}",
             "property double x", "property double y", "property double z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = to_uint8(colors)
    lines.append("end_header")
    for i, p in enumerate(pts):
        row = " ".join(repr(float(c)) for c in p)
        if colors is not None:
            row += " " + " ".join(str(int(c)) for c in rgb[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """ASCII PLY vertices; returns ``(points, colors or None)`` with colours in [0, 1]."""
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise BundleMalformedPLY(f"{path}: not an ASCII PLY file") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise BundleMalformedPLY(f"{path}: missing 'ply' magic line")
    try:
        end = next(i for i, ln in enumerate(lines) if ln.strip() == "end_header")
    except StopIteration:
        raise BundleMalformedPLY(f"{path}: missing end_header") from None
    count, props, in_vertex = None, [], False
    for ln in lines[1:end]:
        tok = ln.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format" and tok[1:2] != ["ascii"]:
            raise BundleMalformedPLY(f"{path}: only ascii PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
    if count is None or not {"x", "y", "z"} <= set(props):
        raise BundleMalformedPLY(f"{path}: no vertex element with x, y, z")
    body = lines[end + 1:end + 1 + count]
    if len(body) < count:
        raise BundleMalformedPLY(f"{path}: expected {count} vertices, found {len(body)}")
    try:
        data = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64)
    except ValueError as exc:
        raise BundleMalformedPLY(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(props):
        raise BundleMalformedPLY(f"{path}: vertex rows do not match {len(props)} properties")
    col = {p: i for i, p in enumerate(props)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if {"red", "green", "blue"} <= set(props):
        colors = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    return points, colors


def save_bundle(bundle: Bundle, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for name, cam, img in zip(bundle.names, bundle.cameras, bundle.images):
        write_png(out / "images" / name, img)
        views.append({"file": name, **cam.to_dict()})
    doc = {"background": [float(c) for c in bundle.background], "views": views}
    (out / "cameras.json").write_text(json.dumps(doc, indent=1))
    (out / "split.json").write_text(json.dumps(bundle.split, indent=1))
    write_ply(out / "points.ply", bundle.points, bundle.colors)


def _read_json(path):
    if not path.is_file():
        raise BundleMissingFile(f"missing {path.name} in bundle {path.parent}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleMalformedJSON(f"{path.name}: {exc}") from exc


def load_bundle(path) -> Bundle:
    root = Path(path)
    if not root.is_dir():
        raise BundleMissingFile(f"bundle directory {root} does not exist")
    doc = _read_json(root / "cameras.json")
    split = _read_json(root / "split.json")
    views = doc.get("views") if isinstance(doc, dict) else None
    if not isinstance(views, list) or not isinstance(split, dict):
        raise BundleMalformedJSON("cameras.json needs a 'views' list and split.json an object")
    names, cams, images = [], [], []
    for v in views:
        try:
            name = v["file"]
            cam = Camera.from_dict(v)
        except (KeyError, TypeError, ValueError, CameraError) as exc:
            raise BundleMalformedJSON(f"cameras.json: bad view entry {v.get('file', '?') if isinstance(v, dict) else v}: {exc}") from exc
        img_path = root / "images" / name
        if not img_path.is_file():
            raise BundleMissingFile(f"view {name}: image file {img_path} is missing")
        img = read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise BundleDimensionMismatch(
                f"view {name}: image is {img.shape[1]}x{img.shape[0]} but camera says {cam.width}x{cam.height}")
        names.append(name)
        cams.append(cam)
        images.append(img)
    known = set(names)
    for key, lst in split.items():
        missing = [n for n in lst if n not in known]
        if missing:
            raise BundleMalformedJSON(f"split.json: {key} lists unknown view {missing[0]}")
    ply = root / "points.ply"
    if not ply.is_file():
        raise BundleMissingFile(f"missing points.ply in bundle {root}")
    points, colors = read_ply(ply)
    if points.shape[0] < 2:
        raise BundleMalformedPLY("points.ply needs at least two vertices")
    bg = np.asarray(doc.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)
    return Bundle(names, cams, images, points, colors, split, bg)
