import hashlib

import numpy as np

from nexel.geometry import SH_C0
from nexel.io.bundle import load_bundle
from nexel.oracle import (THREE_QUADS, finite_diff_grad, make_synthetic_bundle, naive_render,
                          parse_scene_spec, raytrace_synthetic)
from nexel.scene import Camera

from conftest import front_camera, random_scene


def test_fd_closed_forms(rng):
    np.testing.assert_allclose(finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0])), [6.0], atol=1e-8)
    assert not np.any(finite_diff_grad(lambda x: 4.2, rng.normal(size=5)))
    a = rng.normal(size=(6, 6))
    a = a + a.T
    x = rng.normal(size=6)
    np.testing.assert_allclose(finite_diff_grad(lambda v: 0.5 * v @ a @ v, x), a @ x, atol=1e-6)


def test_naive_k0_is_plain_compositing(rng):
    scene = random_scene(rng, 8)
    cam = front_camera(16)
    img, parts = naive_render(scene, cam, 0, return_parts=True)
    direct = np.einsum("hwn,hwnc->hwc", parts["weight"], parts["color"]) + parts["t_final"][..., None] * scene.background
    np.testing.assert_allclose(img, direct, atol=1e-15)


def test_single_opaque_textured_primitive(rng):
    from nexel.geometry import Nexel, inverse_sigmoid
    from nexel.scene import Scene
    from conftest import small_field

    field = small_field(rng)
    scene = Scene.from_nexels([Nexel.create(log_scale=(np.log(50.0),) * 2, opacity_raw=inverse_sigmoid(0.999),
                                            gamma_raw=(-30.0, -30.0))], field)
    cam = front_camera(4)
    img, parts = naive_render(scene, cam, 1, alpha_max=1.0, return_parts=True)
    d = cam.ray_dirs().reshape(-1, 3)
    t = 3.0 / d[:, 2]
    rgb, _ = field.forward(cam.center + t[:, None] * d, t, cam.focal, d)
    w = parts["weight"].reshape(-1)
    np.testing.assert_allclose(img.reshape(-1, 3), w[:, None] * rgb, atol=1e-12)
    assert np.all(np.abs(w - 0.999) < 1e-5)


def checker_spec(cells=4):
    return {"background": [0.0, 0.0, 0.0],
            "quads": [{"center": [0.0, 0.0, 0.0], "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 1.0, 0.0],
                       "half_size": [4.0, 4.0],
                       "texture": {"type": "checkerboard", "cells": cells, "colors": [[1, 1, 1], [0, 0, 0]]}}]}


def test_checkerboard_cell_size():
    # quad spans 8 units in 8 cells -> 1 unit per cell; at depth 4 with fx 32 a cell is 8 pixels
    cam = Camera.look_at([0.5, 0.5, -4.0], [0.5, 0.5, 0.0], [0.0, -1.0, 0.0], 64, 64, 32.0)
    img = raytrace_synthetic(checker_spec(8), cam)[..., 0]
    row = img[4]
    edges = np.flatnonzero(np.diff(row) != 0) + 1
    assert np.all(np.diff(edges) == 8)


def test_background_only_cases():
    cam = Camera.look_at([0.0, 0.0, -4.0], [0.0, 0.0, -8.0], [0.0, -1.0, 0.0], 16, 16, 16.0)
    assert np.all(raytrace_synthetic(checker_spec(), cam) == 0)
    spec = {"background": [0.2, 0.3, 0.4], "quads": []}
    assert np.all(raytrace_synthetic(spec, cam) == np.array([0.2, 0.3, 0.4]))


def test_raytrace_deterministic_hash():
    cam = Camera.look_at([3.0, 2.0, 2.0], [0.0, 0.3, 0.6], [0.0, 0.0, 1.0], 32, 32, 30.0)
    a = raytrace_synthetic(THREE_QUADS, cam, supersample=2)
    b = raytrace_synthetic(THREE_QUADS, cam, supersample=2)
    assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()
    assert 0.1 < np.mean(a.sum(-1) > 0) < 0.9


def test_synthetic_bundle_round_trip(tmp_path):
    bundle = make_synthetic_bundle("three-quads", tmp_path / "b", n_views=16, resolution=24, supersample=1)
    loaded = load_bundle(tmp_path / "b")
    assert len(loaded) == 16 and len(list((tmp_path / "b" / "images").iterdir())) == 16
    for a, b in zip(bundle.cameras, loaded.cameras):
        assert np.array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
    assert set(loaded.split["train"]) | set(loaded.split["test"]) == set(loaded.names)
    quads, _ = parse_scene_spec("three-quads")
    dist = np.min(np.stack([np.abs((loaded.points - q.center) @ q.normal) for q in quads]), axis=0)
    assert np.all(dist <= 1e-6)
    # every camera's optical axis passes through the quads' corner centroid
    corners = np.array([q.center + a * q.half_size[0] * q.u_axis + b * q.half_size[1] * q.v_axis
                        for q in quads for a in (-1, 1) for b in (-1, 1)])
    target = corners.mean(axis=0)
    for cam in loaded.cameras:
        to_t = target - cam.center
        np.testing.assert_allclose(cam.rotation[2], to_t / np.linalg.norm(to_t), atol=1e-12)


def test_ply_colors_seed_sh(tmp_path):
    make_synthetic_bundle("three-quads", tmp_path / "b", n_views=4, resolution=16, supersample=1, n_test=1)
    raw = (tmp_path / "b" / "points.ply").read_text().splitlines()
    first = raw[raw.index("end_header") + 1].split()
    bundle = load_bundle(tmp_path / "b")
    rgb = np.array([int(v) for v in first[3:6]]) / 255.0
    np.testing.assert_array_equal(bundle.colors[0], rgb)
    from nexel.density import initialize
    from conftest import small_field
    scene = initialize(bundle.points, 8, bundle.colors, rng=0, field=small_field(np.random.default_rng(0)),
                       dtype=np.float64)
    np.testing.assert_allclose(scene.sh[0, 0], (rgb - 0.5) / SH_C0)
