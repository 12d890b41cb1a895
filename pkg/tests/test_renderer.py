import numpy as np
import pytest

from nexel.field import HashGrid, TextureField, TextureMLP
from nexel.geometry import SH_C0, Nexel, inverse_sigmoid
from nexel.oracle import finite_diff_grad, naive_render
from nexel.renderer import (SENTINEL, RenderConfig, RenderError, TopKBuffer, render, render_backward,
                            topk_insert)
from nexel.scene import Scene, unflatten_params, flatten_params

from conftest import fd_agrees, front_camera, grad_camera, grad_scene, random_scene, small_field


def test_topk_examples():
    b = TopKBuffer(2)
    for pid, w in (("a", 0.5), ("b", 0.3), ("c", 0.4)):
        topk_insert(b, ord(pid), w, 1.0)
    assert b.as_dict() == {ord("a"): 0.5, ord("c"): 0.4}
    b = TopKBuffer(4)
    b.insert(1, 0.1, 1.0).insert(2, 0.2, 1.0)
    assert b.as_dict() == {2: 0.2, 1: 0.1}
    b = TopKBuffer(1)
    b.insert(1, 0.4, 1.0).insert(2, 0.4, 2.0)
    assert b.as_dict() == {1: 0.4}


def test_topk_tie_eviction_keeps_earliest():
    b = TopKBuffer(2)
    b.insert(1, 0.2, 0).insert(2, 0.2, 0).insert(3, 0.5, 0)
    assert list(b.finalize()[0]) == [3, 1]


def flat_scene(opacities, colors, depths=None, k_field=None):
    depths = np.arange(len(opacities), dtype=float) if depths is None else depths
    nex = []
    for o, c, z in zip(opacities, colors, depths):
        sh = np.zeros((16, 3))
        sh[0] = (np.asarray(c) - 0.5) / SH_C0
        nex.append(Nexel.create(mu=(0, 0, z), log_scale=(np.log(1e4), np.log(1e4)), opacity_raw=inverse_sigmoid(o),
                                gamma_raw=(-40, -40), sh=sh))
    grid = HashGrid(np.array([1.0]), np.zeros((1, 8, 2)))
    return Scene.from_nexels(nex, TextureField(grid, TextureMLP.create(2, 4, rng=0, dtype=np.float64)))


def test_hand_composited_pair():
    scene = flat_scene([0.5, 0.6], [(1, 0, 0), (0, 1, 0)])
    cam = front_camera(4)
    res = render(scene, cam, RenderConfig(k=1))
    b = res.buffers
    np.testing.assert_allclose(b.weights[..., 0], 0.5, atol=1e-9)
    assert np.all(b.ids[..., 0] == 0)
    np.testing.assert_allclose(b.n, np.broadcast_to([0, 0.3, 0], b.n.shape), atol=1e-9)
    res0 = render(scene, cam, RenderConfig(k=0))
    np.testing.assert_allclose(res0.image, np.broadcast_to([0.5, 0.3, 0], b.n.shape), atol=1e-9)


def test_opaque_primitive_buffered_and_removed_from_n():
    scene = flat_scene([0.999], [(0.2, 0.7, 0.9)])
    res = render(scene, front_camera(4), RenderConfig(k=1, alpha_max=1.0))
    b = res.buffers
    np.testing.assert_allclose(b.weights[..., 0], 0.999, atol=1e-9)
    np.testing.assert_allclose(b.n, 0.0, atol=1e-9)
    # zero-table field: every texture sample is 0.5 gray
    np.testing.assert_allclose(b.texture[..., 0, :], 0.5)
    np.testing.assert_allclose(res.image, b.n + 0.5 * b.weights.sum(-1, keepdims=True), atol=1e-15)


def test_empty_scene_is_background(rng):
    scene = Scene.empty(small_field(rng), background=(0.1, 0.2, 0.3))
    res = render(scene, front_camera(8))
    assert np.all(res.image == np.array([0.1, 0.2, 0.3]))
    assert np.all(res.buffers.ids == SENTINEL)
    assert np.all(naive_render(scene, front_camera(8), 2) == np.array([0.1, 0.2, 0.3]))


def test_buffer_invariants(rng):
    scene = random_scene(rng, 30)
    res = render(scene, front_camera(), RenderConfig(k=4))
    b = res.buffers
    empty = b.ids == SENTINEL
    assert np.all(b.weights[empty] == 0) and np.all(b.depths[empty] == 0)
    s = b.weights.sum(-1)
    assert np.all(s >= 0) and np.all(s <= 1 + 1e-12)
    assert np.all(np.diff(b.weights, axis=-1) <= 0)


def test_matches_oracle_and_topk_optimality(rng):
    cam = front_camera()
    for _ in range(3):
        scene = random_scene(rng, 20)
        for k in (0, 2, 4):
            res = render(scene, cam, RenderConfig(k=k, early_stop=0.0))
            img, parts = naive_render(scene, cam, k, return_parts=True)
            np.testing.assert_allclose(res.image, img, atol=1e-9)
            # same ids as the oracle's full-sort selection; weights agree to rounding
            sel = parts["selected"]
            ids = np.where(sel, parts["order"][None, None, :], -1)
            want = np.sort(ids, axis=-1)[..., ::-1][..., :k] if k else ids[..., :0]
            got = np.sort(res.buffers.ids, axis=-1)[..., ::-1]
            np.testing.assert_array_equal(got, want)
            w_sorted = -np.sort(-parts["weight"], axis=-1)[..., :k]
            np.testing.assert_allclose(res.buffers.weights, w_sorted, atol=1e-15)
            total = parts["weight"].sum(-1) + parts["t_final"]
            np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_worker_count_is_bit_identical(rng):
    scene = random_scene(rng, 40)
    cam = front_camera(48)
    imgs = [render(scene, cam, RenderConfig(workers=w)).image for w in (1, 3, 4)]
    assert all(np.array_equal(imgs[0], im) for im in imgs[1:])
    assert np.array_equal(render(scene, cam).image, render(scene, cam).image)


def test_backward_zero_upstream(rng):
    scene = random_scene(rng, 10)
    cam = front_camera(16)
    res = render(scene, cam)
    g = render_backward(scene, cam, res, np.zeros((16, 16, 3)))
    assert not np.any(g.flat())
    with pytest.raises(RenderError):
        render_backward(scene, cam, res, np.zeros((4, 4, 3)))


def test_single_primitive_opacity_gradient(rng):
    scene = grad_scene(rng, 1)
    cam = grad_camera()
    res = render(scene, cam)
    g = render_backward(scene, cam, res, np.ones((8, 8, 3)))

    def loss(o):
        s = scene.with_prims(opacity_raw=np.array([o[0]]))
        return float(np.sum(render(s, cam).image))

    fd = finite_diff_grad(loss, np.asarray(scene.opacity_raw, dtype=np.float64))
    ok, worst = fd_agrees(g.opacity_raw, fd, np.sum(res.image))
    assert ok, worst


def test_full_gradient_small_scene(rng):
    scene = grad_scene(rng, 5)
    cam = grad_camera()
    cfg = RenderConfig(k=2)
    tgt = rng.uniform(0, 1, (8, 8, 3))
    res = render(scene, cam, cfg)
    analytic = render_backward(scene, cam, res, res.image - tgt).flat()

    def loss(vec):
        return 0.5 * float(np.sum((render(unflatten_params(scene, vec), cam, cfg).image - tgt) ** 2))

    fd = finite_diff_grad(loss, flatten_params(scene))
    ok, worst = fd_agrees(analytic, fd, loss(flatten_params(scene)))
    assert ok, worst


def test_error_map_accumulates_blended_error(rng):
    scene = random_scene(rng, 10)
    cam = front_camera(16)
    res = render(scene, cam, RenderConfig(k=2, early_stop=0.0))
    err = rng.uniform(0, 1, (16, 16))
    g = render_backward(scene, cam, res, np.zeros((16, 16, 3)), error_map=err)
    _, parts = naive_render(scene, cam, 2, return_parts=True)
    expected = np.zeros(len(scene))
    expected[parts["order"]] = np.einsum("hwn,hw->n", parts["weight"], err)
    np.testing.assert_allclose(g.errors, expected, atol=1e-12)


def test_early_termination_bounded():
    colors = [(0.9, 0.1, 0.4)] * 14
    scene = flat_scene([0.6] * 14, colors)
    scene.background = np.array([0.2, 0.8, 0.5])
    cam = front_camera(4)
    full = render(scene, cam, RenderConfig(k=0, early_stop=0.0))
    cut = render(scene, cam, RenderConfig(k=0))
    stop = int(np.max(cut.buffers.stop))
    assert stop < 14 and 0.4 ** stop < 1e-4 <= 0.4 ** (stop - 1)
    assert 0 < np.max(np.abs(full.image - cut.image)) <= 1e-4 * (0.9 + 0.8)
    np.testing.assert_allclose(full.image, naive_render(scene, cam, 0), atol=1e-12)
