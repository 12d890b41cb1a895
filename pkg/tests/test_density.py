import math

import numpy as np
import pytest

from nexel.density import (BlendedErrorAccumulator, DensityError, densify_split, farthest_point_sample,
                           initialize, prune, weighted_sample_without_replacement)
from nexel.geometry import SH_C0, inverse_sigmoid, quat_to_rotation, sigmoid
from nexel.scene import Scene

from conftest import small_field


def brute_fps(pts, n):
    order, dists = [0], [np.nan]
    for _ in range(1, n):
        best, best_d = None, -1.0
        for j in range(len(pts)):
            if j in order:
                continue
            d = min(np.linalg.norm(pts[j] - pts[i]) for i in order)
            if d > best_d:
                best, best_d = j, d
        order.append(best)
        dists.append(best_d)
    return order, dists


def test_fps_example():
    order, d = farthest_point_sample(np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]]), 3)
    assert list(order) == [0, 2, 1]
    np.testing.assert_array_equal(d[1:], [10, 1])


def test_fps_matches_brute_force(rng):
    pts = rng.normal(size=(40, 3))
    order, d = farthest_point_sample(pts, 15)
    b_order, b_d = brute_fps(pts, 15)
    assert list(order) == b_order
    np.testing.assert_allclose(d[1:], b_d[1:], rtol=1e-15)
    assert sorted(farthest_point_sample(pts, 40)[0]) == list(range(40))
    with pytest.raises(DensityError):
        farthest_point_sample(np.zeros((0, 3)), 1)


def test_fps_permutation_invariant(rng):
    pts = rng.normal(size=(60, 3))
    order, d = farthest_point_sample(pts, 30)
    for _ in range(5):
        perm = np.concatenate([[0], 1 + rng.permutation(59)])  # the start point stays first
        p_order, p_d = farthest_point_sample(pts[perm], 30)
        np.testing.assert_array_equal(perm[p_order], order)
        np.testing.assert_array_equal(p_d[1:], d[1:])


def test_initialize_counts_and_scales(rng):
    cloud = rng.normal(size=(10, 3))
    field = small_field(rng)
    assert len(initialize(cloud, 4, rng=rng, field=field)) == 2
    assert len(initialize(cloud, 100, rng=rng, field=field)) == 10
    two = initialize(np.array([[0.0, 0, 0], [3, 0, 0]]), 4, rng=rng, field=field, dtype=np.float64)
    np.testing.assert_allclose(np.exp(two.log_scale[1]), [3, 3], rtol=1e-15)
    np.testing.assert_allclose(sigmoid(two.opacity_raw), 0.5)
    with pytest.raises(DensityError):
        initialize(np.zeros((0, 3)), 4, field=field)


def test_initialize_hierarchy_and_colors(rng):
    cloud = rng.uniform(-1, 1, (300, 3))
    colors = rng.uniform(0, 1, (300, 3))
    scene = initialize(cloud, 200, colors, rng=rng, field=small_field(rng), dtype=np.float64)
    s = np.exp(scene.log_scale[:, 0])
    assert np.all(np.diff(s) <= 1e-12)
    order, _ = farthest_point_sample(cloud, 100)
    np.testing.assert_allclose(scene.sh[:, 0], (colors[order] - 0.5) / SH_C0)
    assert np.all(scene.sh[:, 1:] == 0)


def one_prim_scene(sigma=(2.0, 1.0), rng=None, n=1):
    field = small_field(np.random.default_rng(0))
    return Scene(mu=np.zeros((n, 3)), quat=np.tile([1.0, 0, 0, 0], (n, 1)),
                 log_scale=np.tile(np.log(sigma), (n, 1)), opacity_raw=np.full(n, 0.3),
                 gamma_raw=np.tile([0.7, 1.3], (n, 1)), sh=np.ones((n, 16, 3)), field=field)


def test_split_geometry(rng):
    scene = one_prim_scene()
    out, source, fresh = densify_split(scene, np.array([1.0]), 10, rng)
    assert len(out) == 2 and list(source) == [0, 0] and fresh.all()
    np.testing.assert_allclose(np.sort(out.mu[:, 0]), [-1, 1], atol=1e-15)
    np.testing.assert_allclose(out.mu[:, 1:], 0, atol=1e-15)
    np.testing.assert_allclose(np.exp(out.log_scale), 1.0, rtol=1e-15)
    assert np.all(out.gamma_raw == [0.7, 1.3]) and np.all(out.opacity_raw == 0.3) and np.all(out.sh == 1)


def test_split_along_second_axis_when_longer(rng):
    scene = one_prim_scene(sigma=(0.5, 4.0))
    out, *_ = densify_split(scene, np.array([1.0]), 10, rng)
    np.testing.assert_allclose(np.sort(out.mu[:, 1]), [-2, 2], atol=1e-15)
    np.testing.assert_allclose(np.exp(out.log_scale), [[0.5, 2.0]] * 2, rtol=1e-15)


def test_split_tiles_parent_in_quad_limit(rng):
    field = small_field(rng)
    q = rng.normal(size=4)
    scene = Scene(mu=rng.normal(size=(1, 3)), quat=q[None], log_scale=np.log([[3.0, 1.0]]),
                  opacity_raw=np.zeros(1), gamma_raw=np.full((1, 2), 50.0), sh=np.zeros((1, 16, 3)), field=field)
    out, *_ = densify_split(scene, np.array([1.0]), 10, rng)
    r = quat_to_rotation(q)

    def corners(mu, s1, s2):
        return sorted(tuple(np.round(mu + a * s1 * r[:, 0] + b * s2 * r[:, 1], 12)) for a in (-1, 1) for b in (-1, 1))

    parent = corners(scene.mu[0], 3.0, 1.0)
    kids = [corners(out.mu[i], *np.exp(out.log_scale[i])) for i in range(2)]
    union = sorted(set(kids[0]) | set(kids[1]))
    assert set(parent) <= set(union) and len(union) == 6  # two halves share the middle edge


def test_split_count_and_budget(rng):
    scene = one_prim_scene(n=1000)
    errors = rng.uniform(0.1, 1, 1000)
    out, *_ = densify_split(scene, errors, 10 ** 6, rng)
    assert len(out) == 1050
    out, *_ = densify_split(scene, errors, 1020, rng)
    assert len(out) == 1020
    out, *_ = densify_split(scene, errors, 1000, rng)
    assert out is scene
    out, *_ = densify_split(scene, np.zeros(1000), 10 ** 6, rng)
    assert out is scene


def test_selection_frequencies(rng):
    e = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    trials = 10_000
    counts = np.zeros(5)
    for _ in range(trials):
        counts[weighted_sample_without_replacement(e, 1, rng)] += 1
    p = e / e.sum()
    sd = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sd)


def test_prune_threshold(rng):
    scene = one_prim_scene(n=4)
    scene.opacity_raw[:] = inverse_sigmoid(np.array([0.004, 0.006, 0.5, 0.0049]))
    out, keep = prune(scene)
    assert list(keep) == [1, 2]
    np.testing.assert_allclose(sigmoid(out.opacity_raw), [0.006, 0.5])
    scene.opacity_raw[:] = 0.0
    out, keep = prune(scene)
    assert out is scene


def test_accumulator(rng):
    acc = BlendedErrorAccumulator.zeros(3)
    acc.add(np.array([0.1, 0.0, 0.5]))
    acc.add(np.array([0.1, 0.2, 0.0]))
    np.testing.assert_allclose(acc.errors, [0.2, 0.2, 0.5])
    acc.remap(np.array([2, 0, 0]), np.array([False, False, True]))
    np.testing.assert_allclose(acc.errors, [0.5, 0.2, 0.0])
    acc.reset()
    assert not acc.errors.any()


def test_budget_holds_over_cycles(rng):
    scene = one_prim_scene(n=50)
    scene.opacity_raw[:] = rng.normal(size=50) * 4
    for _ in range(30):
        scene, *_ = densify_split(scene, rng.uniform(0, 1, len(scene)), 64, rng)
        scene, _ = prune(scene)
        assert len(scene) <= 64
        assert math.isfinite(float(np.sum(scene.mu)))
