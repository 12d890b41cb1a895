import numpy as np
import pytest

from nexel.field import HashGrid, TextureField, TextureMLP
from nexel.scene import Camera, Scene


def small_field(rng, extent=2.0, n_levels=4, table_size=256, hidden=16, finest_ratio=8.0):
    field = TextureField.create(extent=extent, n_levels=n_levels, table_size=table_size, hidden=hidden,
                                finest_ratio=finest_ratio, rng=rng, dtype=np.float64)
    field.grid.tables[:] = rng.uniform(-1, 1, field.grid.tables.shape)
    return field


def random_scene(rng, n, field=None, spread=0.5, scale=(0.1, 0.4), dtype=np.float64):
    """Random nexels around the origin, viewed by :func:`front_camera`."""
    field = small_field(rng) if field is None else field
    return Scene(mu=rng.uniform(-spread, spread, (n, 3)).astype(dtype), quat=rng.normal(size=(n, 4)).astype(dtype),
                 log_scale=np.log(rng.uniform(*scale, (n, 2))).astype(dtype),
                 opacity_raw=rng.normal(size=n).astype(dtype), gamma_raw=rng.normal(size=(n, 2)).astype(dtype),
                 sh=rng.normal(scale=0.3, size=(n, 16, 3)).astype(dtype), field=field,
                 background=rng.uniform(0, 1, 3))


def front_camera(size=32, fx=40.0):
    return Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], size, size, fx)


def grad_scene(rng, n=5):
    """Gradient-check scene: every query falls in one hash cell per level, so
    the trilinear interpolation is smooth under the finite-difference steps."""
    grid = HashGrid(np.array([0.125, 0.25]), rng.uniform(-1, 1, (2, 16, 2)))
    field = TextureField(grid, TextureMLP.create(4, 8, rng=rng, dtype=np.float64))
    return Scene(mu=rng.uniform(1.6, 2.4, (n, 3)), quat=rng.normal(size=(n, 4)),
                 log_scale=np.log(rng.uniform(0.16, 0.32, (n, 2))), opacity_raw=rng.normal(size=n),
                 gamma_raw=rng.normal(size=(n, 2)), sh=rng.normal(scale=0.3, size=(n, 16, 3)),
                 field=field, background=rng.uniform(0, 1, 3))


def grad_camera(size=8):
    return Camera.look_at([2.0, 2.0, -1.2], [2.0, 2.0, 2.0], [0.0, -1.0, 0.0], size, size, 20.0)


def fd_agrees(analytic, numeric, loss_scale, rel=1e-4, step=1e-5):
    """Relative agreement with a floor at the central-difference round-off level
    (~eps * |loss| / step, with a x100 margin for the summation inside the loss)."""
    floor = 100 * np.finfo(np.float64).eps * max(1.0, abs(loss_scale)) / step
    err = np.abs(analytic - numeric)
    bound = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    return bool(np.all(err <= bound)), float(np.max(err / np.maximum(bound, 1e-300)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record(number, title, ok, detail=""):
    """Log one acceptance line for the end-of-run summary."""
    ACCEPTANCE.append((number, "PASS" if ok else "FAIL", title, detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{status} [{number:>2}] {title}" + (f" ({detail})" if detail else ""))
