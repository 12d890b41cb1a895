"""Training loop: per iteration render one view, evaluate the losses, back-
propagate, take an Adam step, and periodically split and prune."""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ..density import BlendedErrorAccumulator, densify_split, initialize, prune
from ..geometry import sigmoid
from ..renderer import RenderConfig, render, render_backward
from ..scene import PRIM_FIELDS, Scene
from .adam import Adam
from .losses import LossWeights, loss_alpha, loss_grid, loss_image, loss_opacity, loss_texture

LOG_COLUMNS = ("iteration", "image", "texture", "alpha", "opacity", "grid", "total", "n_prims",
               "wall_time", "test_psnr")
POSITION_EPS = 1e-15


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the scene from before the bad step."""

    code = "training-diverged"

    def __init__(self, iteration, terms, scene):
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")
        self.iteration = iteration
        self.terms = terms
        self.scene = scene


@dataclass
class TrainConfig:
    iterations: int = 30_000
    budget: int = 400_000
    seed: int = 0
    deterministic: bool = True
    densify_every: int = 100
    densify_start: int = 500
    densify_end: int = 25_000
    split_fraction: float = 0.05
    prune_opacity: float = 0.005
    # render / field
    k: int = 2
    sh_degree: int = 3
    n_levels: int = 16
    table_size: int = 1 << 20
    feat_dim: int = 2
    hidden: int = 64
    finest_ratio: float = 2.0 ** 15
    workers: int = 0
    # ablations
    no_texture: bool = False
    no_gamma: bool = False
    no_prim_sh: bool = False
    no_downweight: bool = False
    # loss weights
    lambda_dssim: float = 0.2
    lambda_alpha: float = 0.005
    lambda_texture: float = 0.5
    lambda_opacity: float = 0.01
    lambda_grid: float = 0.01
    # learning rates (positions are multiplied by the scene extent)
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_quat: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_gamma: float = 2e-3
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    eval_every: int = 0

    @classmethod
    def from_mapping(cls, values: dict):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"unknown training option {key!r}")
            kind = type(getattr(cls(), key))
            if kind is bool and not isinstance(value, bool):
                raise ValueError(f"option {key!r} must be true or false")
            kwargs[key] = kind(value)
        return cls(**kwargs)

    def to_dict(self):
        return dataclasses.asdict(self)

    def render_config(self):
        return RenderConfig(k=0 if self.no_texture else self.k, sh_degree=0 if self.no_prim_sh else self.sh_degree,
                            gamma_fixed=self.no_gamma, workers=self.workers or None)

    def loss_weights(self):
        return LossWeights(self.lambda_dssim, self.lambda_alpha, self.lambda_texture,
                           self.lambda_opacity, self.lambda_grid)


@dataclass
class TrainResult:
    scene: Scene
    log: list = field(default_factory=list)
    optimizer: dict | None = None
    iteration: int = 0


def position_lr(config: TrainConfig, it, extent):
    frac = min(max(it / max(config.iterations, 1), 0.0), 1.0)
    return extent * config.lr_mu * (config.lr_mu_final / config.lr_mu) ** frac


def _params(scene: Scene):
    p = {k: getattr(scene, k) for k in PRIM_FIELDS}
    p["tables"] = scene.field.grid.tables
    for i, w in enumerate(scene.field.mlp.weights):
        p[f"mlp{i}"] = w
    return p


def _lrs(config: TrainConfig, it, extent, n_mlp):
    sh = np.full((16, 1), config.lr_sh_rest)
    sh[0] = config.lr_sh_dc
    lrs = {"mu": position_lr(config, it, extent), "quat": config.lr_quat, "log_scale": config.lr_log_scale,
           "opacity_raw": config.lr_opacity, "gamma_raw": config.lr_gamma, "sh": sh, "tables": config.lr_grid}
    lrs.update({f"mlp{i}": config.lr_mlp for i in range(n_mlp)})
    return lrs


def init_scene(bundle, config: TrainConfig, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    scene = initialize(bundle.points, config.budget, bundle.colors, rng=rng, dtype=np.float32,
                       background=bundle.background, n_levels=config.n_levels, table_size=config.table_size,
                       feat_dim=config.feat_dim, hidden=config.hidden, finest_ratio=config.finest_ratio)
    scene.field.use_downweight = not config.no_downweight
    return scene


def mean_psnr(scene, bundle, indices, rcfg):
    from ..io.metrics import psnr

    if not indices:
        return float("nan")
    return float(np.mean([psnr(np.clip(render(scene, bundle.cameras[i], rcfg).image, 0, 1), bundle.images[i])
                          for i in indices]))


def train(bundle, config: TrainConfig, scene: Scene | None = None, log_path=None, progress=None) -> TrainResult:
    """Optimize a scene against the bundle's training views.

    ``progress`` is an optional callable receiving each log row.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, view_rng, density_rng = (np.random.default_rng(s) for s in seeds)
    if scene is None:
        scene = init_scene(bundle, config, init_rng)
    rcfg = config.render_config()
    weights = config.loss_weights()
    train_idx = bundle.indices("train") if "train" in bundle.split else list(range(len(bundle)))
    test_idx = bundle.indices("test") if "test" in bundle.split else []
    pts = np.asarray(bundle.points, dtype=np.float64)
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0))) or 1.0
    n_mlp = len(scene.field.mlp.weights)
    opt = Adam(_params(scene), eps={"mu": POSITION_EPS})
    skip = ("gamma_raw",) if config.no_gamma else ()
    accum = BlendedErrorAccumulator.zeros(len(scene))
    log = []
    order = []
    start = time.perf_counter()
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
        for it in range(1, config.iterations + 1):
            if not order:
                order = list(view_rng.permutation(train_idx))
            view = int(order.pop(0))
            cam, gt = bundle.cameras[view], bundle.images[view]
            res = render(scene, cam, rcfg)
            buf = res.buffers
            terms = {}
            terms["image"], g_img = loss_image(res.image, gt, weights.dssim)
            gw = np.zeros(buf.weights.shape)
            gt_tex = None
            if rcfg.k > 0:
                terms["texture"], dw, dt = loss_texture(buf.weights, buf.texture, gt)
                gw += weights.texture * dw
                gt_tex = weights.texture * dt
            else:
                terms["texture"] = 0.0
            terms["alpha"], dw = loss_alpha(buf.weights)
            gw += weights.alpha * dw
            o = sigmoid(np.asarray(scene.opacity_raw, dtype=np.float64))
            terms["opacity"], g_o = loss_opacity(o)
            terms["grid"], g_tab = loss_grid(scene.field.grid.tables, scene.field.grid.scales)
            total = (terms["image"] + weights.texture * terms["texture"] + weights.alpha * terms["alpha"]
                     + weights.opacity * terms["opacity"] + weights.grid * terms["grid"])
            terms["total"] = total
            if not math.isfinite(total):
                raise TrainingDiverged(it, terms, scene)
            err = np.mean(np.abs(res.image - gt), axis=-1)
            g = render_backward(scene, cam, res, g_img, gw, gt_tex, err)
            grads = {"mu": g.mu, "quat": g.quat, "log_scale": g.log_scale,
                     "opacity_raw": g.opacity_raw + weights.opacity * g_o * o * (1 - o),
                     "gamma_raw": g.gamma_raw, "sh": g.sh, "tables": g.tables + weights.grid * g_tab}
            grads.update({f"mlp{i}": gm for i, gm in enumerate(g.mlp)})
            opt.step(_params(scene), grads, _lrs(config, it, extent, n_mlp), skip=skip)
            accum.add(g.errors)

            if config.densify_start <= it <= config.densify_end and it % config.densify_every == 0:
                scene, source, fresh = densify_split(scene, accum.errors, config.budget, density_rng,
                                                     config.split_fraction)
                opt.remap_rows(PRIM_FIELDS, source, fresh)
                scene, keep = prune(scene, config.prune_opacity)
                opt.remap_rows(PRIM_FIELDS, keep, np.zeros(keep.size, dtype=bool))
                accum = BlendedErrorAccumulator.zeros(len(scene))
            row = {"iteration": it, **{k: terms[k] for k in ("image", "texture", "alpha", "opacity", "grid", "total")},
                   "n_prims": len(scene), "wall_time": time.perf_counter() - start, "test_psnr": ""}
            if config.eval_every and it % config.eval_every == 0:
                row["test_psnr"] = mean_psnr(scene, bundle, test_idx, rcfg)
            log.append(row)
            if writer:
                writer.writerow([row[c] for c in LOG_COLUMNS])
            if progress:
                progress(row)
    finally:
        if fh:
            fh.close()
    return TrainResult(scene, log, opt.states, config.iterations)
