"""Command-line entry point: synth, train, render, eval, info.

Failures print one line ``error: <code>: <message>`` to stderr and exit 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .io.bundle import BundleError, load_bundle, write_png
from .io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .io.metrics import psnr, report_memory, ssim
from .oracle import OracleError, make_synthetic_bundle
from .optim.train import TrainConfig, TrainingDiverged, train
from .renderer import RenderConfig, render_image
from .scene import Camera, CameraError


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def read_config_file(path):
    import tomli

    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise CliError("config-missing", f"cannot read config {path}: {exc.strerror}") from exc
    except tomli.TOMLDecodeError as exc:
        raise CliError("config-malformed", f"{path}: {exc}") from exc


def render_config_of(ckpt):
    cfg = ckpt.config
    return TrainConfig.from_mapping(cfg).render_config() if cfg else RenderConfig()


def cmd_synth(args):
    make_synthetic_bundle(args.spec, args.out, n_views=args.views, resolution=args.resolution,
                          seed=args.seed, n_test=args.test, supersample=args.supersample)
    print(f"wrote bundle {args.out} ({args.views} views)")


def cmd_train(args):
    values = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.deterministic:
        values["deterministic"] = True
    if args.iterations is not None:
        values["iterations"] = args.iterations
    try:
        config = TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise CliError("config-invalid", str(exc)) from exc
    bundle = load_bundle(args.bundle)
    try:
        result = train(bundle, config, log_path=args.log)
    except TrainingDiverged as exc:
        snap = str(args.out) + ".diverged"
        save_checkpoint(snap, exc.scene, config=config.to_dict(), cameras=bundle.cameras, iteration=exc.iteration)
        raise CliError(exc.code, f"{exc} (snapshot written to {snap})") from exc
    save_checkpoint(args.out, result.scene, config=config.to_dict(), cameras=bundle.cameras,
                    optimizer=result.optimizer if args.save_optimizer else None, iteration=result.iteration)
    print(f"wrote checkpoint {args.out} ({len(result.scene)} primitives, {result.iteration} iterations)")


def parse_camera(spec, cameras):
    try:
        idx = int(spec)
    except ValueError:
        idx = None
    if idx is not None:
        if not 0 <= idx < len(cameras):
            raise CliError("camera-index", f"camera index {idx} out of range [0, {len(cameras) - 1}]"
                           if cameras else f"camera index {idx} out of range: checkpoint stores no cameras")
        return cameras[idx]
    try:
        text = spec if spec.lstrip().startswith("{") else Path(spec).read_text()
        return Camera.from_dict(json.loads(text))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError, CameraError) as exc:
        raise CliError("camera-invalid", f"cannot parse camera {spec!r}: {exc}") from exc


def cmd_render(args):
    ckpt = load_checkpoint(args.checkpoint)
    cam = parse_camera(args.camera, ckpt.cameras)
    img = render_image(ckpt.scene, cam, render_config_of(ckpt))
    write_png(args.out, img)
    print(f"wrote {args.out}")


def eval_rows(ckpt, bundle, split):
    cfg = render_config_of(ckpt)
    rows = []
    for i in bundle.indices(split):
        img = np.clip(render_image(ckpt.scene, bundle.cameras[i], cfg), 0.0, 1.0)
        rows.append((bundle.names[i], psnr(img, bundle.images[i]), ssim(img, bundle.images[i])))
    return rows


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    rows = eval_rows(ckpt, bundle, args.split)
    out = ["view,psnr,ssim"]
    out += [f"{n},{p:.6f},{s:.6f}" for n, p, s in rows]
    if rows:
        out.append(f"mean,{np.mean([r[1] for r in rows]):.6f},{np.mean([r[2] for r in rows]):.6f}")
    print("\n".join(out))


def cmd_info(args):
    ckpt = load_checkpoint(args.checkpoint)
    prim_sh = not ckpt.config.get("no_prim_sh", False)
    total, text = report_memory(ckpt.scene, prim_sh=prim_sh)
    print(f"iteration={ckpt.iteration} cameras={len(ckpt.cameras)}")
    print(text)


def build_parser():
    p = argparse.ArgumentParser(prog="nexel", description="Neural-textured surfel reconstruction")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="emit a synthetic bundle from a quad scene spec")
    s.add_argument("spec", help="JSON scene spec path, or a preset name (three-quads)")
    s.add_argument("out")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--test", type=int, default=None, help="held-out views (default views // 5)")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--supersample", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    t = sub.add_parser("train", help="optimize a scene against a bundle")
    t.add_argument("bundle")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value options file")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--iterations", type=int)
    t.add_argument("--log", help="per-iteration CSV log path")
    t.add_argument("--save-optimizer", action="store_true")
    t.set_defaults(func=cmd_train)
    r = sub.add_parser("render", help="render one view of a checkpoint to PNG")
    r.add_argument("checkpoint")
    r.add_argument("--camera", required=True, help="stored camera index, or camera JSON (file or inline)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    e = sub.add_parser("eval", help="PSNR/SSIM per view as CSV")
    e.add_argument("checkpoint")
    e.add_argument("bundle")
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)
    i = sub.add_parser("info", help="counts and memory report")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (BundleError, CheckpointError) as exc:
        code, msg = exc.code, str(exc)
    except OracleError as exc:
        code, msg = "synth", str(exc)
    except OSError as exc:
        code, msg = "io", str(exc)
    else:
        return 0
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
