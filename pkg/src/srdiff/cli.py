"""``srdiff`` command line.

Exit codes: 0 ok, 2 invalid configuration or arguments, 3 data or checkpoint
errors, 4 numeric abort, 5 spatial size not divisible by 16.
Diagnostics and the resolved configuration go to stderr; stdout lists the
paths written, one per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backend import NonFiniteGradientError, Rng
from .checkpoint import CheckpointError, build_from_run, load_checkpoint
from .config import ConfigError, RunConfig
from .data import ImageError, load_png, make_pairs, save_png
from .metrics import evaluate_dirs, pixel_sigma, sigma_map
from .sampler import Region, content_fuse, latent_interpolate, super_resolve
from .trainer import NumericAbort, Trainer
from .unet import DivisibilityError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_DIVISIBILITY = 0, 2, 3, 4, 5

# Stream of the run seed used for training crop offsets.
STREAM_CROPS = 3

log = logging.getLogger("srdiff")


class UsageError(ValueError):
    """Bad flag value; maps to exit code 2."""


def _emit(path) -> None:
    print(path, flush=True)


def _echo_config(name: str, cfg: dict) -> None:
    print(f"[{name}] " + json.dumps(cfg, sort_keys=True), file=sys.stderr, flush=True)


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected a comma-separated list of integers, got {text!r}") from None


def _load_model(path):
    model = load_checkpoint(path)
    _echo_config("checkpoint", {"path": str(path), "step": model.step, "T": model.schedule.T,
                                "scale": model.scale, "base_channels": model.predictor_cfg.base_channels,
                                "residual_prediction": model.train_cfg.residual_prediction})
    return model


# --- commands -----------------------------------------------------------------

def _check_resume(bundle, cfg: RunConfig) -> None:
    """Only the step budget may change between a checkpoint and the config resuming it."""
    saved = replace(bundle.train_cfg, total_steps=cfg.train.total_steps)
    for name, a, b in (("train", saved, cfg.train), ("encoder", bundle.encoder_cfg, cfg.encoder),
                       ("predictor", bundle.predictor_cfg, cfg.predictor)):
        if a != b:
            raise ConfigError(f"--resume: {name} config differs from the checkpoint's")
    bundle.train_cfg = saved


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out_dir:
        cfg.data.out_dir = args.out_dir
    _echo_config("train", cfg.to_dict())
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    pairs = make_pairs(cfg.data.hr_dir, cfg.encoder.scale, cfg.data.patch,
                       Rng(cfg.train.seed, STREAM_CROPS), cfg.data.patches_per_image)
    pairs.write_manifest(out / "manifest.tsv")
    ckpt = out / "checkpoint"
    if args.resume and (ckpt / "manifest.json").is_file():
        trainer = Trainer.resume(ckpt, pairs, out)
        _check_resume(trainer.bundle, cfg)
        log.info("resuming from step %d", trainer.bundle.step)
    else:
        trainer = Trainer(build_from_run(cfg), pairs, out)
    trainer.fit()
    for name in ("checkpoint", "loss.tsv", "run.json"):
        _emit(out / name)
    return EXIT_OK


def cmd_sr(args) -> int:
    if args.num_samples < 1:
        raise UsageError("--num-samples must be at least 1")
    model = _load_model(args.checkpoint)
    x_l = load_png(args.input)
    _echo_config("sr", {"input": args.input, "seed": args.seed, "num_samples": args.num_samples,
                        "trace": args.trace, "output": args.output,
                        "clip_x0": args.clip_x0})
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for i in range(args.num_samples):
        seed = args.seed + i
        res = super_resolve(model, x_l, seed, record_trace=args.trace and i == 0, clip_x0=args.clip_x0)
        images.append(res.image)
        p = out / f"sr_{seed}.png"
        save_png(res.image, p)
        _emit(p)
        if res.trace:
            T = model.schedule.T
            for t in sorted({T, max(T // 2, 1), 1}, reverse=True):
                tp = out / f"trace_{seed}_t{t}.npy"
                np.save(tp, res.trace[t])
                _emit(tp)
    if len(images) >= 2:
        smap = sigma_map(images)
        sigma = pixel_sigma(images)
        peak = float(smap.max())
        vis = (smap / peak if peak > 0 else smap).mean(axis=0, keepdims=True).repeat(3, axis=0)
        save_png(vis, out / "sigma.png")
        side = {"mean_sigma": sigma, "max_sigma": peak, "seeds": list(range(args.seed, args.seed + len(images))),
                "note": "sigma.png shows the per-pixel std averaged over RGB, scaled so max_sigma maps to 255"}
        (out / "sigma.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
        _emit(out / "sigma.png")
        _emit(out / "sigma.json")
    return EXIT_OK


def _strip(images) -> np.ndarray:
    return np.concatenate(images, axis=2)


def cmd_fuse(args) -> int:
    try:
        region = Region.parse(args.region)
    except ValueError as e:
        raise UsageError(str(e)) from None
    tbars = _ints(args.tbar, "--tbar")
    if not tbars:
        raise UsageError("--tbar needs at least one value")
    model = _load_model(args.checkpoint)
    for tb in tbars:
        if not 0 <= tb <= model.schedule.T:
            raise UsageError(f"--tbar {tb} outside [0, {model.schedule.T}]")
    face, eye = load_png(args.face), load_png(args.eye)
    try:
        region.check(*face.shape[1:])
    except ValueError as e:
        raise UsageError(str(e)) from None
    _echo_config("fuse", {"face": args.face, "eye": args.eye, "region": vars(region), "tbar": tbars,
                          "seed": args.seed, "out": args.out, "clip_x0": args.clip_x0})
    out = Path(args.out)
    outputs = []
    for tb in tbars:
        fused = content_fuse(model, face, eye, region, tb, args.seed, clip_x0=args.clip_x0)
        p = out if len(tbars) == 1 else out.with_name(f"{out.stem}_tbar{tb}{out.suffix or '.png'}")
        save_png(fused, p)
        _emit(p)
        outputs.append(fused)
    strip = out.with_name(f"{out.stem}_strip.png")
    save_png(_strip([face, eye] + outputs), strip)
    _emit(strip)
    return EXIT_OK


def cmd_interp(args) -> int:
    lams = _floats(args.lam, "--lambda")
    if not lams:
        raise UsageError("--lambda needs at least one value")
    bad = [v for v in lams if not 0.0 <= v <= 1.0]
    if bad:
        raise UsageError(f"--lambda values must lie in [0, 1], got {bad}")
    model = _load_model(args.checkpoint)
    if not 1 <= args.tbar <= model.schedule.T:
        raise UsageError(f"--tbar {args.tbar} outside [1, {model.schedule.T}]")
    x_l = load_png(args.input)
    _echo_config("interp", {"input": args.input, "seed_a": args.seed_a, "seed_b": args.seed_b, "lambda": lams,
                            "tbar": args.tbar, "z_seed": args.z_seed, "out": args.out,
                            "clip_x0": args.clip_x0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for lam in lams:
        img = latent_interpolate(model, x_l, args.seed_a, args.seed_b, lam, args.tbar, args.z_seed,
                                 clip_x0=args.clip_x0)
        p = out / f"interp_lambda{lam:.2f}.png"
        save_png(img, p)
        _emit(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo_config("eval", {"sr_dir": args.sr_dir, "hr_dir": args.hr_dir, "lr_dir": args.lr_dir,
                          "scale": args.scale, "out": args.out})
    if args.lr_dir and not args.scale:
        raise UsageError("--lr-dir needs --scale")
    report = evaluate_dirs(args.sr_dir, args.hr_dir, args.lr_dir, args.scale)
    for name in report.unmatched:
        print(f"unmatched: {name}", file=sys.stderr)
    if report.count == 0:
        raise ImageError("no filenames match across the given directories")
    for p in report.write(args.out):
        _emit(p)
    return EXIT_OK


def cmd_summary(args) -> int:
    model = _load_model(args.checkpoint)
    print(json.dumps({"predictor": model.predictor.num_parameters(), "encoder": model.encoder.num_parameters(),
                      "total": model.num_parameters(), "step": model.step}, sort_keys=True))
    return EXIT_OK


# --- wiring -------------------------------------------------------------------

def _clip_flag(p) -> None:
    p.add_argument("--no-clip-x0", dest="clip_x0", action="store_false",
                   help="do not clip the per-step x_0 estimate (plain ancestral steps)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srdiff", description="Diffusion super-resolution")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain the encoder and train the noise predictor")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="override data.out_dir")
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/checkpoint if present")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one LR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--trace", action="store_true", help="save x_t at t = T, T/2 and 1 as .npy")
    _clip_flag(p)
    p.set_defaults(fn=cmd_sr)

    p = sub.add_parser("fuse", help="content fusion of a region from a second HR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--face", required=True)
    p.add_argument("--eye", required=True)
    p.add_argument("--region", required=True, help="top,left,height,width in HR pixels")
    p.add_argument("--tbar", default="50", help="diffusion depth; a comma list runs a sweep")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _clip_flag(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("interp", help="latent interpolation between two seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--seed-a", type=int, required=True)
    p.add_argument("--seed-b", type=int, required=True)
    p.add_argument("--lambda", dest="lam", required=True, help="value or comma list in [0, 1]")
    p.add_argument("--tbar", type=int, default=50)
    p.add_argument("--z-seed", type=int, default=None, help="seed of the per-step noise (default: seed-a)")
    p.add_argument("--out", required=True, help="output directory")
    _clip_flag(p)
    p.set_defaults(fn=cmd_interp)

    p = sub.add_parser("eval", help="PSNR / SSIM / LR-PSNR over directories paired by filename")
    p.add_argument("--sr-dir", required=True)
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--lr-dir")
    p.add_argument("--scale", type=int)
    p.add_argument("--out", required=True, help="report JSON path; a .tsv is written next to it")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("summary", help="parameter counts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_summary)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivisibilityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVISIBILITY
    except (ConfigError, UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericAbort, NonFiniteGradientError, FloatingPointError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        for entry in getattr(e, "manifest_entries", []):
            print(f"  offending pair: {entry}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
