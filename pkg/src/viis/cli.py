"""``viis`` command line.

Machine-readable output (CSV, images, checkpoints) goes to files or stdout;
progress and summaries go to stderr.  Exit status is 0 on success, 1 for bad
input or configuration and 2 for numeric failures, including failed checks.
"""

from __future__ import annotations

import argparse
import contextlib
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checks import (format_stats, forward_stats, run_gradcheck, sampler_oracle,
                     sampler_vs_recursion)
from .data import DecodeError, DatasetManifest, read_image, synth_dataset, write_dataset, write_image
from .denoiser import CONDITIONING_MODES
from .diffusion import REFERENCE_T
from .ispt import FIDELITY_PARAMS, PRESETS as ISPT_PRESETS, ParameterError, ParamRanges, augment, sample_params
from .metrics import MetricError, MetricReport
from .nn.gradcheck import format_table
from .nn.tensor import ConfigError, DimensionError, NumericError


def info(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth_data(a) -> int:
    pairs = synth_dataset(a.count, a.size, a.seed)
    write_dataset(pairs, a.out)
    info(f"wrote {len(pairs)} {a.size}x{a.size} scene pairs to {a.out}")
    return 0


def _ranges_from_args(a) -> ParamRanges:
    r = ParamRanges.preset(a.preset)
    over = {}
    for name in ("gamma", "contrast", "gauss_sigma", "poisson_lambda", "impulse_density"):
        lo, hi = getattr(a, f"{name}_min"), getattr(a, f"{name}_max")
        if lo is not None or hi is not None:
            cur = getattr(r, name)
            over[name] = (cur[0] if lo is None else lo, cur[1] if hi is None else hi)
    if a.noise_mode is not None:
        over["noise_mode"] = a.noise_mode
    try:
        return replace(r, **over)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def cmd_augment(a) -> int:
    manifest = DatasetManifest.scan(a.inp)
    ranges = _ranges_from_args(a)
    out = Path(a.out)
    (out / "vis").mkdir(parents=True, exist_ok=True)
    (out / "ir").mkdir(parents=True, exist_ok=True)
    for i, (v, ir) in enumerate(manifest.pairs):
        rng = np.random.default_rng([a.seed, i])
        params = FIDELITY_PARAMS if a.fidelity else sample_params(ranges, rng)
        write_image(augment(read_image(v), params, rng), out / "vis" / v.name)
        shutil.copyfile(ir, out / "ir" / ir.name)
    info(f"augmented {len(manifest.pairs)} images into {out}"
         + (" with the fixed evaluation degradation" if a.fidelity else f" (ranges: {ranges})"))
    return 0


def _train_config(a) -> cfgmod.TrainConfig:
    cfg = cfgmod.TrainConfig.preset(a.preset)
    if a.config:
        cfg = cfgmod.load(a.config, cfg)
    overrides: dict[str, dict[str, str]] = {}
    for item in a.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section, {})[name] = value
    for flag, section, name in (("steps", "train", "steps"), ("seed", "train", "seed"),
                                ("lr", "train", "learning_rate"), ("mode", "model", "conditioning_mode")):
        if getattr(a, flag, None) is not None:
            overrides.setdefault(section, {})[name] = str(getattr(a, flag))
    return cfgmod.apply_overrides(cfg, overrides, origin="command line")


def cmd_train(a) -> int:
    from .training import load_checkpoint, train
    if a.resume:
        state = load_checkpoint(a.resume)
        cfg = state.config
        if a.steps is not None:
            cfg = cfgmod.apply_overrides(cfg, {"train": {"steps": str(a.steps)}}, "command line")
            state.config = cfg
    else:
        state, cfg = None, _train_config(a)
    info("resolved config:\n" + cfgmod.dumps(cfg))
    every = max(1, cfg.steps // 20)

    def progress(step, loss):
        if step % every == 0 or step == cfg.steps:
            info(f"step {step:6d}  loss {loss:.5f}")
    state, log = train(cfg, a.data, out=a.out, log_path=a.log, state=state, progress=progress)
    if len(log.rows):
        info(f"done: {state.step} steps, last loss {log.rows[-1][1]:.5f}, checkpoint {a.out}")
    return 0


def cmd_restore(a) -> int:
    from .training import load_checkpoint, restore
    ckpt = load_checkpoint(a.ckpt)
    vis, ir = read_image(a.vis), read_image(a.ir)
    if vis.shape[-1] != 3 or ir.shape[-1] != 1:
        raise DimensionError("--vis must be a P6 colour image and --ir a P5 gray image")
    out = restore(ckpt, vis, ir, steps=a.steps, seed=a.seed)
    write_image(out, a.out)
    info(f"restored {a.vis} -> {a.out}")
    return 0


def _image_files(d: Path) -> dict[str, Path]:
    if (d / "vis").is_dir():
        d = d / "vis"
    files = {p.name: p for p in sorted(d.iterdir()) if p.suffix in (".ppm", ".pgm")}
    if not files:
        raise FileNotFoundError(f"no .ppm/.pgm images in {d}")
    return files


def cmd_eval(a) -> int:
    pred, ref = _image_files(Path(a.pred)), _image_files(Path(a.ref))
    missing = sorted(set(pred) - set(ref))
    if missing:
        raise FileNotFoundError(f"no reference for {missing[:5]} in {a.ref}")
    report = MetricReport()
    for name, p in pred.items():
        report.add(Path(name).stem, read_image(p), read_image(ref[name]))
    report.write_csv(a.out)
    m = report.means()
    info(f"{len(pred)} images: " + ", ".join(f"{k} {v:.4f}" for k, v in m.items()))
    return 0


def cmd_gradcheck(a) -> int:
    results = run_gradcheck(tol=a.tol, seeds=range(a.seeds))
    print(format_table(results))
    bad = [r.name for r in results if not r.passed]
    info("gradcheck: all passed" if not bad else f"gradcheck FAILED: {', '.join(bad)}")
    return 2 if bad else 0


def cmd_diffcheck(a) -> int:
    results = forward_stats(a.T, seed=a.seed) + sampler_oracle(T=a.T, seed=a.seed)
    print(format_stats(results))
    print(format_stats(sampler_vs_recursion(T=a.T, seed=a.seed)).split("\n", 1)[1])
    bad = [r.name for r in results if not r.passed]
    info("diffcheck: all passed" if not bad else f"diffcheck FAILED: {', '.join(bad)}")
    return 2 if bad else 0


def cmd_ablate(a) -> int:
    from .training import run_ablation, write_ablation_csv
    cfg = _train_config(a)
    info("resolved config:\n" + cfgmod.dumps(cfg))
    modes = a.modes.split(",") if a.modes else CONDITIONING_MODES
    rows = run_ablation(cfg, modes, steps=cfg.steps, eval_scenes=a.eval_scenes,
                        sample_steps=a.sample_steps, data=a.data,
                        progress=lambda r: info(f"{r['configuration']:<18} psnr {r['psnr']:.3f} "
                                                f"ssim {r['ssim']:.4f} loss {r['final_loss']:.4f}"))
    write_ablation_csv(rows, a.out)
    return 0


# --------------------------------------------------------------------------
# parser

def _add_train_flags(p) -> None:
    p.add_argument("--config", help="INI file with [train]/[model]/[ranges] sections")
    p.add_argument("--preset", default="default", choices=sorted(cfgmod.PRESETS),
                   help="base configuration the file and flags are applied on top of")
    p.add_argument("--data", default="synth", help="dataset directory (vis/, ir/) or 'synth'")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--lr", type=float, default=None, help="override train.learning_rate")
    p.add_argument("--mode", choices=CONDITIONING_MODES, default=None,
                   help="override model.conditioning_mode")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="viis", formatter_class=fmt,
                                 description="Infrared-guided diffusion restoration of degraded visible images.")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", formatter_class=fmt, help="write synthetic visible/infrared pairs")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=256, help="number of scene pairs")
    p.add_argument("--size", type=int, default=32, help="image side length")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("augment", formatter_class=fmt, help="degrade visible images with random ISPT draws")
    p.add_argument("--in", dest="inp", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.add_argument("--preset", default="default", choices=ISPT_PRESETS, help="parameter range preset")
    p.add_argument("--fidelity", action="store_true",
                   help="apply the fixed evaluation degradation (gamma 6, contrast 0.5, sigma 5, lambda 10)")
    p.add_argument("--noise-mode", default=None, choices=("gauss_poisson", "impulse", "none"),
                   help="override the preset's noise mode")
    for name in ("gamma", "contrast", "gauss_sigma", "poisson_lambda", "impulse_density"):
        flag = name.replace("_", "-")
        p.add_argument(f"--{flag}-min", type=float, default=None, help=f"lower bound for {name}")
        p.add_argument(f"--{flag}-max", type=float, default=None, help=f"upper bound for {name}")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train", formatter_class=fmt, help="train a denoiser")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss log CSV path")
    p.add_argument("--resume", default=None, help="continue from this checkpoint (its config wins)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("restore", formatter_class=fmt, help="restore one degraded visible image")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--vis", required=True, help="degraded visible image (P6)")
    p.add_argument("--ir", required=True, help="infrared image (P5)")
    p.add_argument("--out", required=True, help="output image (P6)")
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default: the trained T)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("eval", formatter_class=fmt, help="score predicted images against references")
    p.add_argument("--pred", required=True, help="directory of predicted images")
    p.add_argument("--ref", required=True, help="directory of reference images")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=fmt, help="finite-difference gradient suites")
    p.add_argument("--tol", type=float, default=None,
                   help="one tolerance for every case (default: per-case tolerances)")
    p.add_argument("--seeds", type=int, default=5, help="random instances per case")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("diffcheck", formatter_class=fmt,
                       help="forward-process statistics and the Gaussian sampler oracle")
    p.add_argument("--T", type=int, default=REFERENCE_T, help="diffusion length")
    p.add_argument("--seed", type=int, default=0, help="Monte-Carlo seed")
    p.set_defaults(fn=cmd_diffcheck)

    p = sub.add_parser("ablate", formatter_class=fmt, help="train every conditioning mode and tabulate")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="table CSV path")
    p.add_argument("--modes", default=None, help="comma list (default: all seven)")
    p.add_argument("--eval-scenes", type=int, default=8, help="held-out scenes per mode")
    p.add_argument("--sample-steps", type=int, default=None, help="respaced sampling steps")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; those are input errors here
        return 0 if exc.code == 0 else 1
    limiter = contextlib.nullcontext()
    if a.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=a.threads)
    try:
        with limiter:
            return a.fn(a)
    except NumericError as exc:
        info(f"numeric failure: {exc}")
        return 2
    except (ConfigError, ParameterError, DimensionError, DecodeError, MetricError,
            FileNotFoundError, IsADirectoryError, ValueError) as exc:
        info(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
