"""Command-line entry points.

Exit codes: 0 success, 1 validation problem (bad flags, config, or input
files), 2 runtime failure. `SALMASK_THREADS` caps BLAS threading for the
process and any workers it launches; it must be read before heavy math
starts.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import parse_config, write_resolved
from .data import load_dataset, read_ppm, write_ppm
from .errors import ConfigError, FormatError, LoadError, ModeError
from .eval import (
    ablation_report,
    bundle_view_fn,
    embedding_variance,
    linear_probe,
    probe_transform_for,
    write_variance_csv,
)
from .masking import (
    StrategyConfig,
    apply_highpass_strategy,
    apply_mean_fill,
    apply_strong_blur,
    sample_hard_negative_plan,
    sample_positive_plan,
    sample_random_plan,
    sample_salient_only_plan,
)
from .rng import Rng
from .saliency import (
    LocalizationNet,
    compute_saliency,
    saliency_from_activations,
)
from .ssl import build_localization, pretrain, resolve_split
from .tensor import read_smt1, write_smt1

# malformed flags, configs, or input files exit 1; data-dependent
# failures during execution (ValueError, NumericError, ...) exit 2
VALIDATION_ERRORS = (ConfigError, FormatError, LoadError, ModeError,
                     FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_cap() -> None:
    cap = os.environ.get("SALMASK_THREADS", "").strip()
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError(f"SALMASK_THREADS must be a positive integer, "
                          f"got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ[var] = cap


def _patch_mean_loc(grid_side: int) -> LocalizationNet:
    """Standalone fallback: patch means of the image act as activations."""

    def features(batch):
        b, h, w, c = batch.shape
        if h % grid_side or w % grid_side:
            raise ConfigError(f"image {h}x{w} not divisible by grid "
                              f"{grid_side}")
        ph, pw = h // grid_side, w // grid_side
        return batch.reshape(b, grid_side, ph, grid_side, pw, c) \
            .mean(axis=(2, 4))

    return LocalizationNet(features=features)


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _grid_ppm(mask: np.ndarray) -> np.ndarray:
    white = (mask.astype(np.uint8) * 255)
    return np.repeat(white[:, :, None], 3, axis=2)


def cmd_pretrain(args) -> int:
    cfg = parse_config(args.config)
    pretrain(cfg, args.out, checkpoint_every=args.checkpoint_every)
    return 0


def cmd_linear_probe(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    if not cfg.dataset:
        raise ConfigError("config key `dataset` is required for probing")
    val = load_dataset(resolve_split(cfg.dataset, "val"))
    side = val.records[0].pixels.shape[0]
    result = linear_probe(args.checkpoint, cfg.dataset,
                          epochs=cfg.probe_epochs, lr=cfg.probe_lr,
                          seed=cfg.seed,
                          input_transform=probe_transform_for(cfg, side))
    with open(out / "probe.csv", "w") as fh:
        fh.write("name,value\n")
        fh.write(f"top1,{result.top1!r}\n")
        for c, acc in enumerate(result.per_class):
            fh.write(f"class_{c},{float(acc)!r}\n")
    print(f"top1 {result.top1!r}")
    return 0


def cmd_saliency(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.activations:
        acts = read_smt1(args.activations)
        if acts.ndim != 3:
            raise FormatError(f"activations want U x V x D, got shape "
                              f"{acts.shape}")
        grid = saliency_from_activations(
            acts.astype(np.float32), acts.shape[0], acts.shape[1],
            coeff=args.coeff)
    else:
        image = read_ppm(args.image).astype(np.float32) / 255.0
        grid = compute_saliency(_patch_mean_loc(args.grid), image,
                                coeff=args.coeff)
    write_smt1(out / "grid.smt1", grid.mask.astype(np.uint8))
    write_ppm(out / "grid.ppm", _grid_ppm(grid.mask))
    print(f"gamma {grid.gamma!r}")
    return 0


_PREVIEW_MODES = ("positive", "hardneg", "random", "salient-only")


def cmd_mask_preview(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = read_ppm(args.image).astype(np.float32) / 255.0
    side = image.shape[0]
    if args.config:
        cfg = parse_config(args.config)
        write_resolved(cfg, out)
        grid_side, coeff = cfg.grid, cfg.saliency_coeff
        alpha = (cfg.alpha_min, cfg.alpha_max)
        beta = (cfg.beta_min, cfg.beta_max)
        kw = {"noise_std": cfg.noise_std}
        for key in ("blur_size", "blur_var", "hp_size", "hp_var"):
            if getattr(cfg, key) is not None:
                kw[key] = getattr(cfg, key)
        scfg = StrategyConfig.for_side(args.strategy, side, **kw)
    else:
        grid_side, coeff = 8, 0.6
        alpha, beta = (0.05, 0.25), (0.4, 0.7)
        scfg = StrategyConfig.for_side(args.strategy, side)
    grid = compute_saliency(_patch_mean_loc(grid_side), image, coeff=coeff)

    root = Rng(args.seed)
    plan_rng, noise_rng = root.fold_in(0), root.fold_in(1)
    if args.mode == "positive":
        plan = sample_positive_plan(grid, plan_rng, alpha)
    elif args.mode == "hardneg":
        plan = sample_hard_negative_plan(grid, plan_rng, beta)
        if plan is None:
            raise ValueError("no foreground cells: hard-negative plan "
                             "undefined for this image")
    elif args.mode == "random":
        plan = sample_random_plan(grid, plan_rng, alpha)
    else:
        plan = sample_salient_only_plan(grid, plan_rng, alpha)

    if args.strategy == "meanfill":
        masked = apply_mean_fill(image, plan)
    elif args.strategy == "blur":
        masked = apply_strong_blur(image, plan, scfg)
    else:
        masked = apply_highpass_strategy(image, plan, scfg, noise_rng)

    write_ppm(out / "masked.ppm", _to_u8(masked))
    cells = np.kron(grid.mask.astype(np.float32),
                    np.ones((grid.patch_h, grid.patch_w), np.float32))
    overlay = 0.5 * image + 0.5 * cells[:, :, None]
    write_ppm(out / "overlay.ppm", _to_u8(overlay))
    record = {"kind": plan.kind,
              "ratio": float(plan.alpha_or_beta),
              "indices": [int(i) for i in plan.patch_indices]}
    with open(out / "plan.jsonl", "w") as fh:
        fh.write(json.dumps(record) + "\n")
    return 0


def cmd_variance_report(args) -> int:
    if args.views < 2:
        raise ConfigError(f"--views must be at least 2, got {args.views}")
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    if not cfg.dataset:
        raise ConfigError("config key `dataset` is required")
    train = load_dataset(resolve_split(cfg.dataset, "train"),
                         split="train")
    val_dir = resolve_split(cfg.dataset, "val")
    val = train if val_dir == Path(cfg.dataset) else load_dataset(val_dir)
    side = val.records[0].pixels.shape[0]
    loc = build_localization(cfg, train, cfg.seed)

    reports = []
    seen = set()
    for variant in (replace(cfg, branch="none"), cfg):
        if variant.branch in seen:
            continue
        seen.add(variant.branch)
        aug, tag = bundle_view_fn(variant, loc, side)
        reports.append(embedding_variance(
            args.checkpoint, val, views=args.views, aug=aug,
            rng=Rng(cfg.seed, 41), tag=tag))
    path = write_variance_csv(reports, out / "variance.csv")
    for rep in reports:
        print(f"{rep.augmentation} {rep.variance!r}")
    return 0 if path.exists() else 2


def cmd_ablate(args) -> int:
    names = []
    pairs = []
    for chunk in args.configs.split(","):
        path = Path(chunk.strip())
        cfg = parse_config(path)
        name = path.stem
        if name in names:
            raise ConfigError(f"duplicate config name {name!r}")
        names.append(name)
        pairs.append((name, cfg))
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds wants integers, got {args.seeds!r}") \
            from None
    report = ablation_report(pairs, seeds, args.out)
    print(report)
    return 0


def _bindings():
    # imported lazily: the rest of the CLI works with bindings absent
    try:
        from . import bindings
    except ImportError:
        raise ConfigError("bindings are not installed in this build") \
            from None
    return bindings


def cmd_bind_abi(args) -> int:
    print(_bindings().salmask_abi_version())
    return 0


def cmd_bind_saliency(args) -> int:
    b = _bindings()
    acts = read_smt1(args.activations)
    if acts.ndim != 3:
        raise FormatError(f"activations want U x V x D, got {acts.shape}")
    grid, gamma = b.bind_compute_saliency(acts.astype(np.float32),
                                          coeff=args.coeff)
    write_smt1(args.out_grid, grid)
    print(json.dumps({"gamma": gamma, "abi": b.salmask_abi_version()}))
    return 0


def cmd_bind_plan(args) -> int:
    b = _bindings()
    grid = read_smt1(args.grid)
    indices, ratio = b.bind_sample_plans(
        grid, args.seed, args.mode, alpha_min=args.alpha_min,
        alpha_max=args.alpha_max, beta_min=args.beta_min,
        beta_max=args.beta_max)
    print(json.dumps({"ratio": ratio,
                      "indices": [int(i) for i in indices],
                      "abi": b.salmask_abi_version()}))
    return 0


def cmd_bind_apply(args) -> int:
    b = _bindings()
    image = read_smt1(args.image)
    indices = [int(s) for s in args.indices.split(",")] \
        if args.indices else []
    params = {}
    for chunk in args.param or []:
        key, _, raw = chunk.partition("=")
        if not _:
            raise ConfigError(f"--param wants key=value, got {chunk!r}")
        params[key] = raw if key == "kind" else float(raw)
    if args.grid_side is not None:
        params["grid"] = args.grid_side
    out = b.bind_apply_strategy(image, indices, args.strategy,
                                params=params, seed=args.seed)
    write_smt1(args.out, out)
    print(json.dumps({"abi": b.salmask_abi_version()}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="salmask")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(run=cmd_pretrain)

    p = sub.add_parser("linear-probe", help="fit a linear probe on a "
                                            "frozen checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_linear_probe)

    p = sub.add_parser("saliency", help="emit a saliency grid as SMT1 "
                                        "and PPM")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--activations", help="U x V x D SMT1 tensor")
    src.add_argument("--image", help="PPM image, patch-mean activations")
    p.add_argument("--coeff", type=float, default=0.6)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_saliency)

    p = sub.add_parser("mask-preview", help="apply one masking plan to "
                                            "one image")
    p.add_argument("--image", required=True)
    p.add_argument("--strategy", required=True,
                   choices=("highpass", "blur", "meanfill"))
    p.add_argument("--mode", default="positive", choices=_PREVIEW_MODES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(run=cmd_mask_preview)

    p = sub.add_parser("variance-report", help="view-variance of an "
                                               "encoder under the "
                                               "configured augmentation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.set_defaults(run=cmd_variance_report)

    p = sub.add_parser("ablate", help="pretrain + probe a grid of "
                                      "configs and seeds")
    p.add_argument("--configs", required=True,
                   help="comma-separated config paths")
    p.add_argument("--seeds", required=True,
                   help="comma-separated integer seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_ablate)

    p = sub.add_parser("bind-abi", help="print the bindings ABI string")
    p.set_defaults(run=cmd_bind_abi)

    p = sub.add_parser("bind-saliency",
                       help="bindings bridge: activations SMT1 -> grid")
    p.add_argument("--activations", required=True)
    p.add_argument("--coeff", type=float, default=0.6)
    p.add_argument("--out-grid", required=True)
    p.set_defaults(run=cmd_bind_saliency)

    p = sub.add_parser("bind-plan",
                       help="bindings bridge: grid SMT1 -> plan JSON")
    p.add_argument("--grid", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", required=True,
                   choices=("positive", "hardneg", "random",
                            "salient-only"))
    p.add_argument("--alpha-min", type=float, default=0.05)
    p.add_argument("--alpha-max", type=float, default=0.25)
    p.add_argument("--beta-min", type=float, default=0.4)
    p.add_argument("--beta-max", type=float, default=0.7)
    p.set_defaults(run=cmd_bind_plan)

    p = sub.add_parser("bind-apply",
                       help="bindings bridge: image SMT1 + plan -> "
                            "masked image SMT1")
    p.add_argument("--image", required=True)
    p.add_argument("--indices", default="",
                   help="comma-separated flat cell indices")
    p.add_argument("--strategy", required=True,
                   choices=("highpass", "blur", "meanfill"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-side", type=int, default=None)
    p.add_argument("--param", action="append", default=None,
                   help="strategy knob as key=value, repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_bind_apply)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.run(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except VALIDATION_ERRORS as exc:
        print(f"salmask: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"salmask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
