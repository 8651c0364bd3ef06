"""Flat `key = value` run configuration.

One key per line, `#` starts a comment, blank lines allowed. Unknown keys
are rejected with their line number. ``render_config`` emits a file that
parses back to an equal RunConfig, which is what `resolved.cfg` relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

FRAMEWORKS = ("moco", "simclr")
STRATEGIES = ("highpass", "blur", "meanfill")
MASK_MODES = ("saliency", "random", "salient_only")
BRANCHES = ("query", "key", "both", "none")

# framework-dependent default, resolved after the whole file is read
_AUTO_LR = {"moco": 0.015, "simclr": 0.06}


@dataclass
class RunConfig:
    framework: str = "moco"
    strategy: str = "highpass"
    mask_mode: str = "saliency"
    branch: str = "query"
    hardneg: bool = True
    alpha_min: float = 0.05
    alpha_max: float = 0.25
    beta_min: float = 0.4
    beta_max: float = 0.7
    rho: float = 1.0
    tau: float = 0.2
    literal_eq2: bool = False
    saliency_coeff: float = 0.6
    grid: int = 8
    channelwise_p: float = 0.25
    focal_p: float = 0.25
    noise_std: float = 0.05
    blur_size: int | None = None  # None = scale with image side
    blur_var: float | None = None
    hp_size: int | None = None
    hp_var: float | None = None
    focal_outer: float = 200 / 224
    focal_inner: float = 130 / 224
    queue: int = 4096
    moco_m: float = 0.99
    batch: int = 128
    lr: float | None = None  # None = framework default
    epochs: int = 20
    warmup: int = 2
    wd: float = 1e-4
    seed: int = 0
    dataset: str = ""
    loc_net: str = "train-supervised"
    probe_epochs: int = 30
    probe_lr: float = 3.0


def _parse_bool(raw: str) -> bool:
    if raw in ("true", "false"):
        return raw == "true"
    raise ValueError(f"want true|false, got {raw!r}")


def _parse_onoff(raw: str) -> bool:
    if raw in ("on", "off"):
        return raw == "on"
    raise ValueError(f"want on|off, got {raw!r}")


def _enum(options):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"want one of {'|'.join(options)}, got {raw!r}")
        return raw
    return parse


def _auto(inner):
    def parse(raw: str):
        return None if raw == "auto" else inner(raw)
    return parse


_PARSERS = {
    "framework": _enum(FRAMEWORKS),
    "strategy": _enum(STRATEGIES),
    "mask_mode": _enum(MASK_MODES),
    "branch": _enum(BRANCHES),
    "hardneg": _parse_onoff,
    "alpha_min": float, "alpha_max": float,
    "beta_min": float, "beta_max": float,
    "rho": float, "tau": float,
    "literal_eq2": _parse_bool,
    "saliency_coeff": float,
    "grid": int,
    "channelwise_p": float, "focal_p": float,
    "noise_std": float,
    "blur_size": _auto(int), "blur_var": _auto(float),
    "hp_size": _auto(int), "hp_var": _auto(float),
    "focal_outer": float, "focal_inner": float,
    "queue": int,
    "moco_m": float,
    "batch": int,
    "lr": _auto(float),
    "epochs": int, "warmup": int,
    "wd": float,
    "seed": int,
    "dataset": str,
    "loc_net": str,
    "probe_epochs": int, "probe_lr": float,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def _validate(cfg: RunConfig, lines: dict) -> None:
    def fail(msg, *keys):
        where = ", ".join(f"{k} (line {lines[k]})" for k in keys if k in lines)
        raise ConfigError(msg + (f" [{where}]" if where else ""))

    if not 0.0 <= cfg.alpha_min <= cfg.alpha_max <= 1.0:
        fail(f"need 0 <= alpha_min <= alpha_max <= 1, got "
             f"{cfg.alpha_min}/{cfg.alpha_max}", "alpha_min", "alpha_max")
    if not 0.0 <= cfg.beta_min <= cfg.beta_max <= 1.0:
        fail(f"need 0 <= beta_min <= beta_max <= 1, got "
             f"{cfg.beta_min}/{cfg.beta_max}", "beta_min", "beta_max")
    if cfg.tau <= 0:
        fail(f"tau must be positive, got {cfg.tau}", "tau")
    if cfg.rho < 0:
        fail(f"rho must be >= 0, got {cfg.rho}", "rho")
    if cfg.saliency_coeff < 0:
        fail(f"saliency_coeff must be >= 0, got {cfg.saliency_coeff}",
             "saliency_coeff")
    if cfg.grid < 1:
        fail(f"grid must be >= 1, got {cfg.grid}", "grid")
    for key in ("channelwise_p", "focal_p", "moco_m"):
        val = getattr(cfg, key)
        if not 0.0 <= val <= 1.0:
            fail(f"{key} must lie in [0, 1], got {val}", key)
    if cfg.channelwise_p + cfg.focal_p > 1.0:
        fail("channelwise_p + focal_p must not exceed 1",
             "channelwise_p", "focal_p")
    if cfg.noise_std < 0:
        fail(f"noise_std must be >= 0, got {cfg.noise_std}", "noise_std")
    for key in ("blur_size", "hp_size"):
        val = getattr(cfg, key)
        if val is not None and (val < 1 or val % 2 == 0):
            fail(f"{key} must be odd and positive, got {val}", key)
    for key in ("blur_var", "hp_var"):
        val = getattr(cfg, key)
        if val is not None and val <= 0:
            fail(f"{key} must be positive, got {val}", key)
    if not 0.0 < cfg.focal_inner < cfg.focal_outer <= 1.0:
        fail(f"need 0 < focal_inner < focal_outer <= 1, got "
             f"{cfg.focal_inner}/{cfg.focal_outer}",
             "focal_inner", "focal_outer")
    if cfg.queue < 1:
        fail(f"queue must be >= 1, got {cfg.queue}", "queue")
    if cfg.batch < 1:
        fail(f"batch must be >= 1, got {cfg.batch}", "batch")
    if cfg.lr is not None and cfg.lr <= 0:
        fail(f"lr must be positive, got {cfg.lr}", "lr")
    if cfg.epochs < 0:
        fail(f"epochs must be >= 0, got {cfg.epochs}", "epochs")
    if cfg.warmup < 0 or (cfg.epochs > 0 and cfg.warmup > cfg.epochs):
        fail(f"warmup must lie in [0, epochs], got {cfg.warmup}",
             "warmup", "epochs")
    if cfg.wd < 0:
        fail(f"wd must be >= 0, got {cfg.wd}", "wd")
    if cfg.probe_epochs < 0:
        fail(f"probe_epochs must be >= 0, got {cfg.probe_epochs}",
             "probe_epochs")
    if cfg.probe_lr <= 0:
        fail(f"probe_lr must be positive, got {cfg.probe_lr}", "probe_lr")


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, "
                              f"got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") \
                from exc
        setattr(cfg, key, parsed)
        lines[key] = lineno
    if cfg.lr is None:
        cfg.lr = _AUTO_LR[cfg.framework]
    _validate(cfg, lines)
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _render_value(key: str, val) -> str:
    if val is None:
        return "auto"
    if key == "hardneg":
        return "on" if val else "off"
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def render_config(cfg: RunConfig) -> str:
    out = [f"{f.name} = {_render_value(f.name, getattr(cfg, f.name))}"
           for f in fields(RunConfig)]
    return "\n".join(out) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved.cfg"
    path.write_text(render_config(cfg), encoding="utf-8")
    return path
