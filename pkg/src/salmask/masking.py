"""Patch-mask sampling and the masking strategies applied to images.

A plan selects flattened row-major grid cells. Positive plans split the
budget between foreground and background in proportion to the grid's
foreground fraction; hard-negative plans hit foreground only. Strategies
fill masked patches with the image mean, a strong Gaussian blur, or (for
the high-pass strategy) zero plus Gaussian noise on a high-pass-filtered
image. Channel-wise and focal variants exist for high-pass only.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ModeError
from .filters import (
    filter2d,
    gaussian_kernel_2d,
    highpass,
    scaled_blur_params,
    scaled_hp_params,
)
from .rng import Rng
from .saliency import SaliencyGrid
from .tensor import as_f32

STRATEGIES = ("highpass", "blur", "meanfill")
PLAN_KINDS = ("positive", "hard_negative", "random", "salient_only")

ALPHA_RANGE = (0.05, 0.25)
BETA_RANGE = (0.4, 0.7)
FOCAL_OUTER_FRAC = 200 / 224
FOCAL_INNER_FRAC = 130 / 224
NOISE_STD = 0.05


def round_half_up(x) -> int:
    """floor(x + 1/2) in exact rational arithmetic, so ties go up."""
    return math.floor(Fraction(x) + Fraction(1, 2))


@dataclass(frozen=True)
class MaskPlan:
    """Which grid cells one application masks.

    patch_indices are distinct, sorted, flattened row-major cell ids;
    alpha_or_beta is the sampled ratio that set the budget. fallback marks
    plans sampled uniformly because the grid was degenerate.
    """

    patch_indices: np.ndarray
    alpha_or_beta: float
    kind: str
    grid: SaliencyGrid
    fallback: bool = False

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        idx = np.asarray(self.patch_indices, dtype=np.int64)
        n = self.grid.cell_count
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"plan indices outside [0, {n})")
        if idx.size != np.unique(idx).size:
            raise ValueError("plan indices must be distinct")
        object.__setattr__(self, "patch_indices", np.sort(idx))

    @property
    def count(self) -> int:
        return int(self.patch_indices.size)


@dataclass(frozen=True)
class StrategyConfig:
    """Masking strategy plus every knob its application needs."""

    strategy: str
    blur_size: int
    blur_var: float
    hp_size: int
    hp_var: float
    noise_std: float = NOISE_STD
    focal_outer: float = FOCAL_OUTER_FRAC
    focal_inner: float = FOCAL_INNER_FRAC
    channelwise: bool = False
    focal: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        for name in ("blur_size", "hp_size"):
            size = getattr(self, name)
            if size < 1 or size % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {size}")
        for name in ("blur_var", "hp_var"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 < self.focal_inner < self.focal_outer <= 1:
            raise ConfigError(
                f"focal fractions want 0 < inner < outer <= 1, got "
                f"inner={self.focal_inner} outer={self.focal_outer}")
        if (self.channelwise or self.focal) and self.strategy != "highpass":
            raise ConfigError("channel-wise and focal variants exist for the "
                              "high-pass strategy only")

    @classmethod
    def for_side(cls, strategy: str, side: int, **kw) -> "StrategyConfig":
        """Kernel sizes/variances rescaled from the 224-px reference.

        Keyword arguments override the auto-scaled values, which matters
        for tiny sides where the high-pass kernel degenerates to 1x1.
        """
        blur_size, blur_var = scaled_blur_params(side)
        hp_size, hp_var = scaled_hp_params(side)
        params = dict(blur_size=blur_size, blur_var=blur_var,
                      hp_size=hp_size, hp_var=hp_var)
        params.update(kw)
        return cls(strategy=strategy, **params)


# -- plan sampling ------------------------------------------------------


def _foreground_cells(grid: SaliencyGrid) -> np.ndarray:
    return np.flatnonzero(grid.mask.ravel() == 1).astype(np.int64)


def _background_cells(grid: SaliencyGrid) -> np.ndarray:
    return np.flatnonzero(grid.mask.ravel() == 0).astype(np.int64)


def _take(rng: Rng, pool: np.ndarray, want: int, what: str) -> np.ndarray:
    if want > pool.size:
        warnings.warn(f"{what}: budget {want} exceeds group size {pool.size}, "
                      f"clamped", RuntimeWarning)
        want = pool.size
    return pool[rng.sample_without_replacement(pool.size, want)]


def sample_positive_plan(grid: SaliencyGrid, rng: Rng,
                         alpha_range=ALPHA_RANGE) -> MaskPlan:
    """Budget alpha*N split over foreground/background by the grid's gamma."""
    alpha = rng.uniform(*alpha_range)
    n = grid.cell_count
    if grid.gamma in (0.0, 1.0):
        want = round_half_up(Fraction(alpha) * n)
        idx = _take(rng, np.arange(n, dtype=np.int64), want,
                    "positive plan (degenerate grid)")
        return MaskPlan(idx, alpha, "positive", grid, fallback=True)
    fg = _foreground_cells(grid)
    bg = _background_cells(grid)
    # gamma*N equals the foreground cell count exactly, so the budgets
    # alpha*gamma*N and alpha*(1-gamma)*N reduce to integer products
    want_fg = round_half_up(Fraction(alpha) * int(fg.size))
    want_bg = round_half_up(Fraction(alpha) * int(bg.size))
    chosen_fg = _take(rng, fg, want_fg, "positive plan foreground")
    chosen_bg = _take(rng, bg, want_bg, "positive plan background")
    return MaskPlan(np.concatenate([chosen_fg, chosen_bg]), alpha,
                    "positive", grid)


def sample_hard_negative_plan(grid: SaliencyGrid, rng: Rng,
                              beta_range=BETA_RANGE) -> MaskPlan | None:
    """Foreground-only plan with budget beta*gamma*N; None when gamma = 0."""
    if grid.gamma == 0.0:
        return None
    beta = rng.uniform(*beta_range)
    fg = _foreground_cells(grid)
    want = round_half_up(Fraction(beta) * int(fg.size))
    chosen = _take(rng, fg, want, "hard-negative plan")
    return MaskPlan(chosen, beta, "hard_negative", grid)


def sample_random_plan(grid: SaliencyGrid, rng: Rng,
                       alpha_range=ALPHA_RANGE) -> MaskPlan:
    """Uniform over all cells, ignoring saliency."""
    alpha = rng.uniform(*alpha_range)
    n = grid.cell_count
    want = round_half_up(Fraction(alpha) * n)
    chosen = _take(rng, np.arange(n, dtype=np.int64), want, "random plan")
    return MaskPlan(chosen, alpha, "random", grid)


def sample_salient_only_plan(grid: SaliencyGrid, rng: Rng,
                             alpha_range=ALPHA_RANGE) -> MaskPlan:
    """Budget alpha*N drawn from foreground cells only, clamped to their count."""
    if grid.gamma == 0.0:
        raise ValueError("salient-only plan needs a non-empty foreground")
    alpha = rng.uniform(*alpha_range)
    fg = _foreground_cells(grid)
    want = min(round_half_up(Fraction(alpha) * grid.cell_count), int(fg.size))
    chosen = fg[rng.sample_without_replacement(fg.size, want)]
    return MaskPlan(chosen, alpha, "salient_only", grid)


# -- strategy application ------------------------------------------------


def _pixel_mask(plan: MaskPlan, h: int, w: int) -> np.ndarray:
    """Boolean H x W map of the pixels the plan covers."""
    grid = plan.grid
    u, v = grid.mask.shape
    if u * grid.patch_h != h or v * grid.patch_w != w:
        raise ValueError(f"plan grid {u}x{v} with patches {grid.patch_h}x"
                         f"{grid.patch_w} does not tile a {h}x{w} image")
    cells = np.zeros(u * v, dtype=bool)
    cells[plan.patch_indices] = True
    cells = cells.reshape(u, v)
    return np.repeat(np.repeat(cells, grid.patch_h, axis=0), grid.patch_w, axis=1)


def apply_mean_fill(image: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Masked patches take the scalar mean over all pixels and channels."""
    image = as_f32(image)
    out = image.copy()
    pm = _pixel_mask(plan, image.shape[0], image.shape[1])
    out[pm] = np.float32(image.mean(dtype=np.float64))
    return out


def apply_strong_blur(image: np.ndarray, plan: MaskPlan,
                      cfg: StrategyConfig) -> np.ndarray:
    """Masked patches copied from the full-image Gaussian blur."""
    image = as_f32(image)
    out = image.copy()
    pm = _pixel_mask(plan, image.shape[0], image.shape[1])
    if pm.any():
        blurred = filter2d(image, gaussian_kernel_2d(cfg.blur_size, cfg.blur_var))
        out[pm] = blurred[pm]
    return out


def apply_highpass_strategy(image: np.ndarray, plan: MaskPlan,
                            cfg: StrategyConfig, rng: Rng) -> np.ndarray:
    """High-pass the image, zero masked patches, add noise there."""
    image = as_f32(image)
    out = highpass(image, cfg.hp_size, cfg.hp_var)
    pm = _pixel_mask(plan, image.shape[0], image.shape[1])
    out[pm] = rng.normal(cfg.noise_std, (int(pm.sum()), image.shape[2]))
    return out


def apply_channelwise(image: np.ndarray, plans, cfg: StrategyConfig,
                      rng: Rng) -> np.ndarray:
    """Independent plans per RGB channel; high-pass strategy only."""
    if cfg.strategy != "highpass":
        raise ModeError(f"channel-wise masking needs the high-pass strategy, "
                        f"not {cfg.strategy!r}")
    if len(plans) != 3:
        raise ValueError(f"channel-wise masking wants 3 plans, got {len(plans)}")
    image = as_f32(image)
    out = highpass(image, cfg.hp_size, cfg.hp_var)
    for ch, plan in enumerate(plans):
        pm = _pixel_mask(plan, image.shape[0], image.shape[1])
        out[pm, ch] = rng.normal(cfg.noise_std, (int(pm.sum()),))
    return out


def apply_focal(image: np.ndarray, kind: str, cfg: StrategyConfig,
                rng: Rng) -> np.ndarray:
    """Noise outside a centred square (positive) or inside one (hard negative).

    No saliency guidance; the caller high-passes the image first. With
    focal_outer = 1 the positive variant replaces nothing.
    """
    if cfg.strategy != "highpass":
        raise ModeError(f"focal masking needs the high-pass strategy, "
                        f"not {cfg.strategy!r}")
    image = as_f32(image)
    h, w = image.shape[0], image.shape[1]
    if h != w:
        raise ValueError(f"focal masking wants a square image, got {h}x{w}")
    if kind == "positive":
        square = round_half_up(Fraction(cfg.focal_outer) * h)
        inside = False
    elif kind == "hard_negative":
        square = round_half_up(Fraction(cfg.focal_inner) * h)
        inside = True
    else:
        raise ValueError(f"focal kind must be positive|hard_negative, got {kind!r}")
    start = (h - square) // 2
    region = np.zeros((h, w), dtype=bool)
    region[start:start + square, start:start + square] = True
    if not inside:
        region = ~region
    out = image.copy()
    out[region] = rng.normal(cfg.noise_std, (int(region.sum()), image.shape[2]))
    return out
