"""Foreign-callable wrappers around saliency and masking.

Everything here is copy-at-boundary: inputs are copied before use,
outputs are freshly allocated, and no array ownership crosses the
boundary in either direction. Seeds derive exactly as in the
mask-preview command (plan stream fold 0, noise stream fold 1), so a
plan sampled here matches the native CLI's plan JSON for the same seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import (
    MaskPlan,
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
from .saliency import SaliencyGrid, saliency_from_activations

ABI_VERSION = "salmask-abi-1"

PLAN_MODES = ("positive", "hardneg", "random", "salient-only")


def salmask_abi_version() -> str:
    return ABI_VERSION


@dataclass(frozen=True)
class ForeignArrayView:
    """Pointer-free array at the boundary: shape plus raw f32 bytes."""

    shape: tuple
    data: bytes

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ForeignArrayView":
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        return cls(shape=tuple(int(s) for s in arr.shape),
                   data=arr.tobytes())

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype=np.float32)
        return arr.reshape(self.shape).copy()


def _ingest(buf, rank: int, what: str) -> np.ndarray:
    if isinstance(buf, ForeignArrayView):
        buf = buf.to_array()
    arr = np.array(buf, dtype=np.float32, copy=True)
    if arr.ndim != rank or min(arr.shape, default=0) < 1:
        raise ValueError(f"{what} wants a rank-{rank} buffer with positive "
                         f"extents, got shape {arr.shape}")
    return arr


def bind_compute_saliency(activations, coeff: float = 0.6):
    """U x V x D activations -> (binary u8 grid U x V, gamma)."""
    acts = _ingest(activations, 3, "activation buffer")
    grid = saliency_from_activations(acts, acts.shape[0], acts.shape[1],
                                     coeff=coeff)
    return grid.mask.astype(np.uint8, copy=True), float(grid.gamma)


def _grid_from_mask(mask) -> SaliencyGrid:
    arr = np.array(mask, copy=True)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"grid wants a rank-2 buffer, got shape"
                         f" {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("grid must be binary")
    arr = arr.astype(np.uint8)
    return SaliencyGrid(mask=arr, patch_h=1, patch_w=1,
                        gamma=float(arr.sum()) / arr.size)


def bind_sample_plans(grid, seed: int, mode: str,
                      alpha_min: float = 0.05, alpha_max: float = 0.25,
                      beta_min: float = 0.4, beta_max: float = 0.7):
    """Sample one plan on a binary grid -> (int64 indices, ratio)."""
    if mode not in PLAN_MODES:
        raise ValueError(f"mode must be one of {PLAN_MODES}, got {mode!r}")
    sgrid = _grid_from_mask(grid)
    rng = Rng(int(seed)).fold_in(0)
    if mode == "positive":
        plan = sample_positive_plan(sgrid, rng, (alpha_min, alpha_max))
    elif mode == "hardneg":
        plan = sample_hard_negative_plan(sgrid, rng, (beta_min, beta_max))
        if plan is None:
            raise ValueError("no foreground cells: hard-negative plan "
                             "undefined")
    elif mode == "random":
        plan = sample_random_plan(sgrid, rng, (alpha_min, alpha_max))
    else:
        plan = sample_salient_only_plan(sgrid, rng, (alpha_min, alpha_max))
    return plan.patch_indices.astype(np.int64, copy=True), \
        float(plan.alpha_or_beta)


def _strategy_config(strategy: str, side: int, params: dict) \
        -> StrategyConfig:
    allowed = {"blur_size", "blur_var", "hp_size", "hp_var", "noise_std"}
    unknown = set(params) - allowed - {"grid", "kind"}
    if unknown:
        raise ValueError(f"unknown strategy params {sorted(unknown)}")
    kw = {k: params[k] for k in allowed if k in params}
    for key in ("blur_size", "hp_size"):
        if key in kw:
            kw[key] = int(kw[key])
    return StrategyConfig.for_side(strategy, side, **kw)


def bind_apply_strategy(image, plan_indices, strategy: str,
                        params: dict | None = None,
                        seed: int = 0) -> np.ndarray:
    """Apply one plan to an H x W x 3 image; returns a fresh f32 buffer.

    ``params`` may carry `grid` (cells per side, default 8), `kind` (plan
    label, default positive), and the strategy knobs blur_size/blur_var/
    hp_size/hp_var/noise_std.
    """
    params = dict(params or {})
    img = _ingest(image, 3, "image buffer")
    if img.shape[2] != 3:
        raise ValueError(f"image wants H x W x 3, got {img.shape}")
    g = int(params.get("grid", 8))
    h, w = img.shape[:2]
    if g < 1 or h % g or w % g:
        raise ValueError(f"image {h}x{w} not divisible by grid {g}")
    cfg = _strategy_config(strategy, h, params)
    mask = np.zeros((g, g), np.uint8)
    indices = np.array(plan_indices, dtype=np.int64, copy=True)
    grid = SaliencyGrid(mask=mask, patch_h=h // g, patch_w=w // g,
                        gamma=0.0)
    plan = MaskPlan(patch_indices=indices, alpha_or_beta=0.0,
                    kind=str(params.get("kind", "positive")), grid=grid)
    if strategy == "meanfill":
        out = apply_mean_fill(img, plan)
    elif strategy == "blur":
        out = apply_strong_blur(img, plan, cfg)
    else:
        out = apply_highpass_strategy(img, plan, cfg,
                                      Rng(int(seed)).fold_in(1))
    return np.ascontiguousarray(out, dtype=np.float32)
