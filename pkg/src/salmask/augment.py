"""Standard augmentation and assembly of query/key/hard-negative views.

Stream layout per image: children 0 and 1 of the per-image rng drive the
query/key standard augmentations, children 2 and 3 the branch masking, and
child 4 the hard negative. Skipping a stage never shifts another stage's
stream, so bundles built under different policies share augmentation bits.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import resize_bilinear
from .errors import ConfigError
from .filters import highpass
from .masking import (
    ALPHA_RANGE,
    BETA_RANGE,
    StrategyConfig,
    apply_channelwise,
    apply_focal,
    apply_highpass_strategy,
    apply_mean_fill,
    apply_strong_blur,
    sample_hard_negative_plan,
    sample_positive_plan,
    sample_random_plan,
    sample_salient_only_plan,
)
from .rng import Rng
from .saliency import DEFAULT_COEFF, LocalizationNet, compute_saliency_batch
from .tensor import as_f32

BRANCHES = ("query", "key", "both", "none")
MASK_MODES = ("saliency", "random", "salient_only")
CHANNELWISE_P = 0.25
FOCAL_P = 0.25


@dataclass(frozen=True)
class BranchPolicy:
    """Which siamese branch receives masking."""

    mask_branch: str

    def __post_init__(self):
        if self.mask_branch not in BRANCHES:
            raise ConfigError(f"mask branch must be one of {BRANCHES}, "
                              f"got {self.mask_branch!r}")

    @property
    def masks_query(self) -> bool:
        return self.mask_branch in ("query", "both")

    @property
    def masks_key(self) -> bool:
        return self.mask_branch in ("key", "both")


@dataclass(frozen=True)
class ViewBundle:
    """The views fed to the two encoders for one source image.

    key_hard_neg is None whenever hard negatives are disabled or the key
    view's saliency grid has no foreground.
    """

    query: np.ndarray
    key_pos: np.ndarray
    key_hard_neg: np.ndarray | None
    source_id: str


def standard_augment(image: np.ndarray, rng: Rng, *,
                     scale_range=(0.2, 1.0), aspect_range=(0.75, 4 / 3),
                     flip_p=0.5, jitter_p=0.8, jitter_range=(0.6, 1.4),
                     gray_p=0.2) -> np.ndarray:
    """Random resized crop, horizontal flip, colour jitter, grayscale.

    Jitter applies brightness, contrast, saturation in that fixed order.
    Output is clamped to [0,1].
    """
    image = as_f32(image)
    side = image.shape[0]
    if image.shape[1] != side:
        raise ValueError(f"augmentation wants a square image, got {image.shape}")

    scale = rng.uniform(*scale_range)
    aspect = rng.uniform(*aspect_range)
    area = scale * side * side
    ch = int(np.clip(round(np.sqrt(area / aspect)), 1, side))
    cw = int(np.clip(round(np.sqrt(area * aspect)), 1, side))
    y0 = rng.integer(side - ch + 1)
    x0 = rng.integer(side - cw + 1)
    out = resize_bilinear(image[y0:y0 + ch, x0:x0 + cw], side, side)

    if rng.random() < flip_p:
        out = out[:, ::-1].copy()

    if rng.random() < jitter_p:
        brightness = np.float32(rng.uniform(*jitter_range))
        contrast = np.float32(rng.uniform(*jitter_range))
        saturation = np.float32(rng.uniform(*jitter_range))
        out = out * brightness
        luma = (0.299 * out[:, :, 0] + 0.587 * out[:, :, 1]
                + 0.114 * out[:, :, 2])
        out = (out - luma.mean()) * contrast + luma.mean()
        luma = (0.299 * out[:, :, 0] + 0.587 * out[:, :, 1]
                + 0.114 * out[:, :, 2])
        out = (out - luma[:, :, None]) * saturation + luma[:, :, None]

    if rng.random() < gray_p:
        luma = (0.299 * out[:, :, 0] + 0.587 * out[:, :, 1]
                + 0.114 * out[:, :, 2])
        out = np.repeat(luma[:, :, None], 3, axis=2)

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _positive_plan(mask_mode, grid, rng, alpha_range):
    if mask_mode == "saliency":
        return sample_positive_plan(grid, rng, alpha_range)
    if mask_mode == "random":
        return sample_random_plan(grid, rng, alpha_range)
    if mask_mode == "salient_only":
        if grid.gamma == 0.0:
            warnings.warn("salient-only masking with empty foreground; "
                          "falling back to uniform sampling", RuntimeWarning)
            return sample_random_plan(grid, rng, alpha_range)
        return sample_salient_only_plan(grid, rng, alpha_range)
    raise ConfigError(f"mask mode must be one of {MASK_MODES}, got {mask_mode!r}")


def _mask_view(view, grid, hard: bool, mask_mode, cfg: StrategyConfig, rng: Rng,
               alpha_range, beta_range, channelwise_p, focal_p):
    """Apply the strategy to one branch; hard selects the hard-negative form."""
    def one_plan(r):
        if hard:
            return sample_hard_negative_plan(grid, r, beta_range)
        return _positive_plan(mask_mode, grid, r, alpha_range)

    if cfg.strategy == "highpass":
        cw_p = channelwise_p if cfg.channelwise else 0.0
        fo_p = focal_p if cfg.focal else 0.0
        u = rng.random() if (cw_p or fo_p) else 1.0
        if u < cw_p:
            plans = tuple(one_plan(rng) for _ in range(3))
            return apply_channelwise(view, plans, cfg, rng)
        if u < cw_p + fo_p:
            hp = highpass(view, cfg.hp_size, cfg.hp_var)
            kind = "hard_negative" if hard else "positive"
            return apply_focal(hp, kind, cfg, rng)
        return apply_highpass_strategy(view, one_plan(rng), cfg, rng)
    if cfg.strategy == "blur":
        return apply_strong_blur(view, one_plan(rng), cfg)
    return apply_mean_fill(view, one_plan(rng))


def _assemble(aug_q, aug_k, grid_q, grid_k, policy, cfg, hardneg, rng,
              source_id, mask_mode, alpha_range, beta_range,
              channelwise_p, focal_p) -> ViewBundle:
    hp_domain = cfg.strategy == "highpass"

    if policy.masks_query:
        query = _mask_view(aug_q, grid_q, False, mask_mode, cfg, rng.fold_in(2),
                           alpha_range, beta_range, channelwise_p, focal_p)
    else:
        query = highpass(aug_q, cfg.hp_size, cfg.hp_var) if hp_domain else aug_q

    if policy.masks_key:
        key_pos = _mask_view(aug_k, grid_k, False, mask_mode, cfg,
                             rng.fold_in(3), alpha_range, beta_range,
                             channelwise_p, focal_p)
    else:
        key_pos = highpass(aug_k, cfg.hp_size, cfg.hp_var) if hp_domain else aug_k

    key_hard_neg = None
    if hardneg and grid_k is not None and grid_k.gamma > 0.0:
        key_hard_neg = _mask_view(aug_k, grid_k, True, mask_mode, cfg,
                                  rng.fold_in(4), alpha_range, beta_range,
                                  channelwise_p, focal_p)
    return ViewBundle(query=query, key_pos=key_pos, key_hard_neg=key_hard_neg,
                      source_id=source_id)


def _bundle_images(images, streams, loc, policy, cfg, hardneg, source_ids,
                   mask_mode, alpha_range, beta_range, coeff,
                   channelwise_p, focal_p) -> list[ViewBundle]:
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"mask mode must be one of {MASK_MODES}, got {mask_mode!r}")
    b = images.shape[0]
    aug_q = np.stack([standard_augment(images[i], streams[i].fold_in(0))
                      for i in range(b)])
    aug_k = np.stack([standard_augment(images[i], streams[i].fold_in(1))
                      for i in range(b)])
    grids_q = (compute_saliency_batch(loc, aug_q, coeff)
               if policy.masks_query else [None] * b)
    grids_k = (compute_saliency_batch(loc, aug_k, coeff)
               if policy.masks_key or hardneg else [None] * b)
    return [_assemble(aug_q[i], aug_k[i], grids_q[i], grids_k[i], policy, cfg,
                      hardneg, streams[i], source_ids[i], mask_mode,
                      alpha_range, beta_range, channelwise_p, focal_p)
            for i in range(b)]


def build_views_batch(images: np.ndarray, loc: LocalizationNet,
                      policy: BranchPolicy, cfg: StrategyConfig, hardneg: bool,
                      rng: Rng, *, source_ids=None, mask_mode="saliency",
                      alpha_range=ALPHA_RANGE, beta_range=BETA_RANGE,
                      coeff=DEFAULT_COEFF, channelwise_p=CHANNELWISE_P,
                      focal_p=FOCAL_P) -> list[ViewBundle]:
    """Build a bundle per image; image i uses child stream rng.fold_in(i).

    Saliency runs as one batched localization forward per view set, so
    activations may differ from the single-image form at float rounding.
    """
    images = as_f32(images)
    b = images.shape[0]
    if source_ids is None:
        source_ids = [""] * b
    return _bundle_images(images, [rng.fold_in(i) for i in range(b)], loc,
                          policy, cfg, hardneg, source_ids, mask_mode,
                          alpha_range, beta_range, coeff, channelwise_p, focal_p)


def build_views(image: np.ndarray, loc: LocalizationNet, policy: BranchPolicy,
                cfg: StrategyConfig, hardneg: bool, rng: Rng, *,
                source_id="", mask_mode="saliency", alpha_range=ALPHA_RANGE,
                beta_range=BETA_RANGE, coeff=DEFAULT_COEFF,
                channelwise_p=CHANNELWISE_P, focal_p=FOCAL_P) -> ViewBundle:
    """Single-image form; rng itself is the per-image stream."""
    return _bundle_images(as_f32(image)[None], [rng], loc, policy, cfg,
                          hardneg, [source_id], mask_mode, alpha_range,
                          beta_range, coeff, channelwise_p, focal_p)[0]
