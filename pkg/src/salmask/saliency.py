"""Foreground localization by activation thresholding.

A frozen feature extractor maps an image to a U x V x D tensor S. Channel
summation gives an activation map A; a grid cell is foreground when its
activation is at least the map mean minus 0.6 standard deviations. Each
cell corresponds to a patch_h x patch_w pixel patch of the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Rng
from .tensor import read_smt1, write_smt1

DEFAULT_COEFF = 0.6


@dataclass(frozen=True)
class ActivationMap:
    """Channel-summed activations A (U x V) with its mean and population std."""

    values: np.ndarray
    mean: float
    std: float


@dataclass(frozen=True)
class SaliencyGrid:
    """Binary foreground mask M over the patch grid.

    gamma is the exact foreground fraction sum(M)/N; patch_h and patch_w
    give the pixel footprint of one grid cell in the source image.
    """

    mask: np.ndarray
    patch_h: int
    patch_w: int
    gamma: float

    @property
    def cell_count(self) -> int:
        return int(self.mask.size)


@dataclass(frozen=True)
class LocalizationNet:
    """Frozen feature extractor: B x H x W x 3 images -> B x U x V x D.

    The handle must not route gradients anywhere; parameters stay fixed
    for the whole SSL run.
    """

    features: Callable[[np.ndarray], np.ndarray]
    frozen: bool = True


def aggregate_activations(S: np.ndarray) -> ActivationMap:
    S = np.asarray(S)
    if S.ndim != 3 or S.shape[2] < 1:
        raise ValueError(f"activation tensor wants U x V x D, got {S.shape}")
    values = S.astype(np.float64).sum(axis=2)
    mean = float(values.mean())
    std = float(values.std())
    return ActivationMap(values=values.astype(np.float32), mean=mean, std=std)


def scda_threshold(a: ActivationMap, coeff: float = DEFAULT_COEFF,
                   patch_h: int = 1, patch_w: int = 1) -> SaliencyGrid:
    """Cell is foreground iff A(u,v) >= mean - coeff * std."""
    if coeff < 0:
        raise ValueError(f"threshold coefficient must be >= 0, got {coeff}")
    threshold = a.mean - coeff * a.std
    mask = (a.values.astype(np.float64) >= threshold).astype(np.uint8)
    gamma = float(mask.sum()) / mask.size
    return SaliencyGrid(mask=mask, patch_h=patch_h, patch_w=patch_w, gamma=gamma)


def saliency_from_activations(S: np.ndarray, image_h: int, image_w: int,
                              coeff: float = DEFAULT_COEFF) -> SaliencyGrid:
    S = np.asarray(S)
    u, v = S.shape[0], S.shape[1]
    if image_h % u or image_w % v:
        raise ConfigError(f"image {image_h}x{image_w} not divisible by "
                          f"feature grid {u}x{v}")
    return scda_threshold(aggregate_activations(S), coeff,
                          patch_h=image_h // u, patch_w=image_w // v)


def compute_saliency(net: LocalizationNet, image: np.ndarray,
                     coeff: float = DEFAULT_COEFF) -> SaliencyGrid:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image wants H x W x 3, got {image.shape}")
    S = np.asarray(net.features(image[None]))[0]
    return saliency_from_activations(S, image.shape[0], image.shape[1], coeff)


def compute_saliency_batch(net: LocalizationNet, images: np.ndarray,
                           coeff: float = DEFAULT_COEFF) -> list[SaliencyGrid]:
    """One forward pass for the whole batch, then per-image thresholds."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"batch wants B x H x W x 3, got {images.shape}")
    feats = np.asarray(net.features(images))
    h, w = images.shape[1], images.shape[2]
    return [saliency_from_activations(feats[i], h, w, coeff)
            for i in range(feats.shape[0])]


def load_saliency(path, patch_h: int = 1, patch_w: int = 1) -> SaliencyGrid:
    """Read a precomputed U x V grid (SMT1); entries must be exactly 0 or 1."""
    mask = read_smt1(path)
    if mask.ndim != 2:
        raise FormatError(f"{path}: saliency grid wants rank 2, got {mask.shape}")
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise FormatError(f"{path}: grid entries must be 0 or 1, got {vals[:8]}")
    mask = mask.astype(np.uint8)
    gamma = float(mask.sum()) / mask.size
    return SaliencyGrid(mask=mask, patch_h=patch_h, patch_w=patch_w, gamma=gamma)


def save_saliency(grid: SaliencyGrid, path) -> None:
    write_smt1(path, grid.mask.astype(np.uint8))


def localization_from_classifier(clf, grid_side: int) -> LocalizationNet:
    """Wrap a trained classifier, tapping the block whose map is grid-sized."""
    return LocalizationNet(features=lambda b: clf.features_at(b, grid_side))


def train_localization_net(ds, *, grid_side: int = 8, epochs: int = 5,
                           lr: float = 0.05, batch: int = 128, seed: int = 0,
                           channels=(32, 64, 128, 256)):
    """Supervised desk classifier on the train split, then frozen.

    Returns (LocalizationNet, Classifier); the classifier is kept around
    so callers can checkpoint it.
    """
    from .data import gather_pixels, shuffled_batches
    from .model import Classifier, make_optimizer, sgd_step, \
        softmax_cross_entropy

    if any(r.label is None for r in ds.records):
        raise ConfigError("localization training needs a labeled dataset")
    rng = Rng(seed, 7)
    clf = Classifier(rng.fold_in(0), ds.class_count, channels=channels)
    side = ds.records[0].pixels.shape[0]
    probe = clf.features_at(np.zeros((1, side, side, 3), np.float32),
                            grid_side)  # fails fast on bad geometry
    del probe
    batch = min(batch, len(ds.records))
    steps = max(len(ds.records) // batch, 1)
    opt = make_optimizer(clf.parameters(), lr, weight_decay=1e-4,
                         total_epochs=max(epochs, 1), steps_per_epoch=steps)
    for epoch in range(epochs):
        for indices in shuffled_batches(ds, batch, rng.fold_in(1 + epoch)):
            pixels = gather_pixels(ds, indices)
            labels = np.array([ds.records[i].label for i in indices])
            logits = clf.forward(pixels, train=True)
            _, dlogits = softmax_cross_entropy(logits, labels)
            clf.backward(dlogits)
            sgd_step(opt, clf.parameters(), clf.gradients())
    return localization_from_classifier(clf, grid_side), clf
