"""Linear probing, view-variance measurement, and the ablation report.

The probe never updates the encoder: its parameter digest is recorded
before feature extraction and re-checked afterwards. Variance follows a
fixed protocol: encode K views per image in eval mode, take the
per-dimension sample variance (K - 1 in the denominator), then average
over dimensions and images.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import BranchPolicy, build_views
from .config import RunConfig
from .data import Dataset, gather_pixels, load_dataset
from .errors import FrozenEncoderError
from .filters import highpass
from .model import (
    Encoder,
    Linear,
    load_checkpoint,
    parameter_digest,
    softmax_cross_entropy,
)
from .rng import Rng
from .ssl import build_localization, resolve_split, strategy_config_for

PROBE_EPOCHS = 30
PROBE_LR = 3.0
VARIANCE_VIEWS = 8


@dataclass
class ProbeResult:
    top1: float
    per_class: np.ndarray
    epochs: int
    encoder_digest: str


@dataclass
class VarianceReport:
    variance: float
    views: int
    augmentation: str

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance cannot be negative")


def _as_encoder(encoder) -> Encoder:
    if hasattr(encoder, "forward"):  # encoder-shaped object, maybe a stub
        return encoder
    enc = Encoder(Rng(0))
    load_checkpoint(encoder, enc)
    return enc


def _probe_splits(dataset) -> tuple[Dataset, Dataset]:
    if isinstance(dataset, Dataset):
        return dataset, dataset
    if isinstance(dataset, tuple):
        return dataset
    train = load_dataset(resolve_split(dataset, "train"), split="train")
    val_dir = resolve_split(dataset, "val")
    if val_dir != Path(dataset):
        return train, load_dataset(val_dir, split="val")
    return train, train


def _pooled(enc: Encoder, ds: Dataset, transform, batch: int = 256):
    feats = []
    for start in range(0, len(ds), batch):
        imgs = gather_pixels(ds, list(range(start, min(start + batch,
                                                       len(ds)))))
        if transform is not None:
            imgs = np.stack([transform(im) for im in imgs])
        feats.append(enc.pooled_features(imgs, train=False))
    labels = np.array([r.label for r in ds.records])
    return np.concatenate(feats), labels


def _probe_lr_at(base: float, epoch: int, epochs: int) -> float:
    decays = sum(epoch >= m for m in (math.floor(0.6 * epochs),
                                      math.floor(0.8 * epochs)))
    return base * 0.1 ** decays


def linear_probe(encoder, dataset, *, epochs: int = PROBE_EPOCHS,
                 lr: float = PROBE_LR, batch: int = 128, seed: int = 0,
                 input_transform=None) -> ProbeResult:
    """Fit one affine layer on frozen pooled features; returns accuracy.

    ``encoder`` may be an Encoder or a checkpoint directory.
    ``dataset`` may be a corpus root (train/ and val/ are resolved), a
    single Dataset (used for both fitting and scoring), or an explicit
    (train, val) pair. ``input_transform`` maps each image before
    encoding, for encoders trained in a transformed input domain.
    """
    enc = _as_encoder(encoder)
    train_ds, val_ds = _probe_splits(dataset)
    if any(r.label is None for r in train_ds.records):
        raise ValueError("linear probe needs labels on every record")
    digest = parameter_digest(enc)
    x_train, y_train = _pooled(enc, train_ds, input_transform)
    x_val, y_val = _pooled(enc, val_ds, input_transform)
    if parameter_digest(enc) != digest:
        raise FrozenEncoderError("encoder moved during feature extraction")

    classes = train_ds.class_count
    rng = Rng(seed, 31)
    head = Linear(enc.feature_dim, classes, rng.fold_in(0))
    vel = {k: np.zeros_like(v) for k, v in head.params().items()}
    batch = min(batch, len(train_ds))
    for epoch in range(epochs):
        step_lr = _probe_lr_at(lr, epoch, epochs)
        order = rng.fold_in(1 + epoch).permutation(len(y_train))
        for start in range(0, len(order) - batch + 1, batch):
            idx = order[start:start + batch]
            logits = head.forward(x_train[idx], train=True)
            _, dlogits = softmax_cross_entropy(logits, y_train[idx])
            head.backward(dlogits)
            for k, g in head.grads().items():
                vel[k] = 0.9 * vel[k] + g
                head.params()[k] -= (step_lr * vel[k]).astype(np.float32)

    pred = head.forward(x_val, train=False).argmax(axis=1)
    hits = pred == y_val
    per_class = np.full(classes, np.nan)
    for c in range(classes):
        mask = y_val == c
        if mask.any():
            per_class[c] = float(hits[mask].mean())
    if parameter_digest(enc) != digest:
        raise FrozenEncoderError("encoder moved during probe training")
    return ProbeResult(top1=float(hits.mean()), per_class=per_class,
                       epochs=epochs, encoder_digest=digest)


def embedding_variance(encoder, dataset, *, views: int = VARIANCE_VIEWS,
                       aug=None, rng: Rng | None = None,
                       tag: str = "standard") -> VarianceReport:
    """Mean per-dimension variance of normalized embeddings across views.

    ``aug(image, rng) -> image`` produces one view; None means the raw
    image repeated (variance exactly zero).
    """
    if views < 2:
        raise ValueError(f"need at least 2 views, got {views}")
    enc = _as_encoder(encoder)
    if isinstance(dataset, Dataset):
        ds = dataset
    else:
        ds = load_dataset(resolve_split(dataset, "val"))
    rng = rng if rng is not None else Rng(0, 41)
    total = 0.0
    for i, rec in enumerate(ds.records):
        if aug is None:
            batch = np.repeat(rec.pixels[None], views, axis=0)
        else:
            batch = np.stack([aug(rec.pixels, rng.fold_in(i).fold_in(k))
                              for k in range(views)])
        z = enc.forward(batch, train=False).astype(np.float64)
        total += float(z.var(axis=0, ddof=1).mean())
    return VarianceReport(variance=total / len(ds.records), views=views,
                          augmentation=tag)


def bundle_view_fn(cfg: RunConfig, loc_net, side: int):
    """(aug callable, tag) producing the query view of the configured
    augmentation; branch `none` yields plain standard augmentation."""
    scfg = strategy_config_for(cfg, side)
    policy = BranchPolicy(cfg.branch)

    def aug(image, rng):
        return build_views(image, loc_net, policy, scfg, False, rng,
                           mask_mode=cfg.mask_mode,
                           alpha_range=(cfg.alpha_min, cfg.alpha_max),
                           beta_range=(cfg.beta_min, cfg.beta_max),
                           coeff=cfg.saliency_coeff,
                           channelwise_p=cfg.channelwise_p,
                           focal_p=cfg.focal_p).query

    tag = "standard" if cfg.branch == "none" \
        else f"standard+{cfg.strategy}"
    return aug, tag


def probe_transform_for(cfg: RunConfig, side: int):
    """Probe-input transform matching the encoder's training domain.

    The highpass strategy filters every emitted view (masked or not, any
    branch policy), so such encoders only ever see high-passed inputs.
    """
    if cfg.strategy != "highpass":
        return None
    scfg = strategy_config_for(cfg, side)
    return lambda img: highpass(img, scfg.hp_size, scfg.hp_var)


def write_variance_csv(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["augmentation", "K", "variance"])
        for rep in reports:
            writer.writerow([rep.augmentation, rep.views,
                             repr(float(rep.variance))])
    return path


ABLATION_ALPHA = 0.15


def _ablation_cfg(cfg: RunConfig, seed: int) -> RunConfig:
    # the sweep fixes the positive ratio unless a config overrides it
    kw = {"seed": seed}
    if (cfg.alpha_min, cfg.alpha_max) == (RunConfig.alpha_min,
                                          RunConfig.alpha_max):
        kw["alpha_min"] = kw["alpha_max"] = ABLATION_ALPHA
    return replace(cfg, **kw)


def _final_loss(metrics_path) -> float:
    with open(metrics_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        return math.nan
    return float(rows[-1][2])


def ablation_report(configs, seeds, out_dir, *, views: int = VARIANCE_VIEWS,
                    loc_nets: dict | None = None) -> Path:
    """Run pretrain + probe + variance per (config, seed); emit a CSV.

    ``configs`` is an ordered mapping or pair list of name -> RunConfig.
    Rows are grouped by config, groups sorted by mean top1 (descending);
    failed cells carry the marker `failed` and score as minus infinity.
    Returns the path of `report.csv` under ``out_dir``.
    """
    from .ssl import pretrain

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = list(configs.items()) if isinstance(configs, dict) \
        else list(configs)
    loc_cache = dict(loc_nets) if loc_nets else {}
    ds_cache = {}

    def splits_for(dataset):
        if dataset not in ds_cache:
            train = load_dataset(resolve_split(dataset, "train"),
                                 split="train")
            val_dir = resolve_split(dataset, "val")
            val = train if val_dir == Path(dataset) \
                else load_dataset(val_dir, split="val")
            ds_cache[dataset] = (train, val)
        return ds_cache[dataset]

    groups = []
    for name, base in pairs:
        rows = []
        for seed in seeds:
            cfg = _ablation_cfg(base, seed)
            cell = out / f"{name}-seed{seed}"
            try:
                train_ds, val_ds = splits_for(cfg.dataset)
                key = (cfg.dataset, cfg.grid, cfg.loc_net, seed)
                if key not in loc_cache:
                    loc_cache[key] = build_localization(cfg, train_ds, seed)
                loc = loc_cache[key]
                ckpt, metrics = pretrain(cfg, cell, loc_net=loc)
                enc = _as_encoder(ckpt)
                side = val_ds.records[0].pixels.shape[0]
                probe = linear_probe(
                    enc, (train_ds, val_ds), epochs=cfg.probe_epochs,
                    lr=cfg.probe_lr, seed=seed,
                    input_transform=probe_transform_for(cfg, side))
                aug, _ = bundle_view_fn(cfg, loc, side)
                var = embedding_variance(
                    enc, val_ds, views=views, aug=aug, rng=Rng(seed, 41))
                rows.append((seed, probe.top1, var.variance,
                             _final_loss(metrics)))
            except Exception:
                rows.append((seed, None, None, None))
        scores = [r[1] for r in rows if r[1] is not None]
        mean = sum(scores) / len(scores) if scores else -math.inf
        groups.append((mean, name, rows))

    groups.sort(key=lambda g: -g[0])  # stable: ties keep config order
    report = out / "report.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "seed", "top1", "variance", "loss_final"])
        for _, name, rows in groups:
            for seed, top1, var, loss in rows:
                if top1 is None:
                    writer.writerow([name, seed, "failed", "failed",
                                     "failed"])
                else:
                    writer.writerow([name, seed, repr(float(top1)),
                                     repr(float(var)),
                                     repr(float(loss))])
    return report
