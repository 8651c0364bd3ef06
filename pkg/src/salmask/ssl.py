"""Contrastive objective with hard negatives, plus the training engines.

The loss follows one discipline everywhere: similarities are divided by
tau exactly once, at logit construction, and the hard-negative logit is
additionally scaled by rho inside the exponent. ``literal_eq2`` controls
whether the positive term joins the denominator (the conventional form)
or not.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import BranchPolicy, build_views_batch
from .config import RunConfig, write_resolved
from .data import gather_pixels, load_dataset, shuffled_batches
from .errors import ConfigError
from .masking import StrategyConfig
from .model import (
    Classifier,
    Encoder,
    MomentumEncoder,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    sgd_step,
)
from .rng import Rng
from .saliency import localization_from_classifier, train_localization_net
from .tensor import as_f32

NORM_SLACK = 0.01  # admits finite-difference nudges of the embeddings


@dataclass
class LossBatch:
    """Inputs to the contrastive loss, already embedded and normalized.

    ``negatives`` rows may include exact zero vectors (zero logit); the
    query/key rows must be unit within NORM_SLACK.
    """

    z_q: np.ndarray
    z_kpos: np.ndarray
    z_khard: np.ndarray | None
    hard_avail: np.ndarray | None
    negatives: np.ndarray
    tau: float = 0.2
    rho: float = 1.0
    literal_eq2: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        b, dim = self.z_q.shape
        if self.z_kpos.shape != (b, dim):
            raise ValueError("z_q and z_kpos shapes differ")
        if self.negatives.ndim != 2 or self.negatives.shape[1] != dim:
            raise ValueError("negatives want K x dim")
        if self.z_khard is not None and self.z_khard.shape != (b, dim):
            raise ValueError("z_khard wants the z_q shape")
        if self.hard_avail is None:
            self.hard_avail = np.zeros(b, bool) if self.z_khard is None \
                else np.ones(b, bool)
        self.hard_avail = np.asarray(self.hard_avail, bool)
        if self.hard_avail.shape != (b,):
            raise ValueError("hard_avail wants one flag per row")
        if self.z_khard is None and self.hard_avail.any():
            raise ValueError("hard_avail set without z_khard rows")
        for name in ("z_q", "z_kpos", "z_khard"):
            arr = getattr(self, name)
            if arr is None:
                continue
            norms = np.linalg.norm(arr, axis=1)
            if name == "z_khard":
                norms = norms[self.hard_avail]
            if norms.size and np.abs(norms - 1.0).max() > NORM_SLACK:
                raise ValueError(f"{name} rows must be unit-norm")


def nce_from_logits(pos_logits, neg_logits, hard_logits=None,
                    hard_avail=None, rho: float = 1.0,
                    literal_eq2: bool = False):
    """Loss and logit gradients for rows of an InfoNCE-style objective.

    pos_logits: (B,); neg_logits: (B, K); hard_logits: (B,) entering the
    denominator as exp(rho * hard) where hard_avail is set. Returns
    (mean loss, dpos, dneg, dhard), gradients of the mean.
    """
    pos = np.asarray(pos_logits)
    neg = np.asarray(neg_logits)
    b, k = neg.shape
    if hard_avail is None:
        hard_avail = np.zeros(b, bool) if hard_logits is None \
            else np.ones(b, bool)
    avail = np.asarray(hard_avail, bool)
    if hard_logits is None:
        hard_logits = np.zeros(b, pos.dtype)
    hard = rho * np.asarray(hard_logits)
    if literal_eq2 and k == 0 and not avail.all():
        raise ValueError("empty denominator: no negatives and no hard "
                         "negative in literal mode")

    # rowwise logsumexp over the active denominator terms
    cols = [neg]
    if not literal_eq2:
        cols.append(pos[:, None])
    cols.append(np.where(avail, hard, -np.inf)[:, None])
    terms = np.concatenate(cols, axis=1)
    m = terms.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    expt = np.exp(terms - m[:, None])
    denom = expt.sum(axis=1)
    log_d = m + np.log(denom)
    loss = float((log_d - pos).mean())

    share = expt / denom[:, None]  # softmax over denominator terms
    dneg = share[:, :k] / b
    col = k
    dpos = np.full(b, -1.0 / b, pos.dtype)
    if not literal_eq2:
        dpos = dpos + share[:, col] / b
        col += 1
    dhard = np.where(avail, rho * share[:, col] / b, 0.0).astype(pos.dtype)
    return loss, dpos.astype(pos.dtype), dneg.astype(pos.dtype), dhard


def info_nce_hardneg(batch: LossBatch):
    """Mean Eq.-style loss and gradients w.r.t. every embedding array."""
    q, kpos, negs = batch.z_q, batch.z_kpos, batch.negatives
    tau = batch.tau
    pos_logits = (q * kpos).sum(axis=1) / tau
    neg_logits = (q @ negs.T) / tau
    if batch.z_khard is not None:
        hard_logits = (q * batch.z_khard).sum(axis=1) / tau
    else:
        hard_logits = None
    loss, dpos, dneg, dhard = nce_from_logits(
        pos_logits, neg_logits, hard_logits, batch.hard_avail,
        batch.rho, batch.literal_eq2)

    dq = dpos[:, None] * kpos + dneg @ negs
    dkpos = dpos[:, None] * q
    dnegs = dneg.T @ q
    grads = {"z_q": dq / tau, "z_kpos": dkpos / tau, "negatives": dnegs / tau}
    if batch.z_khard is not None:
        grads["z_q"] += (dhard[:, None] * batch.z_khard) / tau
        grads["z_khard"] = (dhard[:, None] * q) / tau
    info = {"pos_logit": float(pos_logits.mean()),
            "hardneg_logit": float(hard_logits[batch.hard_avail].mean())
            if hard_logits is not None and batch.hard_avail.any()
            else math.nan,
            "hardneg_avail_frac": float(batch.hard_avail.mean())}
    return loss, grads, info


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.buf = np.zeros((capacity, dim), np.float32)
        self.cursor = 0
        self.fill = 0

    @property
    def capacity(self) -> int:
        return self.buf.shape[0]


def queue_push(q: NegativeQueue, keys: np.ndarray) -> NegativeQueue:
    keys = np.asarray(keys, np.float32)
    b = keys.shape[0]
    if b > q.capacity:
        raise ValueError(f"push of {b} rows exceeds capacity {q.capacity}")
    k = q.capacity
    first = min(b, k - q.cursor)
    q.buf[q.cursor:q.cursor + first] = keys[:first]
    if first < b:  # wrap
        q.buf[:b - first] = keys[first:]
    q.cursor = (q.cursor + b) % k
    q.fill = min(q.fill + b, k)
    return q


def queue_view(q: NegativeQueue) -> np.ndarray:
    """Filled rows oldest-first; a copy, safe to hold across pushes."""
    if q.fill < q.capacity:
        return q.buf[:q.fill].copy()
    return np.concatenate([q.buf[q.cursor:], q.buf[:q.cursor]])


def _stack_hard_views(views):
    """(stacked hard images or None, availability flags)."""
    avail = np.array([v.key_hard_neg is not None for v in views])
    if not avail.any():
        return None, avail
    hard = np.stack([v.key_hard_neg for v in views if v.key_hard_neg
                     is not None])
    return hard, avail


def _scatter_rows(sub: np.ndarray, avail: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros((avail.size, dim), sub.dtype)
    out[avail] = sub
    return out


def train_step_moco(enc: Encoder, menc: MomentumEncoder, queue: NegativeQueue,
                    views, opt, cfg: RunConfig) -> dict:
    """One MoCo-style update on a batch of view bundles."""
    q_imgs = np.stack([v.query for v in views])
    k_imgs = np.stack([v.key_pos for v in views])
    z_q = enc.forward(q_imgs, train=True)
    z_kpos = menc.forward(k_imgs, train=True)
    hard_imgs, avail = _stack_hard_views(views)
    z_khard = None
    if hard_imgs is not None:
        z_khard = _scatter_rows(menc.forward(hard_imgs, train=True), avail,
                                z_q.shape[1])
    batch = LossBatch(z_q, z_kpos, z_khard, avail, queue_view(queue),
                      tau=cfg.tau, rho=cfg.rho, literal_eq2=cfg.literal_eq2)
    loss, grads, info = info_nce_hardneg(batch)
    enc.backward(grads["z_q"])  # key branch and queue carry no gradient
    lr = sgd_step(opt, enc.parameters(), enc.gradients())
    menc.update(enc)
    queue_push(queue, z_kpos)
    return {"loss": loss, "lr": lr, **info}


def simclr_loss(zpair: np.ndarray, zh, avail, *, tau: float, rho: float,
                literal_eq2: bool):
    """NT-Xent with per-anchor hard negatives, in float64.

    zpair stacks both view sets, row i paired with row i+B (mod 2B); the
    hard term joins only rows 0..B-1 (the query direction). Returns
    (loss, dzpair, dzh, info).
    """
    n = zpair.shape[0]
    b = n // 2
    zp = zpair.astype(np.float64)
    c = 0.0 if literal_eq2 else 1.0
    sims = (zp @ zp.T) / tau
    idx = np.arange(n)
    pos_idx = (idx + b) % n
    pos = sims[idx, pos_idx]
    neg_mask = ~np.eye(n, dtype=bool)
    neg_mask[idx, pos_idx] = False

    hard_logits = np.zeros(n)
    hard_on = np.zeros(n, bool)
    if zh is not None:
        zh64 = zh.astype(np.float64)
        hard_logits[:b] = (zp[:b] * zh64).sum(axis=1) / tau
        hard_on[:b] = avail

    # columns: 2B in-batch candidates, then hard, then (conventional) pos
    neg_terms = np.where(neg_mask, sims, -np.inf)
    cols = [neg_terms, np.where(hard_on, rho * hard_logits, -np.inf)[:, None]]
    if c:
        cols.append(pos[:, None])
    terms = np.concatenate(cols, axis=1)
    m = terms.max(axis=1)
    expt = np.exp(terms - m[:, None])
    denom = expt.sum(axis=1)
    loss = float((m + np.log(denom) - pos).mean())

    share = expt / denom[:, None]
    g = share[:, :n] / n  # masked entries are exp(-inf) = 0 already
    g[idx, pos_idx] += (-1.0 + (c * share[:, -1] if c else 0.0)) / n
    dzp = ((g + g.T) @ zp) / tau
    dzh = None
    if zh is not None:
        p_hard = share[:, n] / n
        dzp[:b] += (rho * p_hard[:b, None] * zh64) / tau
        dzh = (rho * p_hard[:b, None] * zp[:b]) / tau
    info = {"pos_logit": float(pos[:b].mean()),
            "hardneg_logit": float(hard_logits[:b][avail].mean())
            if zh is not None and avail.any() else math.nan,
            "hardneg_avail_frac": float(np.asarray(avail, bool).mean())}
    return loss, dzp, dzh, info


def train_step_simclr(enc: Encoder, views, opt, cfg: RunConfig) -> dict:
    """Symmetric in-batch update; hard negatives act on the query
    direction only."""
    b = len(views)
    if b < 2:
        raise ValueError(f"simclr needs batch >= 2, got {b}")
    q_imgs = np.stack([v.query for v in views])
    k_imgs = np.stack([v.key_pos for v in views])
    hard_imgs, avail = _stack_hard_views(views)
    parts = [q_imgs, k_imgs] + ([hard_imgs] if hard_imgs is not None else [])
    z = enc.forward(np.concatenate(parts), train=True)
    zpair = z[:2 * b]
    zh = _scatter_rows(z[2 * b:], avail, z.shape[1]) \
        if hard_imgs is not None else None
    loss, dzp, dzh, info = simclr_loss(zpair, zh, avail, tau=cfg.tau,
                                       rho=cfg.rho,
                                       literal_eq2=cfg.literal_eq2)
    d_parts = [dzp]
    if zh is not None:
        d_parts.append(dzh[avail])
    enc.backward(np.concatenate(d_parts).astype(z.dtype))
    lr = sgd_step(opt, enc.parameters(), enc.gradients())
    return {"loss": loss, "lr": lr, **info}


def strategy_config_for(cfg: RunConfig, side: int) -> StrategyConfig:
    """Desk StrategyConfig for an image side, honoring explicit overrides."""
    kw = {"noise_std": cfg.noise_std, "focal_outer": cfg.focal_outer,
          "focal_inner": cfg.focal_inner}
    for key in ("blur_size", "blur_var", "hp_size", "hp_var"):
        val = getattr(cfg, key)
        if val is not None:
            kw[key] = val
    if cfg.strategy == "highpass":
        kw["channelwise"] = cfg.channelwise_p > 0
        kw["focal"] = cfg.focal_p > 0
    return StrategyConfig.for_side(cfg.strategy, side, **kw)


def build_localization(cfg: RunConfig, ds, rng_seed: int):
    """Either load a frozen classifier checkpoint or train one in-run."""
    if cfg.loc_net == "train-supervised":
        loc, _ = train_localization_net(ds, grid_side=cfg.grid,
                                        seed=rng_seed)
        return loc
    clf = Classifier(Rng(0), ds.class_count)
    load_checkpoint(cfg.loc_net, clf)
    return localization_from_classifier(clf, cfg.grid)


def resolve_split(root, split: str) -> Path:
    """Accept a corpus root holding split subdirectories or a split dir."""
    root = Path(root)
    if (root / split / "labels.csv").exists():
        return root / split
    return root


METRICS_HEADER = ["epoch", "step", "loss", "lr", "pos_logit",
                  "hardneg_logit", "hardneg_avail_frac"]


def _nanmean(vals) -> float:
    kept = [v for v in vals if not math.isnan(v)]
    return sum(kept) / len(kept) if kept else math.nan


def pretrain(cfg: RunConfig, out_dir, *, checkpoint_every: int = 0,
             loc_net=None) -> tuple[Path, Path]:
    """Run the configured pretraining; returns (checkpoint dir, metrics csv).

    ``loc_net`` lets callers share one trained localization net across
    runs; when None it is resolved from the config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    if not cfg.dataset:
        raise ConfigError("config key `dataset` is required for pretraining")
    ds = load_dataset(resolve_split(cfg.dataset, "train"), split="train")
    side = ds.records[0].pixels.shape[0]

    root = Rng(cfg.seed)
    if loc_net is None:
        loc_net = build_localization(cfg, ds, cfg.seed)
    enc = Encoder(root.fold_in(1))
    steps_per_epoch = max(len(ds) // cfg.batch, 1)
    opt = make_optimizer(enc.parameters(), cfg.lr, weight_decay=cfg.wd,
                         warmup_epochs=cfg.warmup, total_epochs=cfg.epochs,
                         steps_per_epoch=steps_per_epoch)
    scfg = strategy_config_for(cfg, side)
    policy = BranchPolicy(cfg.branch)
    if cfg.framework == "moco":
        menc = MomentumEncoder(enc, cfg.moco_m)
        queue = NegativeQueue(cfg.queue, enc.embed_dim)

    rows = []
    gstep = 0
    last_lr = 0.0
    for epoch in range(cfg.epochs):
        stats = {"loss": [], "pos_logit": [], "hardneg_logit": [],
                 "hardneg_avail_frac": []}
        for indices in shuffled_batches(ds, cfg.batch,
                                        root.fold_in(2).fold_in(epoch)):
            imgs = gather_pixels(ds, indices)
            views = build_views_batch(
                imgs, loc_net, policy, scfg, cfg.hardneg,
                root.fold_in(3).fold_in(gstep),
                source_ids=[ds.records[i].id for i in indices],
                mask_mode=cfg.mask_mode,
                alpha_range=(cfg.alpha_min, cfg.alpha_max),
                beta_range=(cfg.beta_min, cfg.beta_max),
                coeff=cfg.saliency_coeff,
                channelwise_p=cfg.channelwise_p, focal_p=cfg.focal_p)
            if cfg.framework == "moco":
                rec = train_step_moco(enc, menc, queue, views, opt, cfg)
            else:
                rec = train_step_simclr(enc, views, opt, cfg)
            gstep += 1
            last_lr = rec["lr"]
            for key in stats:
                stats[key].append(rec[key])
        rows.append([epoch + 1, gstep, _nanmean(stats["loss"]), last_lr,
                     _nanmean(stats["pos_logit"]),
                     _nanmean(stats["hardneg_logit"]),
                     _nanmean(stats["hardneg_avail_frac"])])
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0 \
                and epoch + 1 < cfg.epochs:
            save_checkpoint(out / f"checkpoint-ep{epoch + 1}", enc,
                            step=gstep, epoch=epoch + 1, lr=last_lr,
                            seed=cfg.seed)

    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, enc, step=gstep, epoch=cfg.epochs, lr=last_lr,
                    seed=cfg.seed)
    metrics = out / "metrics.csv"
    with open(metrics, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1]] + [repr(float(v))
                                                for v in row[2:]])
    return ckpt, metrics
