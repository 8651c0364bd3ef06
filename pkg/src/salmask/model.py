"""Convolutional encoder, reverse-mode gradients, momentum twin, and SGD.

Layers are plain objects with ``forward``/``backward`` that stash their own
caches. Arithmetic stays in the dtype of the arrays flowing through, so the
same graph runs in float32 for training and in float64 (after
``set_dtype``) for finite-difference checks.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import _np as _np_kernels
from .errors import ConfigError, LoadError, NumericError, StateError
from .rng import Rng
from .tensor import read_smt1, write_smt1

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
NORM_EPS = 1e-12


def _im2col(x, kh, kw, sh, sw, ph, pw):
    # compiled kernel is float32-only; other dtypes take the numpy path
    if x.dtype == np.float32:
        return _kernels.im2col(x, kh, kw, sh, sw, ph, pw)
    return _np_kernels.im2col(x, kh, kw, sh, sw, ph, pw)


def _col2im(cols, B, H, W, C, kh, kw, sh, sw, ph, pw):
    if cols.dtype == np.float32:
        return _kernels.col2im(cols, B, H, W, C, kh, kw, sh, sw, ph, pw)
    return _np_kernels.col2im(cols, B, H, W, C, kh, kw, sh, sw, ph, pw)


class Conv2d:
    """Strided 2D convolution over (B,H,W,C) maps, zero padding, no bias."""

    def __init__(self, in_ch: int, out_ch: int, rng: Rng,
                 ksize: int = 3, stride: int = 2, pad: int = 1):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = pad
        std = math.sqrt(2.0 / (ksize * ksize * in_ch))
        self.w = rng.normal(std, (ksize, ksize, in_ch, out_ch))
        self.dw = None
        self._cache = None

    def params(self):
        return {"w": self.w}

    def grads(self):
        return {"w": self.dw}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        B, H, W, _ = x.shape
        k, s, p = self.ksize, self.stride, self.pad
        oh = (H + 2 * p - k) // s + 1
        ow = (W + 2 * p - k) // s + 1
        cols = _im2col(x, k, k, s, s, p, p)
        wm = self.w.reshape(-1, self.out_ch)
        y = cols @ wm
        self._cache = (cols, (B, H, W, x.shape[3]))
        return y.reshape(B, oh, ow, self.out_ch)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("conv backward before forward")
        cols, (B, H, W, C) = self._cache
        dyf = dy.reshape(-1, self.out_ch)
        self.dw = (cols.T @ dyf).reshape(self.w.shape)
        dcols = dyf @ self.w.reshape(-1, self.out_ch).T
        k, s, p = self.ksize, self.stride, self.pad
        return _col2im(dcols, B, H, W, C, k, k, s, s, p, p)


class BatchNorm:
    """Per-channel batch normalization with running averages for eval."""

    def __init__(self, ch: int):
        self.gamma = np.ones(ch, dtype=np.float32)
        self.beta = np.zeros(ch, dtype=np.float32)
        self.running_mean = np.zeros(ch, dtype=np.float32)
        self.running_var = np.ones(ch, dtype=np.float32)
        self.dgamma = None
        self.dbeta = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def buffers(self):
        return {"running_mean": self.running_mean,
                "running_var": self.running_var}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)  # population variance, also stored
            self.running_mean[...] = (BN_MOMENTUM * self.running_mean
                                      + (1.0 - BN_MOMENTUM) * mean)
            self.running_var[...] = (BN_MOMENTUM * self.running_var
                                     + (1.0 - BN_MOMENTUM) * var)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return self.gamma.astype(x.dtype) * xhat + self.beta.astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("batchnorm backward before forward")
        xhat, inv_std, train = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.dbeta = dy.sum(axis=axes)
        self.dgamma = (dy * xhat).sum(axis=axes)
        dxhat = dy * self.gamma.astype(dy.dtype)
        if not train:
            return dxhat * inv_std
        n = dy.size // dy.shape[-1]
        return (inv_std / n) * (n * dxhat
                                - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("relu backward before forward")
        return np.where(self._mask, dy, dy.dtype.type(0))


class GlobalAvgPool:
    """(B,H,W,C) -> (B,C) spatial mean."""

    def __init__(self):
        self._shape = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StateError("pool backward before forward")
        B, H, W, C = self._shape
        return np.broadcast_to(dy[:, None, None, :] / (H * W),
                               self._shape).astype(dy.dtype)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        std = math.sqrt(2.0 / in_dim)
        self.w = rng.normal(std, (in_dim, out_dim))
        self.b = np.zeros(out_dim, dtype=np.float32)
        self.dw = None
        self.db = None
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._x = x
        return x @ self.w.astype(x.dtype) + self.b.astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("linear backward before forward")
        self.dw = self._x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.w.astype(dy.dtype).T


class L2Normalize:
    """Row-wise x / max(||x||, eps)."""

    def __init__(self):
        self._cache = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        norm = np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)),
                          x.dtype.type(NORM_EPS))
        y = x / norm
        self._cache = (y, norm)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("normalize backward before forward")
        y, norm = self._cache
        return (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm


def _conv_blocks(in_channels, channels, rng):
    """(name, layer) registry for the shared conv trunk."""
    named = []
    prev = in_channels
    for i, ch in enumerate(channels, start=1):
        named.append((f"block{i}.conv", Conv2d(prev, ch, rng.fold_in(i))))
        named.append((f"block{i}.bn", BatchNorm(ch)))
        named.append((f"block{i}.relu", ReLU()))
        prev = ch
    return named


class _Net:
    """Shared plumbing: named layer list, parameter/grad/buffer dicts."""

    named_layers: list

    def parameters(self) -> dict:
        out = {}
        for name, layer in self.named_layers:
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def gradients(self) -> dict:
        out = {}
        for name, layer in self.named_layers:
            for pname, arr in layer.grads().items():
                if arr is None:
                    raise StateError(f"no gradient for {name}.{pname}; "
                                     "run backward first")
                out[f"{name}.{pname}"] = arr
        return out

    def buffers(self) -> dict:
        out = {}
        for name, layer in self.named_layers:
            if hasattr(layer, "buffers"):
                for bname, arr in layer.buffers().items():
                    out[f"{name}.{bname}"] = arr
        return out

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if not np.isfinite(x).all():
            raise NumericError("non-finite values in forward input")
        self._fresh = True
        for _, layer in self.named_layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not getattr(self, "_fresh", False):
            raise StateError("backward without a cached forward")
        for _, layer in reversed(self.named_layers):
            dy = layer.backward(dy)
        return dy


class Encoder(_Net):
    """Conv trunk (stride-2 blocks), global average pool, projection head.

    ``forward`` returns L2-normalized embeddings; ``pooled_features``
    stops after the pool, which is what the linear probe consumes.
    """

    def __init__(self, rng: Rng, channels=(32, 64, 128, 256),
                 embed_dim: int = 128, in_channels: int = 3):
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        self.in_channels = in_channels
        width = self.channels[-1]
        self.named_layers = _conv_blocks(in_channels, self.channels, rng)
        self._gap_index = len(self.named_layers)
        self.named_layers += [
            ("pool", GlobalAvgPool()),
            ("proj.fc1", Linear(width, width, rng.fold_in(101))),
            ("proj.relu", ReLU()),
            ("proj.fc2", Linear(width, embed_dim, rng.fold_in(102))),
            ("norm", L2Normalize()),
        ]

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def pooled_features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if not np.isfinite(x).all():
            raise NumericError("non-finite values in forward input")
        for _, layer in self.named_layers[:self._gap_index + 1]:
            x = layer.forward(x, train)
        self._fresh = False  # partial caches must not feed backward
        return x

    def clone(self) -> "Encoder":
        other = Encoder(Rng(0), self.channels, self.embed_dim,
                        self.in_channels)
        copy_parameters(other, self)
        return other


class Classifier(_Net):
    """Conv trunk + linear head; the supervised localization-net backbone."""

    def __init__(self, rng: Rng, num_classes: int,
                 channels=(32, 64, 128, 256), in_channels: int = 3):
        self.channels = tuple(channels)
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.named_layers = _conv_blocks(in_channels, self.channels, rng)
        self.named_layers += [
            ("pool", GlobalAvgPool()),
            ("head", Linear(self.channels[-1], num_classes, rng.fold_in(103))),
        ]

    def features_at(self, batch: np.ndarray, grid_side: int) -> np.ndarray:
        """Eval-mode activations of the first block whose map is grid-sized."""
        x = batch
        self._fresh = False  # clobbers trunk caches; force a new forward
        for name, layer in self.named_layers:
            if isinstance(layer, GlobalAvgPool):
                break
            x = layer.forward(x, False)
            if name.endswith(".relu") and x.shape[1] == grid_side \
                    and x.shape[2] == grid_side:
                return x
        raise ConfigError(f"no block produces a {grid_side}x{grid_side} map "
                          f"for input {batch.shape[1]}x{batch.shape[2]}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -(shifted[np.arange(n), labels]
            - np.log(expv.sum(axis=1)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), dlogits / n


def copy_parameters(dst, src) -> None:
    """Overwrite dst's parameters and buffers with src's, in place."""
    dp, sp = dst.parameters(), src.parameters()
    db, sb = dst.buffers(), src.buffers()
    if set(dp) != set(sp) or set(db) != set(sb):
        raise StateError("parameter sets differ")
    for name, arr in sp.items():
        if dp[name].shape != arr.shape:
            raise StateError(f"shape mismatch for {name}")
        dp[name][...] = arr
    for name, arr in sb.items():
        db[name][...] = arr


def set_dtype(net, dtype) -> None:
    """Convert parameters and buffers in place (float64 for FD checks)."""
    for _, layer in net.named_layers:
        for pname, arr in list(layer.params().items()):
            setattr(layer, pname, arr.astype(dtype))
        if hasattr(layer, "buffers"):
            for bname, arr in list(layer.buffers().items()):
                setattr(layer, bname, arr.astype(dtype))


class MomentumEncoder:
    """Slow copy of a query encoder, advanced by ``update``."""

    def __init__(self, source: Encoder, m: float = 0.99):
        if not 0.0 <= m <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {m}")
        self.m = float(m)
        self.encoder = source.clone()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.encoder.forward(x, train)

    def parameters(self):
        return self.encoder.parameters()

    def buffers(self):
        return self.encoder.buffers()

    def update(self, source: Encoder) -> None:
        momentum_update(self, source, self.m)


def momentum_update(momentum_enc, query_enc, m: float) -> None:
    """p_eps <- m * p_eps + (1 - m) * p_theta, including BN running stats."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {m}")
    target = momentum_enc.encoder if isinstance(momentum_enc, MomentumEncoder) \
        else momentum_enc
    tp, qp = target.parameters(), query_enc.parameters()
    tb, qb = target.buffers(), query_enc.buffers()
    if set(tp) != set(qp) or set(tb) != set(qb):
        raise StateError("parameter sets differ")
    m = np.float32(m)
    one_m = np.float32(1.0) - m
    for name, arr in tp.items():
        if arr.shape != qp[name].shape:
            raise StateError(f"shape mismatch for {name}")
        arr[...] = m * arr + one_m * qp[name]
    for name, arr in tb.items():
        arr[...] = m * arr + one_m * qb[name]


@dataclass
class OptimizerState:
    """SGD with momentum plus the warmup/cosine schedule bookkeeping."""

    velocities: dict
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 0
    total_epochs: int = 1
    steps_per_epoch: int = 1
    step: int = 0

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def make_optimizer(params: dict, base_lr: float, *, momentum: float = 0.9,
                   weight_decay: float = 0.0, warmup_epochs: int = 0,
                   total_epochs: int = 1,
                   steps_per_epoch: int = 1) -> OptimizerState:
    vel = {name: np.zeros_like(arr) for name, arr in params.items()}
    return OptimizerState(vel, float(base_lr), momentum, weight_decay,
                          warmup_epochs, total_epochs, steps_per_epoch)


def lr_at(opt: OptimizerState, step: int) -> float:
    """Linear ramp 0 -> base over warmup, then cosine decay to 0."""
    warm = opt.warmup_steps
    if step < warm:
        return opt.base_lr * step / warm
    span = max(opt.total_steps - warm, 1)
    t = min((step - warm) / span, 1.0)
    return opt.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def sgd_step(opt: OptimizerState, params: dict, grads: dict) -> float:
    """One in-place update; returns the lr used.

    New velocities are staged and checked finite before anything is
    written, so a failed step leaves params and velocities untouched.
    """
    lr = lr_at(opt, opt.step)
    staged = []
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise StateError(f"gradient shape mismatch for {name}")
        v = (opt.momentum * opt.velocities[name] + g
             + opt.weight_decay * p).astype(p.dtype)
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite update for {name}; step aborted")
        staged.append((name, p, v))
    for name, p, v in staged:
        opt.velocities[name] = v
        p -= p.dtype.type(lr) * v
    opt.step += 1
    return lr


def _param_filename(name: str) -> str:
    return name.replace(".", "_") + ".smt1"


def save_checkpoint(path, net, *, step: int = 0, epoch: int = 0,
                    lr: float = 0.0, seed: int = 0) -> None:
    """Directory checkpoint: manifest.txt, one SMT1 per tensor, state.txt."""
    os.makedirs(path, exist_ok=True)
    entries = {**net.parameters(), **net.buffers()}
    lines = []
    for name in sorted(entries):
        arr = entries[name]
        fname = _param_filename(name)
        write_smt1(os.path.join(path, fname), arr.astype(np.float32))
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{fname}\t{shape}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "state.txt"), "w") as fh:
        fh.write(f"step {int(step)}\nepoch {int(epoch)}\n"
                 f"lr {float(lr)!r}\nseed {int(seed)}\n")


def load_checkpoint(path, net) -> dict:
    """Load tensors into an existing net; returns the state.txt fields."""
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest):
        raise LoadError(f"missing manifest: {manifest}")
    entries = {**net.parameters(), **net.buffers()}
    seen = set()
    with open(manifest) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, fname, shape_s = line.split("\t")
            if name not in entries:
                raise LoadError(f"unknown tensor {name!r} in {manifest}")
            shape = tuple(int(d) for d in shape_s.split("x")) if shape_s \
                else ()
            if entries[name].shape != shape:
                raise LoadError(f"shape mismatch for {name}: checkpoint "
                                f"{shape}, model {entries[name].shape}")
            try:
                arr = read_smt1(os.path.join(path, fname))
            except OSError as exc:
                raise LoadError(f"cannot read {fname}: {exc}") from exc
            entries[name][...] = arr.reshape(shape)
            seen.add(name)
    missing = set(entries) - seen
    if missing:
        raise LoadError(f"checkpoint lacks tensors: {sorted(missing)}")
    state = {}
    with open(os.path.join(path, "state.txt")) as fh:
        for line in fh:
            key, val = line.split(None, 1)
            state[key] = val.strip()
    return {"step": int(state["step"]), "epoch": int(state["epoch"]),
            "lr": float(state["lr"]), "seed": int(state["seed"])}


def parameter_digest(net) -> str:
    """sha256 over names, shapes, and raw bytes, in name-sorted order."""
    import hashlib

    h = hashlib.sha256()
    entries = {**net.parameters(), **net.buffers()}
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
