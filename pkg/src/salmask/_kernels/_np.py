"""Pure-numpy kernels; the fallback when the compiled core is absent.

Accumulation orders per output cell match the compiled core tap-for-tap
(ascending kernel offset, no fused multiply-add), so both backends return
bit-identical float32 results.
"""
from __future__ import annotations

import numpy as np


def correlate2d_replicate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2D correlation of (H,W,C) with (kh,kw), edge-clamp padded.

    Taps accumulate in float64 (products of float32 pairs are exact there)
    and round to float32 once at the end, so a normalized kernel maps a
    constant image to itself bit-exactly.
    """
    H, W, _ = img.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = np.pad(img.astype(np.float64), ((ph, ph), (pw, pw), (0, 0)), mode="edge")
    k64 = kernel.astype(np.float64)
    out = np.zeros((H, W, img.shape[2]), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            out += k64[ky, kx] * pad[ky:ky + H, kx:kx + W]
    return out.astype(np.float32)


def im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
           ph: int, pw: int) -> np.ndarray:
    """(B,H,W,C) -> (B*OH*OW, kh*kw*C) patch matrix, zero padding."""
    B, H, W, C = x.shape
    OH = (H + 2 * ph - kh) // sh + 1
    OW = (W + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((B, OH, OW, kh, kw, C), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky, kx, :] = \
                xp[:, ky:ky + sh * OH:sh, kx:kx + sw * OW:sw, :]
    return cols.reshape(B * OH * OW, kh * kw * C)


def col2im(cols: np.ndarray, B: int, H: int, W: int, C: int,
           kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (B,H,W,C)."""
    OH = (H + 2 * ph - kh) // sh + 1
    OW = (W + 2 * pw - kw) // sw + 1
    cols = cols.reshape(B, OH, OW, kh, kw, C)
    xp = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, ky:ky + sh * OH:sh, kx:kx + sw * OW:sw, :] += \
                cols[:, :, :, ky, kx, :]
    return np.ascontiguousarray(xp[:, ph:ph + H, pw:pw + W, :])
