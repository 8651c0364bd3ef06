"""Gaussian kernels and batched image filtering.

All filtering uses replicate (edge-clamp) padding: zero padding would
paint dark borders that act as parasitic edges of their own, the exact
artifact the masking strategies exist to suppress.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import as_f32

# Reference kernel parameters, defined at 224 px and rescaled to the
# working side: blur 31/10, identity-minus-blur high pass 13/4.
REFERENCE_SIDE = 224
BLUR_SIZE_REF = 31
BLUR_VAR_REF = 10.0
HP_SIZE_REF = 13
HP_VAR_REF = 4.0


def gaussian_kernel_2d(size: int, variance: float) -> np.ndarray:
    """Normalized (size x size) Gaussian kernel, float32, entries sum to 1.

    Entries are proportional to exp(-(dx^2+dy^2) / (2*variance)) centered
    at the middle cell.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if not variance > 0:
        raise ValueError(f"kernel variance must be positive, got {variance}")
    half = size // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(d * d) / (2.0 * variance))
    k = np.outer(g1, g1)
    k /= k.sum()
    return k.astype(np.float32)


def filter2d(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve each channel of (H,W,C) with (k,k), replicate padding.

    True convolution: the impulse response is the kernel itself.
    """
    image = as_f32(image)
    kernel = as_f32(kernel)
    if image.ndim != 3:
        raise ValueError(f"expected (H,W,C) image, got shape {image.shape}")
    kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be odd square, got {kernel.shape}")
    H, W, _ = image.shape
    if kh > 2 * min(H, W) + 1:
        raise ValueError(
            f"kernel size {kh} exceeds 2*min(H,W)+1 = {2 * min(H, W) + 1}")
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])
    return _kernels.correlate2d_replicate(image, flipped)


def highpass(image: np.ndarray, size: int, variance: float) -> np.ndarray:
    """Identity-minus-Gaussian-blur high-pass transform, per channel."""
    image = as_f32(image)
    return image - filter2d(image, gaussian_kernel_2d(size, variance))


def round_to_odd(x: float) -> int:
    """Nearest odd integer >= 1 (ties round up)."""
    n = 2 * int(np.floor((x - 1.0) / 2.0 + 0.5)) + 1
    return max(1, n)


def scaled_blur_params(side: int) -> tuple[int, float]:
    """Blur kernel size/variance rescaled from the 224-px reference."""
    size = round_to_odd(BLUR_SIZE_REF * side / REFERENCE_SIDE)
    var = BLUR_VAR_REF * (side / REFERENCE_SIDE) ** 2
    return size, var


def scaled_hp_params(side: int) -> tuple[int, float]:
    """High-pass kernel size/variance rescaled from the 224-px reference.

    Below side ~52 the size lands on 1, a 1x1 kernel whose subtraction
    zeroes the transform; tiny-image pipelines should override these.
    """
    size = round_to_odd(HP_SIZE_REF * side / REFERENCE_SIDE)
    var = HP_VAR_REF * (side / REFERENCE_SIDE) ** 2
    return size, var
