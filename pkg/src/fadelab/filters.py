"""Small numpy image filters shared by noise blurring and gradient smoothing."""
from __future__ import annotations

import numpy as np


def gaussian_kernel2d(size, sigma):
    """Normalized 2-D Gaussian kernel; ``size`` must be odd."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(np.float32)


def depthwise_conv_same(x, kernel):
    """Convolve each channel of NCHW ``x`` with one 2-D kernel, zero padding."""
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    k = kernel.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ki in range(k):
        for kj in range(k):
            out += kernel[ki, kj] * xp[:, :, ki : ki + h, kj : kj + w]
    return out
