"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patch matrix with zero same-padding."""
    N, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * k * k, H * W)


def col2im(cols: np.ndarray, k: int, shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    N, C, H, W = shape
    p = k // 2
    c6 = cols.reshape(N, C, k, k, H, W)
    out = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + H, dx:dx + W] += c6[:, :, dy, dx]
    return out[:, :, p:p + H, p:p + W].copy()
