"""im2col helpers for stride-1, zero-padded square convolutions.

Patches are vectorised in (input-channel, kernel-row, kernel-col) order,
fastest-last, which is the same order ``unroll_conv`` uses for filters, so a
convolution is ``im2col(x) @ unrolled_kernel``.
"""
from builtins import int, range
from typing import Tuple
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.utils.exceptions import ShapeError


def output_hw(height: int, width: int, kernel_size: int, padding: int) -> Tuple[int, int]:
    out_h = height + 2 * padding - kernel_size + 1
    out_w = width + 2 * padding - kernel_size + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Kernel {kernel_size} with padding {padding} does not fit a {height}x{width} input")
    return out_h, out_w


def im2col(x: np.ndarray, kernel_size: int, padding: int) -> np.ndarray:
    """(B, C, H, W) -> (B * H_out * W_out, C * k * k)."""
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, C, H, W), got {x.shape}")
    batch, channels, height, width = x.shape
    out_h, out_w = output_hw(height, width, kernel_size, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel_size, kernel_size), axis=(2, 3))
    # windows: (B, C, H_out, W_out, k, k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kernel_size * kernel_size)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: Tuple[int, int, int, int], kernel_size: int, padding: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back onto the input."""
    batch, channels, height, width = x_shape
    out_h, out_w = output_hw(height, width, kernel_size, padding)
    patches = cols.reshape(batch, out_h, out_w, channels, kernel_size, kernel_size).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=cols.dtype)
    for i in range(kernel_size):
        for j in range(kernel_size):
            padded[:, :, i:i + out_h, j:j + out_w] += patches[:, :, :, :, i, j]
    return padded[:, :, padding:padding + height, padding:padding + width]


def cols_to_nchw(out: np.ndarray, batch: int, out_h: int, out_w: int) -> np.ndarray:
    channels = out.shape[1]
    return out.reshape(batch, out_h, out_w, channels).transpose(0, 3, 1, 2)


def nchw_to_cols(grad: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(grad.transpose(0, 2, 3, 1).reshape(-1, grad.shape[1]))


def unroll_kernel(kernel: np.ndarray) -> np.ndarray:
    """(n, m, k, k) kernel -> (m*k*k, n) matrix whose column j is filter j."""
    n = kernel.shape[0]
    return np.ascontiguousarray(kernel.reshape(n, -1).T)


def roll_kernel(matrix: np.ndarray, in_channels: int, kernel_size: int) -> np.ndarray:
    """Inverse of unroll_kernel."""
    rows, n = matrix.shape
    if rows != in_channels * kernel_size * kernel_size:
        raise ShapeError(f"{rows} rows cannot be rolled into {in_channels} channels of {kernel_size}x{kernel_size}")
    return np.ascontiguousarray(matrix.T.reshape(n, in_channels, kernel_size, kernel_size))
