"""In-memory tensor types.

Dense matrices and convolution kernels are plain ``numpy`` arrays (float64,
row-major); the helpers here validate and normalise them. Kernels use the
``(out_channels n, in_channels m, k, k)`` layout.
"""
from builtins import bool, int, str
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple
import numpy as np

from app.utils.exceptions import InvalidInput, ShapeError


class TensorKind(str, Enum):
    DENSE = "dense"
    CONV = "conv"


def as_dense_matrix(data, *, check_finite: bool = True) -> np.ndarray:
    """Return ``data`` as a C-contiguous float64 matrix, validating shape and values."""
    matrix = np.ascontiguousarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    if matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ShapeError(f"Matrix must have at least one row and column, got {matrix.shape}")
    if check_finite and not np.all(np.isfinite(matrix)):
        raise InvalidInput("Matrix contains non-finite entries")
    return matrix


def as_conv_kernel(data, *, check_finite: bool = True) -> np.ndarray:
    kernel = np.ascontiguousarray(data, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"Expected a 4-D (n, m, k, k) kernel, got shape {kernel.shape}")
    n, m, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"Only square kernels are supported, got {kh}x{kw}")
    if kh < 1 or n < 1 or m < 1:
        raise ShapeError(f"Kernel dimensions must be positive, got {kernel.shape}")
    if check_finite and not np.all(np.isfinite(kernel)):
        raise InvalidInput("Kernel contains non-finite entries")
    return kernel


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``left @ diag(singular) @ right_t``; singular values descending."""
    left: np.ndarray
    singular: np.ndarray
    right_t: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.singular.shape[0])


@dataclass
class FactorizedPair:
    """(U, V^T) replacement of one layer.

    ``u`` is (m_eff, r) and ``v_t`` is (r, n); for conv origin m_eff = m*k*k and
    ``conv_shape`` holds the original (m, n, k).
    """
    u: np.ndarray
    v_t: np.ndarray
    origin: TensorKind = TensorKind.DENSE
    conv_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.u.ndim != 2 or self.v_t.ndim != 2 or self.u.shape[1] != self.v_t.shape[0]:
            raise ShapeError(f"Incompatible factors {self.u.shape} and {self.v_t.shape}")
        if self.origin is TensorKind.CONV:
            if self.conv_shape is None:
                raise ShapeError("Conv-origin pairs need conv_shape (m, n, k)")
            m, n, k = self.conv_shape
            if self.u.shape[0] != m * k * k or self.v_t.shape[1] != n:
                raise ShapeError(f"Factors {self.u.shape}/{self.v_t.shape} do not match conv {self.conv_shape}")

    @property
    def r(self) -> int:
        return int(self.u.shape[1])

    @property
    def param_count(self) -> int:
        return int(self.u.size + self.v_t.size)
