"""Dense linear-algebra primitives: SVD, singular values, products and norms.

Every function is pure and safe to call from several worker threads at once.
"""
from builtins import float, int
import logging
import numpy as np

from app.models.tensor_model import SvdResult, as_dense_matrix
from app.utils.exceptions import NumericalFailure, ShapeError

logger = logging.getLogger(__name__)

# Singular values below this fraction of sigma_max are clamped to zero.
ZERO_TOLERANCE = 1e-12


def _clamp_small(singular: np.ndarray) -> np.ndarray:
    singular = np.maximum(singular, 0.0)
    if singular.size and singular[0] > 0:
        singular = np.where(singular < ZERO_TOLERANCE * singular[0], 0.0, singular)
    return singular


def svd(matrix) -> SvdResult:
    """Thin SVD of ``matrix`` returning min(rows, cols) singular triplets.

    Raises:
        InvalidInput: the matrix holds NaN or Inf.
        NumericalFailure: LAPACK did not converge.
    """
    a = as_dense_matrix(matrix)
    try:
        left, singular, right_t = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as e:
        logger.error(f"SVD failed to converge on a {a.shape} matrix: {e}")
        raise NumericalFailure(f"SVD did not converge for shape {a.shape}") from e
    return SvdResult(left=np.ascontiguousarray(left),
                     singular=_clamp_small(singular),
                     right_t=np.ascontiguousarray(right_t))


def singular_values(matrix) -> np.ndarray:
    """Descending singular values without forming the singular vectors."""
    a = as_dense_matrix(matrix)
    try:
        values = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as e:
        logger.error(f"Singular value computation failed on a {a.shape} matrix: {e}")
        raise NumericalFailure(f"SVD did not converge for shape {a.shape}") from e
    return _clamp_small(values)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Inner dimensions do not match: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))
