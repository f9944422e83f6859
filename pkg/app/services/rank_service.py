"""Rank estimation from a layer's singular values.

Stable rank, the epoch-0 scale factor, scaled stable rank, accumulative rank,
the max rule combining both, rank ratios and the full rank of unrolled
convolution kernels.
"""
from builtins import float, int, len, max, min, str
from dataclasses import dataclass
import math
import numpy as np

from app.models.tensor_model import as_conv_kernel
from app.schemas.config_schemas import EstimatorMode, RankEstimatorConfig
from app.utils.exceptions import DegenerateSpectrum, InvalidInput, RankError


@dataclass(frozen=True)
class ScaleFactor:
    layer_id: str
    xi: float


def _spectrum(singular) -> np.ndarray:
    values = np.asarray(singular, dtype=np.float64).ravel()
    if values.size == 0:
        raise InvalidInput("Spectrum is empty")
    return values


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def stable_rank(singular) -> float:
    """(sum of sigma_i^2) / sigma_max^2."""
    values = _spectrum(singular)
    sigma_max = float(np.max(values))
    if sigma_max <= 0.0:
        raise DegenerateSpectrum("Stable rank is undefined for an all-zero spectrum")
    ratio = values / sigma_max
    return float(np.sum(ratio * ratio))


def scale_factor(singular_epoch0, full_rank: int, layer_id: str = "") -> ScaleFactor:
    rank0 = stable_rank(singular_epoch0)
    if rank0 <= 0.0:
        raise DegenerateSpectrum(f"Zero stable rank for layer {layer_id}")
    return ScaleFactor(layer_id=layer_id, xi=full_rank / rank0)


def scaled_stable_rank(singular, xi: float) -> float:
    if xi <= 0:
        raise InvalidInput(f"Scale factor must be positive, got {xi}")
    values = _spectrum(singular)
    full_rank = float(values.size)
    scaled = xi * stable_rank(values)
    if scaled > full_rank or math.isclose(scaled, full_rank, rel_tol=1e-12):
        return full_rank
    return scaled


def accumulative_rank(singular, p: float) -> int:
    """Smallest r >= 1 whose leading singular values cover fraction p of the total."""
    if not 0.0 <= p <= 1.0:
        raise InvalidInput(f"p must lie in [0, 1], got {p}")
    values = _spectrum(singular)
    cumulative = np.cumsum(values)
    total = float(cumulative[-1])
    if total <= 0.0:
        return 1
    target = p * total - 1e-12 * total
    r = int(np.searchsorted(cumulative, target, side="left")) + 1
    return max(1, min(r, int(values.size)))


def estimate_rank(singular, xi: float, config: RankEstimatorConfig, full_rank: int = None) -> int:
    values = _spectrum(singular)
    limit = int(values.size) if full_rank is None else int(full_rank)
    mode = EstimatorMode(config.mode)
    if mode is EstimatorMode.STABLE:
        rank = round_half_up(stable_rank(values))
    else:
        rank = round_half_up(scaled_stable_rank(values, xi))
        if mode is EstimatorMode.MAX_RULE:
            rank = max(rank, accumulative_rank(values, config.p))
    return max(1, min(rank, limit))


def unrolled_full_rank(kernel) -> int:
    n, m, k, _ = as_conv_kernel(kernel, check_finite=False).shape
    return min(m * k * k, n)


def rank_ratio(r: int, full_rank: int) -> float:
    if not 1 <= r <= full_rank:
        raise RankError(f"Rank {r} outside [1, {full_rank}]")
    return r / full_rank
