"""Weight decay gradients.

Factorized pairs are regularized with Frobenius decay (lambda/2)||U V^T||_F^2,
whose gradients share the product P = U V^T; full-rank weights use plain l2
decay. Biases are exempt from both.
"""
from builtins import float, str
from typing import Dict, Tuple
import numpy as np

from app.models.network_model import Layer
from app.schemas.config_schemas import DecayConfig, FullRankDecayMode, LowRankDecayMode
from app.services.spectral_service import matmul
from app.utils.exceptions import ShapeError


def frobenius_decay_grads(u, v_t, lambda_: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients lambda * P V and lambda * U^T P with P = U V^T computed once."""
    u = np.asarray(u, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if u.ndim != 2 or v_t.ndim != 2 or u.shape[1] != v_t.shape[0]:
        raise ShapeError(f"Incompatible factors {u.shape} and {v_t.shape}")
    if lambda_ == 0:
        return np.zeros_like(u), np.zeros_like(v_t)
    product = matmul(u, v_t)
    grad_u = lambda_ * matmul(product, v_t.T)
    grad_v_t = lambda_ * matmul(u.T, product)
    return grad_u, grad_v_t


def l2_decay_grad(w, lambda_: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if lambda_ == 0:
        return np.zeros_like(w)
    return lambda_ * w


def decay_penalty(layer: Layer, config: DecayConfig) -> float:
    """Value of the decay term contributed by ``layer`` (used for gradient checks)."""
    lam = config.lambda_
    params = layer.parameters()
    if layer.low_rank:
        if config.low_rank_mode is LowRankDecayMode.FROBENIUS:
            return 0.5 * lam * float(np.sum((params["u"] @ params["v_t"]) ** 2))
        if config.low_rank_mode is LowRankDecayMode.L2:
            return 0.5 * lam * float(np.sum(params["u"] ** 2) + np.sum(params["v_t"] ** 2))
        return 0.0
    if "weight" in params and config.full_rank_mode is FullRankDecayMode.L2:
        return 0.5 * lam * float(np.sum(params["weight"] ** 2))
    return 0.0


def decay_grads(layer: Layer, config: DecayConfig) -> Dict[str, np.ndarray]:
    """Decay gradients for the matrix parameters of ``layer`` keyed by parameter name."""
    lam = config.lambda_
    params = layer.parameters()
    if layer.low_rank:
        if config.low_rank_mode is LowRankDecayMode.FROBENIUS:
            grad_u, grad_v_t = frobenius_decay_grads(params["u"], params["v_t"], lam)
            return {"u": grad_u, "v_t": grad_v_t}
        if config.low_rank_mode is LowRankDecayMode.L2:
            return {"u": l2_decay_grad(params["u"], lam), "v_t": l2_decay_grad(params["v_t"], lam)}
        return {}
    if "weight" in params and config.full_rank_mode is FullRankDecayMode.L2:
        return {"weight": l2_decay_grad(params["weight"], lam)}
    return {}
