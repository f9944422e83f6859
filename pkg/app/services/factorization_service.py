"""Turning full-rank layers into (U, V^T) pairs.

Covers conv unrolling, the balanced truncated spectral split
U = U~ sqrt(S), V^T = sqrt(S) V~^T, reshaping conv factors back into a thin
conv plus a 1x1 conv, plan construction from rank trajectories, assembly of
the hybrid network and parameter / MAC accounting.
"""
from builtins import bool, int, len, list, min, str
from concurrent.futures import Executor
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
import logging
import numpy as np

from app.models.network_model import (ConvLayer, DenseLayer, Layer, LowRankConvLayer,
                                      LowRankDenseLayer, Network)
from app.models.tensor_model import FactorizedPair, TensorKind, as_conv_kernel, as_dense_matrix
from app.schemas.config_schemas import RankEstimatorConfig
from app.schemas.plan_schema import FactorizationPlan, LayerRank
from app.services.rank_service import estimate_rank
from app.services.spectral_service import singular_values, svd
from app.services.trajectory_service import RankTrajectory
from app.utils import conv_ops
from app.utils.exceptions import OriginError, PlanError, RankError

logger = logging.getLogger(__name__)


def unroll_conv(kernel) -> np.ndarray:
    """(n, m, k, k) kernel -> (m*k*k, n) matrix; column j is filter j vectorised (channel, row, col)."""
    return conv_ops.unroll_kernel(as_conv_kernel(kernel))


def roll_conv(matrix, in_channels: int, kernel_size: int) -> np.ndarray:
    return conv_ops.roll_kernel(as_dense_matrix(matrix), in_channels, kernel_size)


def spectral_factorize(w, r: int, origin: TensorKind = TensorKind.DENSE,
                       conv_shape: Optional[Tuple[int, int, int]] = None) -> FactorizedPair:
    """Rank-r factors of ``w`` with the singular values split evenly between U and V^T."""
    matrix = as_dense_matrix(w)
    limit = min(matrix.shape)
    if not 1 <= r <= limit:
        raise RankError(f"Rank {r} outside [1, {limit}] for a {matrix.shape} matrix")
    decomposition = svd(matrix)
    root = np.sqrt(decomposition.singular[:r])
    u = decomposition.left[:, :r] * root
    v_t = root[:, None] * decomposition.right_t[:r, :]
    return FactorizedPair(u=np.ascontiguousarray(u), v_t=np.ascontiguousarray(v_t),
                          origin=origin, conv_shape=conv_shape)


def factorize_conv(kernel, r: int) -> FactorizedPair:
    kernel = as_conv_kernel(kernel)
    n, m, k, _ = kernel.shape
    return spectral_factorize(conv_ops.unroll_kernel(kernel), r, TensorKind.CONV, (m, n, k))


def reshape_to_conv(pair: FactorizedPair) -> Tuple[np.ndarray, np.ndarray]:
    """Thin (r, m, k, k) kernel followed by a (n, r, 1, 1) projection."""
    if pair.origin is not TensorKind.CONV:
        raise OriginError("Only conv-origin pairs can be reshaped into kernels")
    m, n, k = pair.conv_shape
    u_kernel = conv_ops.roll_kernel(pair.u, m, k)
    v_kernel = np.ascontiguousarray(pair.v_t.T.reshape(n, pair.r, 1, 1))
    return u_kernel, v_kernel


def break_even(m_eff: int, n: int, r: int) -> bool:
    """True when the pair has strictly fewer parameters than the full matrix."""
    return r * (m_eff + n) < m_eff * n


def candidate_layers(model: Network, K: int) -> List[Tuple[int, Layer]]:
    """Weight layers with K < index < L; the output layer is never factorized."""
    depth = model.depth
    return [(index, layer) for index, layer in model.weight_layers() if K < index < depth]


def layer_spectrum(layer: Layer) -> np.ndarray:
    return singular_values(layer.weight_matrix())


def compute_spectra(layers: Sequence[Layer], executor: Optional[Executor] = None) -> Dict[str, np.ndarray]:
    """Singular values per layer id, optionally fanned out to a worker pool."""
    if executor is None:
        return {layer.layer_id: layer_spectrum(layer) for layer in layers}
    results = executor.map(layer_spectrum, layers)
    return {layer.layer_id: spectrum for layer, spectrum in zip(layers, results)}


def build_plan(model: Network, trajectories: Mapping[str, RankTrajectory], K: int,
               estimator: RankEstimatorConfig, switch_epoch: int,
               spectra: Optional[Mapping[str, np.ndarray]] = None) -> FactorizationPlan:
    candidates = candidate_layers(model, K)
    for _, layer in candidates:
        if layer.low_rank:
            raise PlanError(f"Layer {layer.layer_id} is already factorized")
    if spectra is None:
        spectra = compute_spectra([layer for _, layer in candidates])
    shapes = [(layer.layer_id, layer.weight_matrix().shape) for _, layer in candidates]
    return rank_plan(shapes, spectra, trajectories, K, estimator, switch_epoch)


def rank_plan(shapes: Sequence[Tuple[str, Tuple[int, int]]], spectra: Mapping[str, np.ndarray],
              trajectories: Mapping[str, RankTrajectory], K: int,
              estimator: RankEstimatorConfig, switch_epoch: int) -> FactorizationPlan:
    """Plan for the candidate layers given as (layer id, unrolled matrix shape) in network order."""
    ranks = []
    for layer_id, (m_eff, n) in shapes:
        if layer_id not in spectra:
            raise PlanError(f"No spectrum available for layer {layer_id}")
        if layer_id not in trajectories:
            raise PlanError(f"No rank trajectory (scale factor) for layer {layer_id}")
        full_rank = min(m_eff, n)
        rank = estimate_rank(spectra[layer_id], trajectories[layer_id].xi, estimator, full_rank)
        skip = not break_even(m_eff, n, rank)
        if skip:
            logger.warning(f"Layer {layer_id}: rank {rank} of {m_eff}x{n} does not reduce parameters, keeping it full-rank")
        logger.debug(f"Layer {layer_id}: rank {rank}/{full_rank}")
        ranks.append(LayerRank(layer=layer_id, rank=rank, skip=skip))
    return FactorizationPlan(switch_epoch=switch_epoch, K=K, estimator=estimator, ranks=ranks)


def factorize_layer(layer: Layer, rank: int) -> Layer:
    """Low-rank replacement of ``layer``; the bias moves to the V^T stage."""
    if isinstance(layer, DenseLayer):
        pair = spectral_factorize(layer.weight, rank)
        return LowRankDenseLayer(layer.layer_id, pair.u, pair.v_t, layer.bias.copy(), layer.activation)
    if isinstance(layer, ConvLayer):
        pair = factorize_conv(layer.weight, rank)
        return LowRankConvLayer(layer.layer_id, pair.u, pair.v_t, layer.bias.copy(),
                                layer.in_channels, layer.kernel_size, layer.padding, layer.activation)
    raise PlanError(f"Layer {layer.layer_id} of kind {layer.kind} cannot be factorized")


def _check_plan(model: Network, plan: FactorizationPlan) -> List[Tuple[Layer, int]]:
    indices = {layer.layer_id: index for index, layer in model.weight_layers()}
    depth = model.depth
    selected = []
    for entry in plan.ranks:
        if entry.layer not in indices:
            raise PlanError(f"Plan names unknown layer {entry.layer}")
        index = indices[entry.layer]
        if index <= plan.K or index >= depth:
            raise PlanError(f"Layer {entry.layer} (index {index}) may not be factorized with K={plan.K}")
        layer = model.layer(entry.layer)
        if layer.low_rank:
            raise PlanError(f"Layer {entry.layer} is already factorized")
        full_rank = min(layer.weight_matrix().shape)
        if entry.rank > full_rank:
            raise PlanError(f"Layer {entry.layer}: rank {entry.rank} exceeds its full rank {full_rank}")
        if not entry.skip:
            selected.append((layer, entry.rank))
    return selected


def apply_plan(model: Network, plan: FactorizationPlan, executor: Optional[Executor] = None) -> Network:
    """Hybrid network with every non-skipped plan layer replaced by its (U, V^T) pair.

    Untouched layers are shared with ``model``.
    """
    selected = _check_plan(model, plan)
    if executor is None:
        replaced = [factorize_layer(layer, rank) for layer, rank in selected]
    else:
        replaced = list(executor.map(lambda item: factorize_layer(*item), selected))
    hybrid = model.replace({layer.layer_id: layer for layer in replaced})
    logger.info(f"Factorized {len(replaced)} layers: {model.param_count()} -> {hybrid.param_count()} parameters")
    return hybrid


def param_count(model: Union[Network, Iterable[Layer]]) -> int:
    layers = model.layers if isinstance(model, Network) else list(model)
    return int(sum(layer.param_count for layer in layers))


def flops_estimate(model: Network, input_shape: Sequence[int]) -> int:
    """Multiply-accumulates of one forward pass on a (B, *sample_shape) batch."""
    batch, shape = int(input_shape[0]), tuple(input_shape[1:])
    total = 0
    for layer in model.layers:
        total += sum(macs for macs, _ in layer.cost_terms(shape, batch))
        shape = layer.output_shape(shape)
    return int(total)
