"""Training driver: full-rank warm-up, rank tracking, switch, low-rank continuation.

Trajectory entry e holds the stable ranks of the weights after e full-rank
epochs. Detection at entry t yields switch epoch E = t + 1; epochs 0..E-1
train full-rank, the weights after epoch E-1 are factorized and epochs
E..T-1 train the hybrid network.
"""
from builtins import OSError, bool, float, int, len, list, min, range, str
from concurrent.futures import Executor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import logging
import time
import numpy as np

from app.dependencies import get_settings
from app.models.network_model import Network, build_network
from app.schemas.config_schemas import EstimatorMode, ModelSpec, TrainConfig
from app.schemas.plan_schema import FactorizationPlan
from app.schemas.report_schema import EpochRecord, LayerSummary, TrainReport
from app.services.dataset_service import Dataset, split
from app.services.factorization_service import apply_plan, build_plan, candidate_layers, compute_spectra
from app.services.profiler_service import ProfilerConfig, default_stacks, profile
from app.services.rank_service import scale_factor, stable_rank
from app.services.regularization_service import decay_grads
from app.services.snapshot_service import network_tensors, snapshot_name, write_snapshot
from app.services.trajectory_service import RankTrajectory, SwitchDetector, append
from app.utils.exceptions import DatasetError, DivergenceError, OutputError, ShapeError

logger = logging.getLogger(__name__)
settings = get_settings()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"{labels.shape} labels for {batch} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"Labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def forward_backward(model: Network, x: np.ndarray, y: np.ndarray,
                     threshold: Optional[float] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"Batch has {x.shape[0]} inputs and {y.shape[0]} labels")
    logits, caches = model.forward(x)
    loss, grad = softmax_cross_entropy(logits, y)
    limit = settings.divergence_threshold if threshold is None else threshold
    if not np.isfinite(loss) or loss > limit:
        raise DivergenceError(f"Loss {loss} is not finite or exceeds {limit}")
    return loss, model.backward(grad, caches)


def add_decay(model: Network, grads: Dict[str, np.ndarray], config: TrainConfig) -> Dict[str, np.ndarray]:
    for layer in model.layers:
        for name, grad in decay_grads(layer, config.decay).items():
            key = f"{layer.layer_id}.{name}"
            grads[key] = grads[key] + grad
    return grads


def learning_rate(config: TrainConfig, epoch: int, switched: bool = False) -> float:
    rate = config.learning_rate
    if epoch < config.warmup_epochs:
        start = config.warmup_start_lr if config.warmup_start_lr is not None else rate / 10.0
        rate = start + (rate - start) * epoch / config.warmup_epochs
    for milestone, multiplier in config.lr_milestones:
        if epoch >= milestone:
            rate *= multiplier
    if switched:
        rate *= config.switch_lr_multiplier
    return rate


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             learning_rate: float, momentum: float) -> Dict[str, np.ndarray]:
    """Heavy-ball SGD in place: v <- mu v + g, w <- w - lr v."""
    for key, param in params.items():
        grad = grads.get(key)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient {grad.shape} does not match parameter {key} {param.shape}")
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(param)
        v *= momentum
        v += grad
        velocity[key] = v
        param -= learning_rate * v
    return params


def evaluate(model: Network, dataset: Dataset, batch_size: int = 1024) -> float:
    """Top-1 accuracy; np.argmax breaks ties toward the lowest class index."""
    if len(dataset) == 0:
        raise DatasetError(f"Cannot evaluate on empty dataset {dataset.name}")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = model.predict(dataset.x[start:start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.y[start:start + batch_size]))
    return correct / len(dataset)


def train_epoch(model: Network, data: Dataset, config: TrainConfig, rate: float,
                velocity: Dict[str, np.ndarray], rng: np.random.Generator) -> float:
    order = rng.permutation(len(data))
    total = 0.0
    for start in range(0, len(data), config.batch_size):
        batch = order[start:start + config.batch_size]
        loss, grads = forward_backward(model, data.x[batch], data.y[batch])
        add_decay(model, grads, config)
        sgd_step(model.parameters(), grads, velocity, rate, config.momentum)
        total += loss * len(batch)
    return total / len(data)


class RankTracker:
    """Per-layer stable-rank trajectories, optionally dumping a snapshot per entry."""

    def __init__(self, snapshot_dir: Optional[Path] = None, executor: Optional[Executor] = None):
        self.trajectories: Dict[str, RankTrajectory] = {}
        self.spectra: Dict[str, np.ndarray] = {}
        self.snapshot_dir = snapshot_dir
        self.executor = executor

    def record(self, model: Network, entry: int) -> None:
        layers = [layer for _, layer in model.weight_layers()]
        self.spectra = compute_spectra(layers, self.executor)
        for layer in layers:
            spectrum = self.spectra[layer.layer_id]
            if entry == 0:
                full_rank = min(layer.weight_matrix().shape)
                xi = scale_factor(spectrum, full_rank, layer.layer_id).xi
                self.trajectories[layer.layer_id] = RankTrajectory(layer.layer_id, xi, full_rank)
            self.trajectories[layer.layer_id] = append(self.trajectories[layer.layer_id], entry, stable_rank(spectrum))
        if self.snapshot_dir is not None:
            write_snapshot(self.snapshot_dir / snapshot_name(entry), entry, network_tensors(model))


def _check_dataset(model: Network, dataset: Dataset) -> None:
    expected = int(np.prod(model.input_shape))
    got = int(np.prod(dataset.feature_shape))
    if got != expected:
        raise DatasetError(f"{dataset.name} has {got} features per sample, the model expects {expected}")
    if len(dataset) and int(dataset.y.max()) >= model.num_classes:
        raise DatasetError(f"{dataset.name} has labels beyond the model's {model.num_classes} classes")


def _layer_summaries(initial: Network, final: Network) -> List[LayerSummary]:
    summaries = []
    for _, layer in final.weight_layers():
        original = initial.layer(layer.layer_id)
        rank = layer.rank if layer.low_rank else None
        ratio = rank / min(original.weight_matrix().shape) if rank is not None else None
        summaries.append(LayerSummary(layer=layer.layer_id, kind=layer.kind, shape=list(original.weight.shape),
                                      rank=rank, rank_ratio=ratio, params_before=original.param_count,
                                      params_after=layer.param_count))
    return summaries


def _train(model_spec: Optional[ModelSpec], dataset: Dataset, config: TrainConfig,
           snapshot_dir: Optional[Union[str, Path]], executor: Optional[Executor],
           clock, allow_switch: bool) -> Tuple[Network, TrainReport, Dict[str, RankTrajectory]]:
    spec = model_spec or config.model
    rng = np.random.default_rng(config.seed)
    model = build_network(spec, rng)
    _check_dataset(model, dataset)
    initial = model.copy()
    train_set, eval_set = split(dataset, config.seed)
    total_epochs = config.total_epochs
    wall_time = {"profiling": 0.0, "full_rank": 0.0, "low_rank": 0.0}

    started = time.perf_counter()
    if not allow_switch or config.forced_K is not None:
        K = config.forced_K if config.forced_K is not None else 1
        if allow_switch:
            logger.info(f"Using forced K={K}, profiling skipped")
    else:
        profiler = ProfilerConfig.from_settings(config.profiler, clock)
        K = profile(model, default_stacks(model, config.batch_size), profiler).K_hat
    wall_time["profiling"] = time.perf_counter() - started

    candidates = [layer.layer_id for _, layer in candidate_layers(model, K)]
    tracker = None
    detector = SwitchDetector(config.stabilization)
    if allow_switch:
        if snapshot_dir is not None:
            snapshot_dir = Path(snapshot_dir)
            try:
                snapshot_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                logger.error(f"Could not create {snapshot_dir}: {e}")
                raise OutputError(f"Cannot create snapshot directory {snapshot_dir}: {e}") from e
        tracker = RankTracker(snapshot_dir, executor)
        tracker.record(model, 0)
        detector.update([tracker.trajectories[layer_id] for layer_id in candidates])

    switch_epoch = config.forced_E if allow_switch else None
    source = "forced" if switch_epoch is not None else None
    switch_done = not allow_switch
    switched = False
    plan: Optional[FactorizationPlan] = None
    velocity: Dict[str, np.ndarray] = {}
    records: List[EpochRecord] = []

    def report() -> TrainReport:
        return TrainReport(
            seed=config.seed, total_epochs=total_epochs, K=K, switch_epoch=switch_epoch if switch_done else None,
            switch_source=source if switch_done else None, plan=plan, epochs=list(records),
            layers=_layer_summaries(initial, model), params_before=initial.param_count(),
            params_after=model.param_count(), final_accuracy=records[-1].accuracy if records else None,
            wall_time=dict(wall_time))

    try:
        for epoch in range(total_epochs):
            if not switch_done and (epoch == switch_epoch or (switch_epoch is None and epoch == total_epochs - 1)):
                if switch_epoch is None:
                    switch_epoch, source = total_epochs - 1, "fallback"
                    logger.warning(f"Stable ranks never converged, switching at the last epoch {switch_epoch}")
                plan = build_plan(model, tracker.trajectories, K, config.estimator, switch_epoch,
                                  spectra=tracker.spectra)
                if plan.factorized_layers:
                    model = apply_plan(model, plan, executor)
                    for layer_id in plan.factorized_layers:
                        for key in [key for key in velocity if key.startswith(f"{layer_id}.")]:
                            del velocity[key]
                    switched = True
                else:
                    logger.warning(f"Plan at {source} switch epoch {switch_epoch} factorizes no layer, "
                                   f"training stays full-rank")
                    if switch_epoch == 0 and config.estimator.mode is EstimatorMode.SCALED_STABLE:
                        logger.warning("scaled_stable ranks equal the full rank at epoch 0, "
                                       "spectral initialization needs the stable or max_rule estimator")
                switch_done = True
                logger.info(f"Switch at epoch {switch_epoch} ({source}), {model.param_count()} parameters")

            epoch_start = time.perf_counter()
            rate = learning_rate(config, epoch, switched)
            loss = train_epoch(model, train_set, config, rate, velocity, rng)
            accuracy = evaluate(model, eval_set)
            phase = "low_rank" if switched else "full_rank"
            records.append(EpochRecord(epoch=epoch, phase=phase, loss=loss, accuracy=accuracy, learning_rate=rate))
            wall_time[phase] += time.perf_counter() - epoch_start
            logger.debug(f"Epoch {epoch} [{phase}] loss={loss:.6f} accuracy={accuracy:.4f} lr={rate:.6g}")

            if not switch_done:
                entry = epoch + 1
                if switch_epoch is None or entry <= switch_epoch:
                    tracker.record(model, entry)
                if switch_epoch is None:
                    detected = detector.update([tracker.trajectories[layer_id] for layer_id in candidates])
                    if detected is not None:
                        switch_epoch, source = min(detected, total_epochs - 1), "detected"
    except DivergenceError as e:
        logger.error(f"Training diverged at epoch {len(records)}: {e}")
        raise DivergenceError(str(e), partial_report=report()) from e

    final = report()
    logger.info(f"Training finished: accuracy {final.final_accuracy:.4f}, "
                f"{final.params_before} -> {final.params_after} parameters")
    return model, final, tracker.trajectories if tracker is not None else {}


def cuttlefish_train(model_spec: Optional[ModelSpec], dataset: Dataset, config: TrainConfig,
                     snapshot_dir: Optional[Union[str, Path]] = None, executor: Optional[Executor] = None,
                     clock=None) -> Tuple[Network, TrainReport]:
    """Full-rank warm-up until the stable ranks settle, then low-rank training.

    ``model_spec`` defaults to ``config.model``. Snapshots of every full-rank
    weight state up to the switch are written to ``snapshot_dir`` when given.
    """
    model, report, _ = _train(model_spec, dataset, config, snapshot_dir, executor, clock, allow_switch=True)
    return model, report


def cuttlefish_train_with_trajectories(model_spec: Optional[ModelSpec], dataset: Dataset, config: TrainConfig,
                                       snapshot_dir=None, executor=None, clock=None):
    return _train(model_spec, dataset, config, snapshot_dir, executor, clock, allow_switch=True)


def train_full_rank(model_spec: Optional[ModelSpec], dataset: Dataset, config: TrainConfig) -> Tuple[Network, TrainReport]:
    """Control run: same seed and schedule, never factorized."""
    model, report, _ = _train(model_spec, dataset, config, None, None, None, allow_switch=False)
    return model, report
