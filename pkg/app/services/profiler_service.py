"""Choosing how many leading layers stay full-rank.

Given a model, each stack is timed as one training iteration of the whole
network, once as built and once with only that stack's layers factorized at
the profiling rank ratio. Without a model a stack is timed as a stand-alone
network built from its workload shape. Leading stacks whose speedup stays
below ``upsilon`` are excluded from factorization.
"""
from builtins import Exception, bool, float, int, len, list, max, min, range, str
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging
import threading
import time
import numpy as np

from app.models.network_model import ConvLayer, DenseLayer, Layer, Network, he_normal
from app.schemas.config_schemas import ProfilerSettings
from app.schemas.report_schema import ProfileReport, StackTiming
from app.services.factorization_service import factorize_layer
from app.services.rank_service import round_half_up
from app.utils.exceptions import InvalidInput, ProfileError

logger = logging.getLogger(__name__)

_profiling_lock = threading.Lock()


@dataclass(frozen=True)
class WorkloadShape:
    batch: int
    in_channels: int
    out_channels: int
    kernel: int = 1
    height: int = 1
    width: int = 1

    def __post_init__(self):
        for name in ("batch", "in_channels", "out_channels", "kernel", "height", "width"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"Workload {name} must be at least 1, got {getattr(self, name)}")

    @property
    def is_dense(self) -> bool:
        return self.kernel == 1 and self.height == 1 and self.width == 1


def arithmetic_intensity(w: WorkloadShape) -> float:
    """B m n k^2 H W / (m n k^2 + B m H W)."""
    weights = w.in_channels * w.out_channels * w.kernel ** 2
    activations = w.batch * w.in_channels * w.height * w.width
    return w.batch * weights * w.height * w.width / (weights + activations)


@dataclass(frozen=True)
class LayerStack:
    stack_id: str
    l_beg: int
    l_end: int
    workload: WorkloadShape

    def __post_init__(self):
        if self.l_beg < 1 or self.l_end < self.l_beg:
            raise InvalidInput(f"Invalid layer range [{self.l_beg}, {self.l_end}] for {self.stack_id}")

    @property
    def size(self) -> int:
        return self.l_end - self.l_beg + 1


class WallClock:
    """Real time; layers are actually executed."""
    executes = True

    def now(self) -> float:
        return time.perf_counter()

    def charge(self, layers: Sequence[Layer], input_shape: Tuple[int, ...], batch: int) -> None:
        return None


class RooflineClock:
    """Simulated time of a machine with a fixed MAC rate and memory balance.

    A layer stage costs max(MACs, elements * machine_balance) / peak, three
    times over for forward plus backward. ``machine_balance=0`` is a clock
    proportional to FLOPs.
    """
    executes = False

    def __init__(self, peak_macs_per_s: float = 1.0e12, machine_balance: float = 512.0):
        if peak_macs_per_s <= 0 or machine_balance < 0:
            raise InvalidInput("Roofline clock needs a positive peak and a non-negative balance")
        self.peak_macs_per_s = float(peak_macs_per_s)
        self.machine_balance = float(machine_balance)
        self._elapsed = 0.0

    def now(self) -> float:
        return self._elapsed

    def cost(self, layers: Sequence[Layer], input_shape: Tuple[int, ...], batch: int) -> float:
        seconds = 0.0
        shape = tuple(input_shape)
        for layer in layers:
            for macs, elements in layer.cost_terms(shape, batch):
                seconds += 3.0 * max(float(macs), float(elements) * self.machine_balance) / self.peak_macs_per_s
            shape = layer.output_shape(shape)
        return seconds

    def charge(self, layers, input_shape, batch) -> None:
        self._elapsed += self.cost(layers, input_shape, batch)


class CountingClock:
    """Advances one unit per charged iteration."""
    executes = False

    def __init__(self):
        self.ticks = 0

    def now(self) -> float:
        return float(self.ticks)

    def charge(self, layers, input_shape, batch) -> None:
        self.ticks += 1


@dataclass
class ProfilerConfig:
    tau: int = 11
    rho_bar: float = 0.25
    upsilon: float = 1.5
    clock: object = None

    def __post_init__(self):
        if self.tau < 2:
            raise InvalidInput(f"tau must be at least 2, got {self.tau}")
        if not 0.0 < self.rho_bar <= 1.0:
            raise InvalidInput(f"rho_bar must lie in (0, 1], got {self.rho_bar}")
        if self.upsilon <= 1.0:
            raise InvalidInput(f"upsilon must exceed 1, got {self.upsilon}")
        if self.clock is None:
            self.clock = WallClock()

    @classmethod
    def from_settings(cls, profiler: ProfilerSettings, clock=None) -> "ProfilerConfig":
        if clock is None:
            # Imported here: app.dependencies resolves clocks from this module.
            from app.dependencies import get_clock
            clock = get_clock(profiler.clock)
        return cls(tau=profiler.tau, rho_bar=profiler.rho_bar, upsilon=profiler.upsilon, clock=clock)


def profiling_rank(full_rank: int, rho_bar: float) -> int:
    return max(1, min(full_rank, round_half_up(rho_bar * full_rank)))


def stack_layers(stack: LayerStack, seed: int = 0) -> Tuple[List[Layer], Tuple[int, ...]]:
    """Stand-alone full-rank layers for ``stack`` and their per-sample input shape."""
    w = stack.workload
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    for offset in range(stack.size):
        m = w.in_channels if offset == 0 else w.out_channels
        layer_id = f"{stack.stack_id}.{stack.l_beg + offset}"
        if w.is_dense:
            layers.append(DenseLayer(layer_id, he_normal(rng, (m, w.out_channels), m), np.zeros(w.out_channels)))
        else:
            kernel = he_normal(rng, (w.out_channels, m, w.kernel, w.kernel), m * w.kernel ** 2)
            layers.append(ConvLayer(layer_id, kernel, np.zeros(w.out_channels), w.kernel // 2))
    if w.is_dense:
        return layers, (w.in_channels,)
    return layers, (w.in_channels, w.height, w.width)


def _low_rank_variant(layers: Sequence[Layer], rho_bar: float) -> List[Layer]:
    return [factorize_layer(layer, profiling_rank(min(layer.weight_matrix().shape), rho_bar)) for layer in layers]


def _time_iterations(layers: Sequence[Layer], input_shape: Tuple[int, ...], batch: int,
                     config: ProfilerConfig) -> float:
    clock = config.clock
    x = None
    if clock.executes:
        x = np.random.default_rng(0).standard_normal((batch,) + tuple(input_shape))
    durations = []
    for _ in range(config.tau):
        start = clock.now()
        if clock.executes:
            out = x
            caches = []
            for layer in layers:
                out, cache = layer.forward(out)
                caches.append(cache)
            grad = np.ones_like(out)
            for layer, cache in zip(reversed(layers), reversed(caches)):
                grad, _ = layer.backward(grad, cache)
        clock.charge(layers, input_shape, batch)
        durations.append(clock.now() - start)
    # The first iteration is warm-up.
    return float(np.mean(durations[1:]))


def stack_variant(model: Network, stack: LayerStack, rho_bar: float) -> Network:
    """``model`` with only the layers of ``stack`` factorized at the profiling rank."""
    if stack.l_end >= model.depth:
        raise ProfileError(f"Stack {stack.stack_id} reaches layer {stack.l_end} of a {model.depth}-layer model")
    selected = [layer for index, layer in model.weight_layers() if stack.l_beg <= index <= stack.l_end]
    return model.replace({layer.layer_id: layer for layer in _low_rank_variant(selected, rho_bar)})


def benchmark_stack(model: Optional[Network], stack: LayerStack, config: ProfilerConfig) -> Tuple[float, float]:
    """(mean full-rank seconds, mean factorized seconds) per training iteration.

    With a model both numbers time the whole network, so the layers outside
    ``stack`` count towards the speedup.
    """
    try:
        if model is not None:
            full_layers, input_shape = list(model.layers), model.input_shape
            low_layers = list(stack_variant(model, stack, config.rho_bar).layers)
        else:
            full_layers, input_shape = stack_layers(stack)
            low_layers = _low_rank_variant(full_layers, config.rho_bar)
        avg_full = _time_iterations(full_layers, input_shape, stack.workload.batch, config)
        avg_low = _time_iterations(low_layers, input_shape, stack.workload.batch, config)
    except ProfileError:
        raise
    except Exception as e:
        logger.error(f"Profiling stack {stack.stack_id} failed: {e}")
        raise ProfileError(f"Forward pass failed on stack {stack.stack_id}: {e}") from e
    logger.debug(f"Stack {stack.stack_id}: full {avg_full:.6g}s, low-rank {avg_low:.6g}s")
    return avg_full, avg_low


def default_stacks(model: Network, batch: int) -> List[LayerStack]:
    """One stack per contiguous run of factorizable layers with the same output width and input size."""
    shapes = model.input_shapes()
    depth = model.depth
    stacks: List[LayerStack] = []
    run: List[Tuple[int, Layer, tuple]] = []

    def close_run():
        if not run:
            return
        first_index, first, key = run[0]
        in_shape = shapes[first.layer_id]
        if first.kind == "conv":
            workload = WorkloadShape(batch, in_shape[0], key[1], key[2], in_shape[1], in_shape[2])
        else:
            workload = WorkloadShape(batch, in_shape[0], key[1])
        stacks.append(LayerStack(f"stack{len(stacks) + 1}", first_index, run[-1][0], workload))
        run.clear()

    for index, layer in model.weight_layers():
        if index == 1 or index == depth:
            continue
        in_shape = shapes[layer.layer_id]
        width = layer.weight_matrix().shape[1]
        kernel = getattr(layer, "kernel_size", 1)
        key = (layer.kind, width, kernel, tuple(in_shape[1:]))
        if run and (run[-1][2] != key or run[-1][0] != index - 1):
            close_run()
        run.append((index, layer, key))
    close_run()
    return stacks


def profile(model: Optional[Network], stacks: Sequence[LayerStack], config: ProfilerConfig) -> ProfileReport:
    """Time every stack and pick K_hat by excluding the leading stacks that fail the speedup test."""
    if not stacks:
        raise ProfileError("No layer stacks to profile")
    if not _profiling_lock.acquire(blocking=False):
        raise ProfileError("Profiling is already running in this process")
    try:
        k_hat = 1
        deciding = True
        timings = []
        for stack in stacks:
            avg_full, avg_low = benchmark_stack(model, stack, config)
            speedup = avg_full / avg_low if avg_low > 0 else float("inf")
            passed = avg_full > config.upsilon * avg_low
            if deciding:
                if passed:
                    deciding = False
                else:
                    k_hat = stack.l_end
            timings.append(StackTiming(id=stack.stack_id, l_beg=stack.l_beg, l_end=stack.l_end,
                                       avg_full_ms=avg_full * 1000.0, avg_low_ms=avg_low * 1000.0,
                                       speedup=speedup))
    finally:
        _profiling_lock.release()
    logger.info(f"Profiling selected K_hat={k_hat} over {len(stacks)} stacks")
    return ProfileReport(stacks=timings, K_hat=k_hat, upsilon=config.upsilon,
                         rho_bar=config.rho_bar, tau=config.tau)


def select_K(model: Optional[Network], stacks: Sequence[LayerStack], config: ProfilerConfig) -> int:
    return profile(model, stacks, config).K_hat
