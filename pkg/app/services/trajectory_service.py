"""Per-layer stable-rank trajectories and the rank-stabilization test.

A trajectory holds the unscaled stable rank of one layer after every
full-rank epoch (entry 0 is the initial weights). The switch epoch is the
epoch after the first one at which every tracked layer's windowed derivative
is at most epsilon.
"""
from builtins import OSError, abs, bool, float, int, len, list, min, str, sum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union
import csv
import io
import logging

from app.schemas.config_schemas import StabilizationConfig
from app.services.rank_service import rank_ratio, round_half_up
from app.utils.exceptions import NotEnoughData, OutputError, SequenceError

logger = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "layer", "stable_rank", "scaled_stable_rank", "rank_ratio"]


@dataclass(frozen=True)
class RankTrajectory:
    layer_id: str
    xi: float
    full_rank: int
    values: Tuple[Tuple[int, float], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def last_epoch(self) -> Optional[int]:
        return self.values[-1][0] if self.values else None

    @property
    def ranks(self) -> List[float]:
        return [rank for _, rank in self.values]

    def scaled(self, stable: float) -> float:
        return min(self.xi * stable, float(self.full_rank))


def append(trajectory: RankTrajectory, epoch: int, stable_rank: float) -> RankTrajectory:
    expected = 0 if trajectory.last_epoch is None else trajectory.last_epoch + 1
    if epoch != expected:
        raise SequenceError(f"Layer {trajectory.layer_id}: expected epoch {expected}, got {epoch}")
    return replace(trajectory, values=trajectory.values + ((epoch, float(stable_rank)),))


def derivative(trajectory: RankTrajectory, window: int) -> float:
    """Mean absolute one-step change of the stable rank over the last ``window`` epochs."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(trajectory) < window + 1:
        raise NotEnoughData(
            f"Layer {trajectory.layer_id} has {len(trajectory)} entries, {window + 1} needed")
    tail = trajectory.ranks[-(window + 1):]
    return sum(abs(b - a) for a, b in zip(tail[:-1], tail[1:])) / window


def _as_list(trajectories) -> List[RankTrajectory]:
    if isinstance(trajectories, dict):
        return list(trajectories.values())
    return list(trajectories)


def all_stabilized(trajectories: Iterable[RankTrajectory], config: StabilizationConfig) -> bool:
    tracked = _as_list(trajectories)
    required = max(config.min_epochs, config.window + 1)
    for trajectory in tracked:
        if len(trajectory) < required:
            raise NotEnoughData(
                f"Layer {trajectory.layer_id} has {len(trajectory)} entries, {required} needed")
    return all(derivative(trajectory, config.window) <= config.epsilon for trajectory in tracked)


def detect_switch_epoch(trajectories: Iterable[RankTrajectory], config: StabilizationConfig) -> Optional[int]:
    """Return t + 1 when the trajectories (last epoch t) pass the stabilization test."""
    tracked = _as_list(trajectories)
    if not tracked:
        return None
    try:
        if not all_stabilized(tracked, config):
            return None
    except NotEnoughData:
        return None
    return min(trajectory.last_epoch for trajectory in tracked) + 1


class SwitchDetector:
    """Stateful wrapper around detect_switch_epoch; keeps the first detection."""

    def __init__(self, config: StabilizationConfig):
        self.config = config
        self.switch_epoch: Optional[int] = None

    def update(self, trajectories: Iterable[RankTrajectory]) -> Optional[int]:
        if self.switch_epoch is None:
            self.switch_epoch = detect_switch_epoch(trajectories, self.config)
            if self.switch_epoch is not None:
                logger.info(f"Stable ranks converged, switch epoch {self.switch_epoch}")
        return self.switch_epoch


def csv_rows(trajectories: Union[Dict[str, RankTrajectory], Iterable[RankTrajectory]]) -> List[List[str]]:
    tracked = _as_list(trajectories)
    epochs = sorted({epoch for trajectory in tracked for epoch, _ in trajectory.values})
    by_layer = {trajectory.layer_id: dict(trajectory.values) for trajectory in tracked}
    rows = []
    for epoch in epochs:
        for trajectory in tracked:
            stable = by_layer[trajectory.layer_id].get(epoch)
            if stable is None:
                continue
            scaled = trajectory.scaled(stable)
            rank = max(1, min(round_half_up(scaled), trajectory.full_rank))
            rows.append([str(epoch), trajectory.layer_id, repr(stable), repr(scaled),
                         repr(rank_ratio(rank, trajectory.full_rank))])
    return rows


def to_csv(trajectories) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(csv_rows(trajectories))
    return buffer.getvalue()


def export_csv(trajectories, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.write_text(to_csv(trajectories), encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not write trajectories {path}: {e}")
        raise OutputError(f"Cannot write trajectories {path}: {e}") from e
    logger.info(f"Wrote rank trajectories to {path}")
    return path
