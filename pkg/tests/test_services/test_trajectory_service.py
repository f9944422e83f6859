from builtins import float, len, min, range
from dataclasses import replace
import math
import pytest

from app.schemas.config_schemas import StabilizationConfig
from app.services.trajectory_service import (CSV_HEADER, RankTrajectory, SwitchDetector, all_stabilized, append,
                                             derivative, detect_switch_epoch, export_csv, to_csv)
from app.utils.exceptions import NotEnoughData, OutputError, SequenceError


def make_trajectory(values, layer_id="layer2", xi=1.0, full_rank=64):
    trajectory = RankTrajectory(layer_id=layer_id, xi=xi, full_rank=full_rank)
    for epoch, value in enumerate(values):
        trajectory = append(trajectory, epoch, value)
    return trajectory


def exponential(c, a, tau, epochs):
    return [c + a * math.exp(-t / tau) for t in range(epochs)]


def replay_switch_epoch(trajectories, config):
    """Run detection over every prefix of the trajectories and return the first hit."""
    length = min(len(trajectory) for trajectory in trajectories)
    for end in range(1, length + 1):
        found = detect_switch_epoch([replace(t, values=t.values[:end]) for t in trajectories], config)
        if found is not None:
            return found
    return None


# Test append ordering
def test_append_to_empty():
    trajectory = append(RankTrajectory("layer2", 1.0, 8), 0, 5.0)
    assert len(trajectory) == 1
    assert trajectory.last_epoch == 0


def test_append_next_epoch():
    trajectory = make_trajectory([5.0] * 5)
    assert append(trajectory, 5, 4.0).last_epoch == 5


def test_append_out_of_order():
    trajectory = make_trajectory([5.0] * 5)
    with pytest.raises(SequenceError):
        append(trajectory, 3, 4.0)


def test_append_must_start_at_zero():
    with pytest.raises(SequenceError):
        append(RankTrajectory("layer2", 1.0, 8), 1, 5.0)


# Test the windowed derivative
def test_derivative_constant():
    assert derivative(make_trajectory([50.0] * 4), 3) == 0.0


def test_derivative_unit_slope():
    assert derivative(make_trajectory([10.0, 9.0, 8.0, 7.0]), 3) == 1.0


def test_derivative_exponential_closed_form():
    values = exponential(30.0, 20.0, 5.0, 20)
    expected = sum(abs(values[t] - values[t - 1]) for t in (17, 18, 19)) / 3
    assert derivative(make_trajectory(values), 3) == pytest.approx(expected, rel=1e-12)


def test_derivative_needs_history():
    with pytest.raises(NotEnoughData):
        derivative(make_trajectory([1.0, 2.0, 3.0]), 3)


# Test the stabilization predicate
def test_all_stabilized_constant():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    assert all_stabilized([make_trajectory([40.0] * 6)], config)


def test_all_stabilized_one_layer_falling():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    trajectories = [make_trajectory([40.0] * 6, "layer2"), make_trajectory([40.0 - t for t in range(6)], "layer3")]
    assert not all_stabilized(trajectories, config)


def test_all_stabilized_too_short():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    with pytest.raises(NotEnoughData):
        all_stabilized([make_trajectory([40.0] * 4)], config)


# Test switch-epoch detection
def test_detect_constant_sequence():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    assert replay_switch_epoch([make_trajectory([12.0] * 10)], config) == 5


def test_detect_infinite_threshold_returns_min_epochs():
    config = StabilizationConfig(epsilon=float("inf"), window=3, min_epochs=5)
    values = [100.0 - 7.0 * t for t in range(12)]
    assert replay_switch_epoch([make_trajectory(values)], config) == 5


def test_detect_never_stabilizes():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    values = [100.0 - t for t in range(30)]
    assert detect_switch_epoch([make_trajectory(values)], config) is None
    assert replay_switch_epoch([make_trajectory(values)], config) is None


def test_detect_empty():
    assert detect_switch_epoch([], StabilizationConfig()) is None


EXPONENTIAL_SETTINGS = [(20.0, 2.0), (50.0, 5.0), (10.0, 1.0), (80.0, 8.0), (5.0, 3.0)]


def first_passing_epoch(values, config):
    """Per-entry scan of the windowed rule."""
    required = max(config.min_epochs, config.window + 1)
    for t in range(len(values)):
        if t + 1 < required:
            continue
        tail = values[t - config.window:t + 1]
        slope = sum(abs(b - a) for a, b in zip(tail[:-1], tail[1:])) / config.window
        if slope <= config.epsilon:
            return t + 1
    return None


@pytest.mark.parametrize("a, tau", EXPONENTIAL_SETTINGS)
def test_detector_matches_scan(a, tau):
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    values = exponential(30.0, a, tau, 60)
    trajectory = make_trajectory(values)
    detector = SwitchDetector(config)
    detected = None
    for end in range(1, len(values) + 1):
        detected = detector.update([make_trajectory(values[:end])])
        if detected is not None:
            break
    assert detected == first_passing_epoch(values, config)
    assert replay_switch_epoch([trajectory], config) == detected


def test_switch_epoch_is_max_over_layers():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    layers = [exponential(30.0, a, tau, 60) for a, tau in EXPONENTIAL_SETTINGS]
    trajectories = [make_trajectory(values, f"layer{i + 2}") for i, values in enumerate(layers)]
    individual = [first_passing_epoch(values, config) for values in layers]
    # Exponentials decay monotonically, so a layer stays stable once it has passed.
    assert replay_switch_epoch(trajectories, config) == max(individual)


@pytest.mark.parametrize("a, tau", EXPONENTIAL_SETTINGS)
def test_detection_monotone_in_epsilon(a, tau):
    trajectory = make_trajectory(exponential(30.0, a, tau, 80))
    results = []
    for epsilon in (0.01, 0.1, 1.0, float("inf")):
        config = StabilizationConfig(epsilon=epsilon, window=3, min_epochs=5)
        found = replay_switch_epoch([trajectory], config)
        results.append(math.inf if found is None else found)
    assert results == sorted(results, reverse=True)


def test_detector_keeps_first_detection():
    config = StabilizationConfig(epsilon=0.1, window=3, min_epochs=5)
    detector = SwitchDetector(config)
    assert detector.update([make_trajectory([12.0] * 5)]) == 5
    assert detector.update([make_trajectory([12.0] * 9)]) == 5


# Test CSV export
def test_csv_layout(tmp_path):
    trajectories = {
        "layer2": make_trajectory([4.0, 2.0], "layer2", xi=2.0, full_rank=8),
        "layer3": make_trajectory([3.0, 3.0], "layer3", xi=1.0, full_rank=4),
    }
    text = to_csv(trajectories)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "0,layer2,4.0,8.0,1.0"
    assert lines[2] == "0,layer3,3.0,3.0,0.75"
    assert lines[3] == "1,layer2,2.0,4.0,0.5"
    path = export_csv(trajectories, tmp_path / "trajectories.csv")
    assert path.read_text(encoding="utf-8") == text


def test_export_csv_into_missing_directory(tmp_path):
    with pytest.raises(OutputError):
        export_csv([make_trajectory([4.0, 3.0])], tmp_path / "absent" / "trajectories.csv")
