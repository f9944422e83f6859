"""CFSNAP01 weight snapshots and offline rank analysis.

Layout (little-endian): magic ``CFSNAP01``, epoch u64, record count u32,
then per record: name length u16, utf-8 name, kind u8 (0 dense, 1 conv),
dim count u8, dims u32 each, float64 payload.
"""
from builtins import OSError, bytes, enumerate, int, len, min, range, sorted, str
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union
import logging
import re
import struct
import numpy as np

from app.models.network_model import Network
from app.models.tensor_model import TensorKind
from app.schemas.config_schemas import RankEstimatorConfig, StabilizationConfig
from app.schemas.plan_schema import FactorizationPlan
from app.services.factorization_service import rank_plan, spectral_factorize
from app.services.rank_service import scale_factor, stable_rank
from app.services.spectral_service import singular_values
from app.services.trajectory_service import RankTrajectory, SwitchDetector, append, export_csv
from app.utils import conv_ops
from app.utils.exceptions import FormatError, InvalidInput, OutputError, PlanError, SequenceError

logger = logging.getLogger(__name__)

MAGIC = b"CFSNAP01"
SNAPSHOT_PATTERN = re.compile(r"^epoch_(\d+)\.cfsnap$")
_KIND_CODES = {TensorKind.DENSE: 0, TensorKind.CONV: 1}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}

Tensors = Dict[str, Tuple[TensorKind, np.ndarray]]


def snapshot_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.cfsnap"


def encode_snapshot(epoch: int, tensors: Mapping[str, Tuple[TensorKind, np.ndarray]]) -> bytes:
    if epoch < 0:
        raise InvalidInput(f"Epoch must be non-negative, got {epoch}")
    parts = [MAGIC, struct.pack("<QI", epoch, len(tensors))]
    for name, (kind, data) in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(data, dtype="<f8")
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise InvalidInput(f"Record {name} cannot be encoded")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _KIND_CODES[TensorKind(kind)], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def write_snapshot(path: Union[str, Path], epoch: int, tensors: Mapping[str, Tuple[TensorKind, np.ndarray]]) -> Path:
    path = Path(path)
    payload = encode_snapshot(epoch, tensors)
    try:
        path.write_bytes(payload)
    except OSError as e:
        logger.error(f"Could not write snapshot {path}: {e}")
        raise OutputError(f"Cannot write snapshot {path}: {e}") from e
    logger.debug(f"Wrote snapshot {path} ({len(tensors)} records, {len(payload)} bytes)")
    return path


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk


def decode_snapshot(data: bytes, source: str = "<bytes>") -> Tuple[int, Tensors]:
    reader = _Reader(data, source)
    if len(data) < len(MAGIC) or reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{source}: not a CFSNAP01 file (bad magic)")
    epoch, count = struct.unpack("<QI", reader.take(12, "header"))
    tensors: Tensors = {}
    for index in range(count):
        (name_length,) = struct.unpack("<H", reader.take(2, f"record {index} name length"))
        try:
            name = reader.take(name_length, f"record {index} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: record {index} has an invalid utf-8 name") from e
        if name in tensors:
            raise FormatError(f"{source}: duplicate record {name}")
        code, ndim = struct.unpack("<BB", reader.take(2, f"record {name} kind"))
        if code not in _CODE_KINDS:
            raise FormatError(f"{source}: record {name} has unknown kind {code}")
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"record {name} dims"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = reader.take(8 * size, f"record {name} payload")
        array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = (_CODE_KINDS[code], array)
    if reader.offset != len(data):
        raise FormatError(f"{source}: {len(data) - reader.offset} trailing bytes")
    return int(epoch), tensors


def read_snapshot(path: Union[str, Path]) -> Tuple[int, Tensors]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"Could not read snapshot {path}: {e}")
        raise FormatError(f"Cannot read snapshot {path}: {e}") from e
    return decode_snapshot(data, str(path))


def network_tensors(model: Network) -> Tensors:
    """Snapshot records for ``model``: weights, factor pairs and biases in layer order."""
    tensors: Tensors = {}
    for _, layer in model.weight_layers():
        params = layer.parameters()
        if layer.low_rank:
            tensors[f"{layer.layer_id}.u"] = (TensorKind.DENSE, params["u"])
            tensors[f"{layer.layer_id}.v_t"] = (TensorKind.DENSE, params["v_t"])
        else:
            tensors[f"{layer.layer_id}.weight"] = (layer.tensor_kind, params["weight"])
        tensors[f"{layer.layer_id}.bias"] = (TensorKind.DENSE, params["bias"])
    return tensors


def snapshot_matrices(tensors: Tensors) -> List[Tuple[str, np.ndarray]]:
    """(layer id, unrolled weight matrix) for every full-rank weight record, in file order."""
    matrices = []
    for name, (kind, data) in tensors.items():
        if not name.endswith(".weight"):
            continue
        layer_id = name[:-len(".weight")]
        matrix = conv_ops.unroll_kernel(data) if kind is TensorKind.CONV else data
        matrices.append((layer_id, matrix))
    return matrices


def list_snapshots(directory: Union[str, Path]) -> List[Tuple[int, Path]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"Snapshot directory {directory} does not exist")
    found = []
    for path in directory.iterdir():
        match = SNAPSHOT_PATTERN.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return sorted(found)


@dataclass
class AnalysisResult:
    trajectories: Dict[str, RankTrajectory]
    switch_epoch: Optional[int]
    plan: Optional[FactorizationPlan]


def analyze_snapshots(directory: Union[str, Path], estimator: RankEstimatorConfig,
                      stabilization: StabilizationConfig, K: int = 1) -> AnalysisResult:
    """Rebuild trajectories from epoch_XXXX snapshots and, once stabilized, the plan."""
    snapshots = list_snapshots(directory)
    if not snapshots:
        raise FormatError(f"No snapshots found in {directory}")
    trajectories: Dict[str, RankTrajectory] = {}
    spectra_by_epoch: Dict[int, Dict[str, np.ndarray]] = {}
    shapes: Dict[str, Tuple[int, int]] = {}
    order: List[str] = []
    detector = SwitchDetector(stabilization)
    for expected, (epoch_in_name, path) in enumerate(snapshots):
        epoch, tensors = read_snapshot(path)
        if epoch != epoch_in_name:
            raise FormatError(f"{path}: header epoch {epoch} does not match the file name")
        if epoch != expected:
            raise SequenceError(f"Snapshot epochs must be consecutive from 0, expected {expected} got {epoch}")
        matrices = snapshot_matrices(tensors)
        if epoch == 0:
            order = [layer_id for layer_id, _ in matrices]
            for layer_id, matrix in matrices:
                spectrum = singular_values(matrix)
                full_rank = min(matrix.shape)
                xi = scale_factor(spectrum, full_rank, layer_id).xi
                trajectories[layer_id] = RankTrajectory(layer_id=layer_id, xi=xi, full_rank=full_rank)
                shapes[layer_id] = matrix.shape
        elif [layer_id for layer_id, _ in matrices] != order:
            raise FormatError(f"{path}: layer records differ from epoch 0")
        spectra = {layer_id: singular_values(matrix) for layer_id, matrix in matrices}
        spectra_by_epoch[epoch] = spectra
        for layer_id in order:
            trajectories[layer_id] = append(trajectories[layer_id], epoch, stable_rank(spectra[layer_id]))
        candidates = order[K:-1]
        detector.update([trajectories[layer_id] for layer_id in candidates])

    switch_epoch = detector.switch_epoch
    last_epoch = len(snapshots) - 1
    if switch_epoch == last_epoch + 1:
        # Detection on the last entry: training switches at its final epoch, which is that entry.
        logger.info(f"Switch epoch {switch_epoch} is past the last snapshot, capped at {last_epoch}")
        switch_epoch = last_epoch
    plan = None
    if switch_epoch is None:
        logger.warning(f"Stable ranks did not converge over {len(snapshots)} snapshots")
    else:
        candidates = [(layer_id, shapes[layer_id]) for layer_id in order[K:-1]]
        plan = rank_plan(candidates, spectra_by_epoch[switch_epoch], trajectories, K, estimator, switch_epoch)
    return AnalysisResult(trajectories=trajectories, switch_epoch=switch_epoch, plan=plan)


def write_analysis(result: AnalysisResult, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Could not create {out_dir}: {e}")
        raise OutputError(f"Cannot create output directory {out_dir}: {e}") from e
    written = [export_csv(result.trajectories, out_dir / "trajectories.csv")]
    if result.plan is not None:
        plan_path = out_dir / "plan.json"
        try:
            plan_path.write_text(result.plan.to_json(), encoding="utf-8")
        except OSError as e:
            logger.error(f"Could not write plan {plan_path}: {e}")
            raise OutputError(f"Cannot write plan {plan_path}: {e}") from e
        written.append(plan_path)
    return written


def factorize_snapshot(tensors: Tensors, plan: FactorizationPlan) -> Tensors:
    """Apply ``plan`` to snapshot records: planned layers become ``.u``/``.v_t`` records."""
    order = [layer_id for layer_id, _ in snapshot_matrices(tensors)]
    depth = len(order)
    planned = {}
    for entry in plan.ranks:
        if entry.layer not in order:
            raise PlanError(f"Plan names layer {entry.layer}, which has no weight record in the snapshot")
        index = order.index(entry.layer) + 1
        if index <= plan.K or index >= depth:
            raise PlanError(f"Layer {entry.layer} (index {index}) may not be factorized with K={plan.K}")
        if not entry.skip:
            planned[entry.layer] = entry.rank
    result: Tensors = {}
    for name, (kind, data) in tensors.items():
        layer_id = name[:-len(".weight")] if name.endswith(".weight") else None
        if layer_id not in planned:
            result[name] = (kind, data)
            continue
        matrix = conv_ops.unroll_kernel(data) if kind is TensorKind.CONV else data
        if planned[layer_id] > min(matrix.shape):
            raise PlanError(f"Layer {layer_id}: rank {planned[layer_id]} exceeds its full rank {min(matrix.shape)}")
        pair = spectral_factorize(matrix, planned[layer_id])
        result[f"{layer_id}.u"] = (TensorKind.DENSE, pair.u)
        result[f"{layer_id}.v_t"] = (TensorKind.DENSE, pair.v_t)
    logger.info(f"Factorized {len(planned)} snapshot layers")
    return result
