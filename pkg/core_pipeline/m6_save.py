# 📜 core_pipeline/m6_save.py
# 모듈 6: 학습/추론 산출물 저장 및 로드
#
# - 모델 파일(*.rcnb): int32 LE 헤더 {magic, version, Y, R_0..R_{Y-1}, c}
#   → 클래스별 정점(R×3), 텍스처(R×c) float32 → 배경 평균(c), σ
#   → 추출기 블록 int32 {c_in, stride, smoothing, normalize} + weight(c_in×c), bias(c) float32
# - 헤드 파일(*.rcnh): int32 LE {magic, version, Y, P, d, n_az, n_el, n_th}
#   → float32 {고도 band(2), 면내회전 band(2), class W/b, pose W/b, 온도 2개}
# - 추론 로그: JSON Lines (키 정렬, schema_version 포함), 실행 메타데이터는 별도 파일
# - 손실 trace: CSV (epoch, L_con, L_class, L_joint)

import json
import logging
import platform
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd

from core.camera import PoseGridSpec
from core.mesh import FORMAT_VERSION, BackgroundModel, ModelBank, NeuralMeshModel, dims_from_vertices
from core_pipeline.m3_heads import FeedForwardHeads
from features.extractor import FeatureExtractor
from utils.errors import SchemaVersionError, StorageError

logger = logging.getLogger(__name__)

BANK_MAGIC = 0x52434E42  # "RCNB"
HEADS_MAGIC = 0x52434E48  # "RCNH"
HEADS_VERSION = 1
LOG_SCHEMA_VERSION = 1


class _Reader:
    """바이트 버퍼를 순서대로 읽는 도우미 (길이 부족 시 SchemaVersionError)."""

    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.raw):
            raise SchemaVersionError(f"{self.path}: file truncated at byte {self.offset}")
        out = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out

    def done(self) -> None:
        if self.offset != len(self.raw):
            raise SchemaVersionError(f"{self.path}: {len(self.raw) - self.offset} trailing bytes")


def _i32(*values) -> bytes:
    return np.asarray(values, dtype="<i4").tobytes()


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _check_target(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise StorageError(f"{path} already exists (use --force to overwrite)")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create directory {path.parent}: {e}") from e


def _write(path: Path, payload: bytes) -> None:
    try:
        path.write_bytes(payload)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e


# ===== ModelBank =====
def save_bank(file_path: Union[str, Path], bank: ModelBank, force: bool = False) -> Path:
    """
    ModelBank 를 버전이 있는 이진 모델 파일로 저장합니다.

    Args:
        file_path: 저장 경로 (*.rcnb)
        bank: 저장할 모델 뱅크
        force: 기존 파일 덮어쓰기 허용

    Raises:
        StorageError: 파일이 이미 있거나(force=False) 쓰기 실패
    """
    path = Path(file_path)
    _check_target(path, force)
    bank.validate()
    ext = bank.extractor
    parts = [_i32(BANK_MAGIC, FORMAT_VERSION, bank.n_classes, *[m.n_vertices for m in bank.models], bank.dim)]
    for m in bank.models:
        parts.append(_f32(m.vertices))
        parts.append(_f32(m.texture))
    parts.append(_f32(bank.background.mean))
    parts.append(_f32([bank.background.sigma]))
    parts.append(_i32(ext.in_dim, ext.stride, int(ext.smoothing), int(ext.normalize)))
    parts.append(_f32(ext.weight))
    parts.append(_f32(ext.bias))
    _write(path, b"".join(parts))
    logger.info(f"[M6] 모델 저장 완료: '{path}' (클래스 {bank.n_classes}, 차원 {bank.dim})")
    return path


def load_bank(file_path: Union[str, Path]) -> ModelBank:
    """모델 파일을 읽어 ModelBank 로 복원합니다. 다른 버전은 SchemaVersionError."""
    path = Path(file_path)
    r = _Reader(_read(path), path)
    magic, version = (int(x) for x in r.take("<i4", 2))
    if magic != BANK_MAGIC:
        raise SchemaVersionError(f"{path}: not a model file (magic 0x{magic & 0xFFFFFFFF:08x})")
    if version != FORMAT_VERSION:
        raise SchemaVersionError(f"{path}: model format version {version}, expected {FORMAT_VERSION}")
    n_classes = int(r.take("<i4", 1)[0])
    counts = [int(x) for x in r.take("<i4", n_classes)]
    dim = int(r.take("<i4", 1)[0])

    models = []
    for y, count in enumerate(counts):
        vertices = r.take("<f4", count * 3).reshape(count, 3).astype(np.float64)
        texture = r.take("<f4", count * dim).reshape(count, dim).astype(np.float64)
        models.append(NeuralMeshModel(y, vertices, texture, dims_from_vertices(vertices)))
    mean = r.take("<f4", dim).astype(np.float64)
    sigma = float(r.take("<f4", 1)[0])
    c_in, stride, smoothing, normalize = (int(x) for x in r.take("<i4", 4))
    weight = r.take("<f4", c_in * dim).reshape(c_in, dim).astype(np.float64)
    bias = r.take("<f4", dim).astype(np.float64)
    r.done()

    extractor = FeatureExtractor(weight, bias, stride, bool(smoothing), bool(normalize))
    bank = ModelBank(models=models, background=BackgroundModel(mean, sigma), extractor=extractor)
    bank.validate()
    logger.info(f"[M6] 모델 로드: '{path}' (클래스 {n_classes}, 정점 {counts})")
    return bank


# ===== Heads =====
def save_heads(file_path: Union[str, Path], heads: FeedForwardHeads, force: bool = False) -> Path:
    path = Path(file_path)
    _check_target(path, force)
    heads.validate()
    g = heads.grid
    parts = [
        _i32(HEADS_MAGIC, HEADS_VERSION, heads.n_classes, heads.n_pose_bins, heads.descriptor_dim,
             g.n_azimuth, g.n_elevation, g.n_theta),
        _f32([*g.elevation_band, *g.theta_band]),
        _f32(heads.class_weight),
        _f32(heads.class_bias),
        _f32(heads.pose_weight),
        _f32(heads.pose_bias),
        _f32([heads.class_temperature, heads.pose_temperature]),
    ]
    _write(path, b"".join(parts))
    logger.info(f"[M6] 헤드 저장 완료: '{path}'")
    return path


def load_heads(file_path: Union[str, Path]) -> FeedForwardHeads:
    path = Path(file_path)
    r = _Reader(_read(path), path)
    magic, version, n_classes, n_bins, d, n_az, n_el, n_th = (int(x) for x in r.take("<i4", 8))
    if magic != HEADS_MAGIC:
        raise SchemaVersionError(f"{path}: not a heads file")
    if version != HEADS_VERSION:
        raise SchemaVersionError(f"{path}: heads format version {version}, expected {HEADS_VERSION}")
    bands = r.take("<f4", 4).astype(np.float64)
    grid = PoseGridSpec(n_az, n_el, n_th, (bands[0], bands[1]), (bands[2], bands[3]))
    heads = FeedForwardHeads(
        class_weight=r.take("<f4", d * n_classes).reshape(d, n_classes).astype(np.float64),
        class_bias=r.take("<f4", n_classes).astype(np.float64),
        pose_weight=r.take("<f4", d * n_bins).reshape(d, n_bins).astype(np.float64),
        pose_bias=r.take("<f4", n_bins).astype(np.float64),
        grid=grid,
        class_temperature=float(r.take("<f4", 1)[0]),
        pose_temperature=float(r.take("<f4", 1)[0]),
    )
    r.done()
    heads.validate()
    return heads


# ===== Logs / traces =====
def write_jsonl(file_path: Union[str, Path], records: Iterable[Dict]) -> Path:
    """레코드마다 schema_version 을 붙여 키 정렬 JSON Lines 로 저장."""
    path = Path(file_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps({**rec, "schema_version": LOG_SCHEMA_VERSION}, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write log {path}: {e}") from e
    return path


def read_jsonl(file_path: Union[str, Path]) -> List[Dict]:
    path = Path(file_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"cannot read log {path}: {e}") from e
    records = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("schema_version") != LOG_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path}:{n}: log schema {rec.get('schema_version')}, expected {LOG_SCHEMA_VERSION}"
            )
        records.append(rec)
    return records


def save_trace(file_path: Union[str, Path], trace: pd.DataFrame) -> Path:
    path = Path(file_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(path, index=False)
    except OSError as e:
        raise StorageError(f"cannot write loss trace {path}: {e}") from e
    return path


def load_trace(file_path: Union[str, Path]) -> pd.DataFrame:
    path = Path(file_path)
    try:
        return pd.read_csv(path)
    except OSError as e:
        raise StorageError(f"cannot read loss trace {path}: {e}") from e


def write_run_metadata(out_dir: Union[str, Path], command: str, extra: Dict = None) -> Path:
    """타임스탬프/버전 등 재현 대상이 아닌 정보는 run_metadata.json 에만 기록."""
    path = Path(out_dir) / "run_metadata.json"
    meta = {
        "command": command,
        "finished_at": datetime.now().isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        **(extra or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as e:
        raise StorageError(f"cannot write run metadata {path}: {e}") from e
    return path
