"""
loader.py
=========
외관 이미지 격자(H'×W'×c_in)를 이진 파일로 저장/로드하는 모듈.

주요 기능:
- 20바이트 헤더: magic, version, H', W', c_in (모두 u32), little-endian
- 페이로드: float32 row-major
- 헤더 불일치는 SchemaVersionError, 파일 I/O 실패는 경로를 포함한 StorageError
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from utils.errors import InvalidArgumentError, SchemaVersionError, StorageError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x47494352  # b"RCIG" little-endian
IMAGE_VERSION = 1
IMAGE_SUFFIX = ".rcimg"

_HEADER = np.dtype(
    [("magic", "<u4"), ("version", "<u4"), ("height", "<u4"), ("width", "<u4"), ("channels", "<u4")]
)


def save_image_grid(file_path: Union[str, Path], image: np.ndarray) -> Path:
    """
    이미지 격자를 헤더 + float32 페이로드로 저장.

    Parameters
    ----------
    file_path : str or Path
        저장 경로.
    image : np.ndarray
        (H', W', c_in) 유한값 배열.

    Returns
    -------
    Path
        저장된 경로.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidArgumentError(f"image grid must be 3-D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InvalidArgumentError(f"image grid for {file_path} has non-finite entries")
    file_path = Path(file_path)
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = IMAGE_MAGIC
    header["version"] = IMAGE_VERSION
    header["height"], header["width"], header["channels"] = image.shape
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write image grid {file_path}: {e}") from e
    return file_path


def load_image_grid(file_path: Union[str, Path]) -> np.ndarray:
    """저장된 이미지 격자를 (H', W', c_in) float64 배열로 로드."""
    file_path = Path(file_path)
    try:
        raw = file_path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read image grid {file_path}: {e}") from e

    if len(raw) < _HEADER.itemsize:
        raise SchemaVersionError(f"{file_path}: truncated header ({len(raw)} bytes)")
    header = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if int(header["magic"]) != IMAGE_MAGIC:
        raise SchemaVersionError(f"{file_path}: bad magic 0x{int(header['magic']):08x}")
    if int(header["version"]) != IMAGE_VERSION:
        raise SchemaVersionError(
            f"{file_path}: image format version {int(header['version'])}, expected {IMAGE_VERSION}"
        )
    shape = (int(header["height"]), int(header["width"]), int(header["channels"]))
    payload = np.frombuffer(raw[_HEADER.itemsize :], dtype="<f4")
    if payload.size != int(np.prod(shape)):
        raise SchemaVersionError(
            f"{file_path}: payload has {payload.size} values, header says {shape}"
        )
    logger.debug(f"이미지 로드: {file_path.name} {shape}")
    return payload.reshape(shape).astype(np.float64)
