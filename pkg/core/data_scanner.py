import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from core.camera import Pose
from core.loader import load_image_grid
from utils.errors import InvalidDatasetError, SchemaVersionError, StorageError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SUPPORTED_SCHEMA = 1
_REQUIRED = ("id", "file", "class_id", "pose", "level", "nuisances", "occlusion_ratio", "seed", "split")


def load_manifest(data_dir: str) -> Dict:
    """Read and check data_dir/manifest.json.

    Returns the manifest dict; records missing required fields are skipped
    with a warning, like invalid filenames in a raw-data scan.
    """
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise StorageError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e

    version = manifest.get("schema_version")
    if version != SUPPORTED_SCHEMA:
        raise SchemaVersionError(f"{path}: manifest schema {version}, expected {SUPPORTED_SCHEMA}")

    valid: List[Dict] = []
    skipped = 0
    for rec in manifest.get("records", []):
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            skipped += 1
            logger.warning("[Skipped_Invalid_Record] %s missing %s", rec.get("id", "?"), missing)
            continue
        valid.append(rec)
    manifest["records"] = valid
    logger.info("Manifest %s: %d records (%d skipped)", path, len(valid), skipped)
    return manifest


def select_records(
    manifest: Dict,
    split: Optional[str] = None,
    levels: Optional[Iterable[str]] = None,
) -> List[Dict]:
    """Filter manifest records by split ("train"/"eval"/"all") and occlusion level."""
    records = manifest["records"]
    if split and split != "all":
        records = [r for r in records if r["split"] == split]
    if levels is not None:
        wanted = set(levels)
        records = [r for r in records if r["level"] in wanted]
    return records


def record_pose(record: Dict) -> Pose:
    return Pose.from_dict(record["pose"])


def load_record_image(data_dir: str, record: Dict) -> np.ndarray:
    return load_image_grid(Path(data_dir) / record["file"])


def _load_mask(data_dir: str, record: Dict, key: str) -> np.ndarray:
    if key not in record:
        raise InvalidDatasetError(f"record {record.get('id', '?')} has no {key}")
    path = Path(data_dir) / record[key]
    try:
        return np.load(path)
    except OSError as e:
        raise StorageError(f"cannot read mask {path}: {e}") from e


def load_occluder_mask(data_dir: str, record: Dict) -> np.ndarray:
    return _load_mask(data_dir, record, "mask_file")


def load_fg_mask(data_dir: str, record: Dict) -> np.ndarray:
    """Object foreground at input resolution (the denominator of occlusion_ratio)."""
    return _load_mask(data_dir, record, "fg_mask_file")


def records_frame(records: List[Dict]) -> pd.DataFrame:
    """Flat table of record metadata (one row per scene) for grouping in reports."""
    rows = []
    for r in records:
        rows.append(
            {
                "id": r["id"],
                "class_id": int(r["class_id"]),
                "level": r["level"],
                "nuisance": "+".join(r["nuisances"]) if r["nuisances"] else "none",
                "split": r["split"],
                "occlusion_ratio": float(r["occlusion_ratio"]),
                **{f"pose_{k}": float(v) for k, v in r["pose"].items()},
            }
        )
    return pd.DataFrame(rows)


def class_counts(records: List[Dict], n_classes: int) -> Tuple[List[int], List[int]]:
    """(per-class counts, missing class ids)."""
    counts = [0] * n_classes
    for r in records:
        cid = int(r["class_id"])
        if not 0 <= cid < n_classes:
            raise InvalidDatasetError(f"record {r['id']}: class_id {cid} outside [0, {n_classes})")
        counts[cid] += 1
    return counts, [y for y, n in enumerate(counts) if n == 0]
