# 📜 analysis/m7_analyze.py
# 🔬 [모듈 7] 추론 로그 분석 및 평가 지표 생성
#
# - compute_metrics : 분류 정확도, ACC_{π/6}, ACC_{π/18}, 3D-aware 정확도, 평균 포즈 오차,
#                     비용(%) = 실행된 최적화 반복 수 / 같은 샘플에 대한 full 추론 반복 수
#                     전체 / 가림 레벨별 / nuisance 별로 집계합니다.
# - ablation_table  : staged 로그만으로 full / s1 / s1s2 / s1s2s3 변형을 재현해 비교
# - s3_recovery_rate: S2 답이 틀렸고 S3 가 방문한 샘플 중 S3 가 맞힌 비율 (보고만 함)

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core.camera import Pose, pose_error, rotation_from_pose
from core_pipeline.m4_infer import STAGE_FULL, STAGE_S1, STAGE_S2, STAGE_S3
from core_pipeline.m5_cascade import STAGE_VARIANTS, Decision, resolve_cascade
from utils.errors import InvalidArgumentError, StorageError

logger = logging.getLogger(__name__)

PI_6 = math.pi / 6.0
PI_18 = math.pi / 18.0
REPORT_COLUMNS = [
    "group", "key", "n", "accuracy", "acc_pi6", "acc_pi18", "acc_3d",
    "mean_pose_error", "cost_pct", "share_s1", "share_s2", "share_s3",
]


@dataclass
class EvalReport:
    """그룹(overall / level / nuisance)별 지표 테이블."""

    table: pd.DataFrame
    s3_recovery: Optional[float] = None

    def row(self, group: str = "overall", key: str = "all") -> pd.Series:
        hit = self.table[(self.table["group"] == group) & (self.table["key"] == key)]
        if hit.empty:
            raise InvalidArgumentError(f"no report row for {group}={key}")
        return hit.iloc[0]

    @property
    def overall(self) -> pd.Series:
        return self.row("overall", "all")

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.table.to_csv(path, index=False)
        except OSError as e:
            raise StorageError(f"cannot write report {path}: {e}") from e
        return path

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        payload = {
            "rows": [{k: _json_value(v) for k, v in row.items()} for row in self.table.to_dict(orient="records")],
            "s3_recovery": self.s3_recovery,
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        except OSError as e:
            raise StorageError(f"cannot write report {path}: {e}") from e
        return path


def _json_value(value):
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def _truth_pose(record: Dict) -> Pose:
    return Pose.from_dict(record["pose"])


def sample_frame(
    results: Sequence[Dict],
    truth: Sequence[Dict],
    reference_iterations: Optional[Mapping[str, int]] = None,
) -> pd.DataFrame:
    """
    결과 로그와 정답 레코드를 id 로 맞춰 샘플별 테이블을 만듭니다 (id 순 정렬).

    Args:
        results: 추론 로그 레코드 (id, predicted_class, rotation, stage, iterations)
        truth: 매니페스트 레코드 (id, class_id, pose, level, nuisances)
        reference_iterations: id → full 추론 반복 수. 없고 모든 결과가 full 이면 자기 자신.

    Raises:
        InvalidArgumentError: id 중복 또는 정답에 없는 결과 id
    """
    truth_by_id = {}
    for rec in truth:
        if rec["id"] in truth_by_id:
            raise InvalidArgumentError(f"duplicate truth id {rec['id']}")
        truth_by_id[rec["id"]] = rec

    seen = set()
    rows = []
    for res in results:
        rid = res.get("id")
        if rid in seen:
            raise InvalidArgumentError(f"duplicate result id {rid}")
        if rid not in truth_by_id:
            raise InvalidArgumentError(f"result id {rid} has no ground-truth record")
        seen.add(rid)
        gt = truth_by_id[rid]
        r_pred = np.asarray(res["rotation"], dtype=np.float64)
        err = pose_error(r_pred, rotation_from_pose(_truth_pose(gt)))
        rows.append(
            {
                "id": rid,
                "level": gt["level"],
                "nuisances": list(gt["nuisances"]) or ["none"],
                "class_id": int(gt["class_id"]),
                "predicted_class": int(res["predicted_class"]),
                "pose_error": err,
                "stage": res["stage"],
                "iterations": int(res["iterations"]),
            }
        )
    df = pd.DataFrame(rows, columns=["id", "level", "nuisances", "class_id", "predicted_class",
                                     "pose_error", "stage", "iterations"])
    df = df.sort_values("id", kind="stable").reset_index(drop=True)

    if reference_iterations is None and (df["stage"] == STAGE_FULL).all():
        df["reference_iterations"] = df["iterations"]
    elif reference_iterations is None:
        df["reference_iterations"] = np.nan
    else:
        missing = [i for i in df["id"] if i not in reference_iterations]
        if missing:
            raise InvalidArgumentError(f"no reference iterations for ids {missing[:5]}")
        df["reference_iterations"] = [int(reference_iterations[i]) for i in df["id"]]

    df["class_correct"] = df["class_id"] == df["predicted_class"]
    df["pose_pi6"] = df["pose_error"] < PI_6
    df["pose_pi18"] = df["pose_error"] < PI_18
    df["correct_3d"] = df["class_correct"] & df["pose_pi6"]
    return df


def _cost_pct(iterations: pd.Series, reference: pd.Series) -> float:
    if reference.isna().any():
        return float("nan")
    ref, spent = int(reference.sum()), int(iterations.sum())
    if ref == 0:
        return 100.0 if spent == 0 else float("inf")
    return 100.0 * spent / ref


def _summarize(df: pd.DataFrame, group: str, key: str) -> Dict:
    n = len(df)
    stages = df["stage"].value_counts()
    return {
        "group": group,
        "key": key,
        "n": n,
        "accuracy": float(df["class_correct"].mean()),
        "acc_pi6": float(df["pose_pi6"].mean()),
        "acc_pi18": float(df["pose_pi18"].mean()),
        "acc_3d": float(df["correct_3d"].mean()),
        "mean_pose_error": float(df["pose_error"].mean()),
        "cost_pct": _cost_pct(df["iterations"], df["reference_iterations"]),
        "share_s1": stages.get(STAGE_S1, 0) / n,
        "share_s2": stages.get(STAGE_S2, 0) / n,
        "share_s3": stages.get(STAGE_S3, 0) / n,
    }


def summarize_frame(df: pd.DataFrame) -> pd.DataFrame:
    """샘플 테이블을 overall / level / nuisance 행으로 집계."""
    rows = [_summarize(df, "overall", "all")]
    for level, part in df.groupby("level", sort=True):
        rows.append(_summarize(part, "level", str(level)))
    exploded = df.explode("nuisances")
    for nuisance, part in exploded.groupby("nuisances", sort=True):
        rows.append(_summarize(part, "nuisance", str(nuisance)))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def compute_metrics(
    results: Sequence[Dict],
    truth: Sequence[Dict],
    reference_iterations: Optional[Mapping[str, int]] = None,
) -> EvalReport:
    """
    추론 결과를 정답과 비교해 EvalReport 를 만듭니다 (레코드 순서와 무관).

    Raises:
        InvalidArgumentError: 결과가 비었거나 id 가 맞지 않을 때
    """
    if not results:
        raise InvalidArgumentError("no records to evaluate")
    df = sample_frame(results, truth, reference_iterations)
    table = summarize_frame(df)
    overall = table.iloc[0]
    logger.info(
        f"[M7] 평가 완료: N={int(overall['n'])}, acc={overall['accuracy']:.3f}, "
        f"ACC_pi/6={overall['acc_pi6']:.3f}, ACC_pi/18={overall['acc_pi18']:.3f}, "
        f"3D={overall['acc_3d']:.3f}, cost={overall['cost_pct']:.1f}%"
    )
    return EvalReport(table)


# ===== staged 로그 기반 분석 =====
def decision_record(log: Dict, decision: Decision) -> Dict:
    """resolve_cascade 결정을 compute_metrics 가 읽는 결과 레코드 형태로 변환."""
    return {
        "id": log["id"],
        "predicted_class": decision.class_id,
        "rotation": rotation_from_pose(decision.pose).tolist(),
        "stage": decision.stage,
        "iterations": decision.iterations,
        "full_runs": decision.full_runs,
    }


def cascade_results(staged: Sequence[Dict], tau1: float, tau2: float, stages: str = "s1s2s3") -> List[Dict]:
    return [decision_record(log, resolve_cascade(log, tau1, tau2, stages)) for log in staged]


def reference_from_staged(staged: Sequence[Dict]) -> Dict[str, int]:
    return {log["id"]: int(log["full"]["iterations"]) for log in staged}


def ablation_table(staged: Sequence[Dict], truth: Sequence[Dict], tau1: float, tau2: float) -> pd.DataFrame:
    """캐스케이드 변형별(full, s1, s1s2, s1s2s3) 지표 테이블."""
    if not staged:
        raise InvalidArgumentError("no staged records for ablation")
    reference = reference_from_staged(staged)
    frames = []
    for variant in STAGE_VARIANTS:
        report = compute_metrics(cascade_results(staged, tau1, tau2, variant), truth, reference)
        table = report.table.copy()
        table.insert(0, "variant", variant)
        frames.append(table)
    return pd.concat(frames, ignore_index=True)


def s3_recovery_rate(staged: Sequence[Dict], truth: Sequence[Dict], tau1: float, tau2: float) -> Optional[float]:
    """
    S3 가 방문한 샘플 중 S2 답이 (3D-aware 기준) 틀린 것들에 대해 S3 가 맞힌 비율.
    해당 샘플이 없으면 None.
    """
    visited = [log for log in staged if resolve_cascade(log, tau1, tau2, "s1s2s3").stage == STAGE_S3]
    if not visited:
        return None
    s2_rows = sample_frame([decision_record(log, _s2_decision(log)) for log in visited], truth)
    full_rows = sample_frame([{**log["full"], "id": log["id"]} for log in visited], truth)
    wrong = s2_rows.loc[~s2_rows["correct_3d"], "id"]
    if wrong.empty:
        return None
    recovered = full_rows.set_index("id").loc[wrong, "correct_3d"]
    rate = float(recovered.mean())
    logger.info(f"[M7] S3 복구율: {int(recovered.sum())}/{len(recovered)} = {rate:.3f}")
    return rate


def _s2_decision(log: Dict) -> Decision:
    s2 = log["s2"]
    return Decision(STAGE_S2, int(s2["class_id"]), Pose.from_dict(s2["pose"]), int(s2["iterations"]), 0)
