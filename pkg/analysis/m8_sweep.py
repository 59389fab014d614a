# 📜 analysis/m8_sweep.py
# 🔬 [모듈 8] 캐스케이드 임계값 sweep, ROC 곡선, 민감도 표
#
# - threshold_sweep   : staged 로그만으로 τ 격자마다 수락 TPR/FPR, 수락률, end-to-end 정확도/비용 계산
#                       (τ₁: "S1 에서 수락", τ₂: "S2 에서 수락 (S3 생략)". 양성 = 해당 단계 답이 3D-aware 정답)
# - sensitivity_report: 기본값 대비 τ₁ ± 0.025, τ₂ ± 0.1 에서의 정확도/비용 변화량
# - plot_roc          : FPR-TPR 곡선을 SVG 로 저장 (날짜/해시 고정으로 바이트 재현 가능)

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from analysis.m7_analyze import (  # noqa: E402
    cascade_results,
    compute_metrics,
    decision_record,
    reference_from_staged,
    sample_frame,
)
from core.camera import Pose  # noqa: E402
from core_pipeline.m5_cascade import Decision  # noqa: E402
from utils.errors import InvalidArgumentError, StorageError  # noqa: E402

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["tau", "tpr", "fpr", "acceptance", "accuracy", "acc_3d", "cost_pct", "share_s3"]
_TAU_ATOL = 1e-9


def _stage_correctness(staged: Sequence[Dict], truth: Sequence[Dict], stage: str) -> pd.DataFrame:
    """각 샘플의 S1 또는 S2 답이 3D-aware 정답인지 (id 순)."""
    records = []
    for log in staged:
        out = log[stage]
        decision = Decision(stage.upper(), int(out["class_id"]), Pose.from_dict(out["pose"]), int(out["iterations"]), 0)
        records.append(decision_record(log, decision))
    frame = sample_frame(records, truth)
    by_id = {log["id"]: log for log in staged}
    if stage == "s1":
        frame["value"] = [float(by_id[i]["confidence"]) for i in frame["id"]]
    else:
        frame["value"] = [float(by_id[i]["s2"]["score"]) for i in frame["id"]]
    return frame[["id", "value", "correct_3d"]]


def _accepted(values: np.ndarray, tau: float, which: str) -> np.ndarray:
    if which == "tau1":
        return values > tau
    if tau >= 1.0:
        return np.zeros_like(values, dtype=bool)
    return values >= tau


def _rate(hits: np.ndarray, population: np.ndarray) -> float:
    n = int(population.sum())
    return float((hits & population).sum()) / n if n else float("nan")


def threshold_sweep(
    staged: Sequence[Dict],
    truth: Sequence[Dict],
    grid: Sequence[float],
    which: str = "tau1",
    tau1: float = 0.95,
    tau2: float = 0.8,
) -> pd.DataFrame:
    """
    한 임계값을 격자 위에서 움직이고 다른 하나는 고정한 채 캐스케이드 결정을 재현합니다.

    Parameters
    ----------
    staged : list of dict
        infer --mode staged 로그 레코드.
    truth : list of dict
        매니페스트 레코드.
    grid : sequence of float
        τ 값들 ([0, 1]).
    which : {"tau1", "tau2"}
    tau1, tau2 : float
        고정되는 쪽의 값.

    Returns
    -------
    pd.DataFrame
        SWEEP_COLUMNS, τ 오름차순.

    Raises
    ------
    InvalidArgumentError
        빈 격자, 범위 밖 τ, 빈 로그.
    """
    if which not in ("tau1", "tau2"):
        raise InvalidArgumentError(f"which must be 'tau1' or 'tau2', got {which!r}")
    taus = sorted(float(t) for t in grid)
    if not taus:
        raise InvalidArgumentError("threshold grid is empty")
    if taus[0] < 0.0 or taus[-1] > 1.0:
        raise InvalidArgumentError(f"threshold grid must lie in [0, 1], got [{taus[0]}, {taus[-1]}]")
    if not staged:
        raise InvalidArgumentError("no staged records to sweep")

    stage_frame = _stage_correctness(staged, truth, "s1" if which == "tau1" else "s2")
    values = stage_frame["value"].to_numpy()
    positive = stage_frame["correct_3d"].to_numpy(dtype=bool)
    reference = reference_from_staged(staged)

    rows: List[Dict] = []
    for tau in taus:
        t1, t2 = (tau, tau2) if which == "tau1" else (tau1, tau)
        accepted = _accepted(values, tau, which)
        overall = compute_metrics(cascade_results(staged, t1, t2), truth, reference).overall
        rows.append(
            {
                "tau": tau,
                "tpr": _rate(accepted, positive),
                "fpr": _rate(accepted, ~positive),
                "acceptance": float(accepted.mean()),
                "accuracy": float(overall["accuracy"]),
                "acc_3d": float(overall["acc_3d"]),
                "cost_pct": float(overall["cost_pct"]),
                "share_s3": float(overall["share_s3"]),
            }
        )
    logger.info(f"[M8] {which} sweep: {len(taus)} 점, 샘플 {len(staged)}")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def _lookup(sweep: pd.DataFrame, tau: float, name: str) -> pd.Series:
    hit = sweep[np.isclose(sweep["tau"].to_numpy(), tau, atol=_TAU_ATOL, rtol=0.0)]
    if hit.empty:
        raise InvalidArgumentError(f"{name}={tau:.4f} is not covered by the sweep grid")
    return hit.iloc[0]


def sensitivity_report(
    sweep_tau1: pd.DataFrame,
    sweep_tau2: pd.DataFrame,
    tau1: float = 0.95,
    tau2: float = 0.8,
    delta_tau1: float = 0.025,
    delta_tau2: float = 0.1,
) -> pd.DataFrame:
    """
    기본 임계값 대비 ± 변화에서의 정확도/비용 변화량 표.

    행: (parameter, tau, delta_accuracy, delta_acc_3d, delta_cost_pct). 격자에 없는 점은 InvalidArgumentError.
    """
    rows = []
    for name, sweep, center, delta in (("tau1", sweep_tau1, tau1, delta_tau1), ("tau2", sweep_tau2, tau2, delta_tau2)):
        base = _lookup(sweep, center, name)
        for sign in (-1.0, 1.0):
            tau = center + sign * delta
            point = _lookup(sweep, tau, name)
            rows.append(
                {
                    "parameter": name,
                    "tau": tau,
                    "delta_accuracy": float(point["accuracy"] - base["accuracy"]),
                    "delta_acc_3d": float(point["acc_3d"] - base["acc_3d"]),
                    "delta_cost_pct": float(point["cost_pct"] - base["cost_pct"]),
                }
            )
    return pd.DataFrame(rows, columns=["parameter", "tau", "delta_accuracy", "delta_acc_3d", "delta_cost_pct"])


def plot_roc(sweep: pd.DataFrame, file_path: Union[str, Path], title: str) -> Path:
    """FPR(x) vs TPR(y) 곡선과 τ 주석을 SVG 로 저장."""
    path = Path(file_path)
    with plt.rc_context({"svg.hashsalt": "rcnet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(sweep["fpr"], sweep["tpr"], marker="o", lw=1.2)
        for _, row in sweep.iterrows():
            if np.isfinite(row["fpr"]) and np.isfinite(row["tpr"]):
                ax.annotate(f"{row['tau']:.3f}", (row["fpr"], row["tpr"]), fontsize=6,
                            textcoords="offset points", xytext=(3, 3))
        ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("FPR")
        ax.set_ylabel("TPR")
        ax.set_title(title)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise StorageError(f"cannot write figure {path}: {e}") from e
        finally:
            plt.close(fig)
    return path
