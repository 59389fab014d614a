"""
test_eval.py
============
평가 지표, 캐스케이드 재현 분석, 임계값 sweep, 민감도 표, ROC 그림 검증.

동작:
1. 손으로 만든 결과/정답으로 정확도, ACC_{π/6}, ACC_{π/18}, 3D-aware 정확도, 비용(%) 확인
2. staged 로그 4개로 τ₁/τ₂ 결정, ablation, S3 복구율 확인
3. sweep 의 TPR/FPR/수락률과 민감도 변화량 확인
4. ROC SVG 가 바이트 단위로 재현되는지
"""

import json
import math
import random

import numpy as np
import pytest

from analysis.m7_analyze import (
    REPORT_COLUMNS,
    ablation_table,
    cascade_results,
    compute_metrics,
    reference_from_staged,
    s3_recovery_rate,
)
from analysis.m8_sweep import SWEEP_COLUMNS, plot_roc, sensitivity_report, threshold_sweep
from core.camera import Pose, rotation_from_pose
from utils.errors import InvalidArgumentError

GT_AZ = 0.5


def _pose(az, theta=0.0):
    return {"azimuth": az, "elevation": 0.1, "theta": theta, "distance": 5.0}


def _rotation(az, theta=0.0):
    return rotation_from_pose(Pose.from_dict(_pose(az, theta))).tolist()


def _truth(ids, levels=None, nuisances=None):
    return [
        {
            "id": rid,
            "class_id": 0,
            "pose": _pose(GT_AZ),
            "level": (levels or {}).get(rid, "L0"),
            "nuisances": (nuisances or {}).get(rid, []),
        }
        for rid in ids
    ]


def _result(rid, class_id, az=GT_AZ, theta=0.0, stage="full", iterations=10):
    return {
        "id": rid,
        "predicted_class": class_id,
        "rotation": _rotation(az, theta),
        "stage": stage,
        "iterations": iterations,
    }


@pytest.fixture
def scored():
    truth = _truth("abcd", levels={"c": "L1", "d": "L1"}, nuisances={"c": ["context"]})
    results = [
        _result("a", 0),
        _result("b", 0, theta=math.pi / 12),  # π/18 < 오차 < π/6
        _result("c", 1),
        _result("d", 0, theta=math.pi / 3),
    ]
    return results, truth


def test_overall_metrics(scored):
    results, truth = scored
    report = compute_metrics(results, truth)
    assert list(report.table.columns) == REPORT_COLUMNS
    row = report.overall
    assert row["n"] == 4
    assert row["accuracy"] == pytest.approx(0.75)
    assert row["acc_pi6"] == pytest.approx(0.75)
    assert row["acc_pi18"] == pytest.approx(0.5)
    assert row["acc_3d"] == pytest.approx(0.5)
    assert row["mean_pose_error"] == pytest.approx((math.pi / 12 + math.pi / 3) / 4)
    assert row["cost_pct"] == pytest.approx(100.0)
    assert row["share_s1"] == 0.0


def test_group_rows(scored):
    results, truth = scored
    report = compute_metrics(results, truth)
    assert report.row("level", "L0")["acc_3d"] == pytest.approx(1.0)
    assert report.row("level", "L1")["accuracy"] == pytest.approx(0.5)
    assert report.row("nuisance", "context")["n"] == 1
    assert report.row("nuisance", "none")["n"] == 3
    with pytest.raises(InvalidArgumentError):
        report.row("level", "L3")


def test_metrics_ignore_record_order(scored):
    results, truth = scored
    shuffled = results[:]
    random.Random(0).shuffle(shuffled)
    a = compute_metrics(results, truth).table
    b = compute_metrics(shuffled, list(reversed(truth))).table
    assert a.equals(b)


def test_metrics_reject_bad_inputs(scored):
    results, truth = scored
    with pytest.raises(InvalidArgumentError):
        compute_metrics([], truth)
    with pytest.raises(InvalidArgumentError):
        compute_metrics(results + [results[0]], truth)
    with pytest.raises(InvalidArgumentError):
        compute_metrics([_result("zz", 0)], truth)


def test_cost_against_reference(scored):
    _, truth = scored
    results = [_result(rid, 0, stage="S1", iterations=5) for rid in "abcd"]
    reference = {rid: 10 for rid in "abcd"}
    assert compute_metrics(results, truth, reference).overall["cost_pct"] == pytest.approx(50.0)
    assert compute_metrics(results, truth).overall["share_s1"] == pytest.approx(1.0)
    assert math.isnan(compute_metrics(results, truth).overall["cost_pct"])


def test_report_files(tmp_path, scored):
    results, truth = scored
    report = compute_metrics([_result(rid, 0, stage="S2") for rid in "abcd"], truth)
    report.to_csv(tmp_path / "r.csv")
    report.to_json(tmp_path / "r.json")
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["rows"][0]["cost_pct"] is None  # 기준 반복 수가 없으면 NaN → null
    assert payload["s3_recovery"] is None
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)


# ===== staged logs =====
def _stage(class_id, az, score, iterations):
    return {"class_id": class_id, "pose": _pose(az), "nll": 1.0, "score": score, "iterations": iterations, "proposals": 1}


def _full(class_id, az, iterations=40):
    return {
        "predicted_class": class_id,
        "pose": _pose(az),
        "rotation": _rotation(az),
        "stage": "full",
        "iterations": iterations,
    }


@pytest.fixture
def staged():
    logs = [
        {"id": "s0", "confidence": 0.99, "s1": _stage(0, GT_AZ, 0.95, 5), "s2": _stage(0, GT_AZ, 0.9, 8), "full": _full(0, GT_AZ)},
        {"id": "s1", "confidence": 0.90, "s1": _stage(1, GT_AZ, 0.4, 5), "s2": _stage(0, GT_AZ, 0.85, 8), "full": _full(0, GT_AZ)},
        {"id": "s2", "confidence": 0.60, "s1": _stage(0, 2.5, 0.3, 5), "s2": _stage(1, GT_AZ, 0.5, 8), "full": _full(0, GT_AZ)},
        {"id": "s3", "confidence": 0.30, "s1": _stage(1, GT_AZ, 0.2, 5), "s2": _stage(0, 2.5, 0.7, 8), "full": _full(1, GT_AZ)},
    ]
    return logs, _truth(["s0", "s1", "s2", "s3"])


def test_cascade_results_from_staged_logs(staged):
    logs, truth = staged
    results = cascade_results(logs, 0.95, 0.8)
    assert [r["stage"] for r in results] == ["S1", "S2", "S3", "S3"]
    report = compute_metrics(results, truth, reference_from_staged(logs))
    row = report.overall
    assert row["accuracy"] == pytest.approx(0.75)
    assert row["share_s3"] == pytest.approx(0.5)
    assert row["cost_pct"] == pytest.approx(100.0 * (5 + 8 + 48 + 48) / 160)


def test_ablation_and_recovery(staged):
    logs, truth = staged
    table = ablation_table(logs, truth, 0.95, 0.8)
    variants = table.loc[table["group"] == "overall", ["variant", "accuracy", "cost_pct"]].set_index("variant")
    assert list(variants.index) == ["full", "s1", "s1s2", "s1s2s3"]
    assert variants.loc["full", "accuracy"] == pytest.approx(0.75)
    assert variants.loc["full", "cost_pct"] == pytest.approx(100.0)
    # s1s2: S3 없이 S2 답을 그대로 사용
    assert variants.loc["s1s2", "cost_pct"] == pytest.approx(100.0 * (5 + 8 * 3) / 160)
    assert s3_recovery_rate(logs, truth, 0.95, 0.8) == pytest.approx(0.5)
    assert s3_recovery_rate(logs, truth, 0.0, 0.8) is None


def test_tau1_sweep(staged):
    logs, truth = staged
    sweep = threshold_sweep(logs, truth, [1.0, 0.0, 0.5, 0.95], "tau1", 0.95, 0.8)
    assert list(sweep.columns) == SWEEP_COLUMNS
    assert sweep["tau"].tolist() == [0.0, 0.5, 0.95, 1.0]
    by_tau = sweep.set_index("tau")
    assert by_tau.loc[0.0, "acceptance"] == 1.0
    assert by_tau.loc[1.0, "acceptance"] == 0.0
    assert by_tau.loc[0.95, "tpr"] == 1.0 and by_tau.loc[0.95, "fpr"] == 0.0
    assert by_tau.loc[0.5, "fpr"] == pytest.approx(2 / 3)
    assert np.all(np.diff(sweep["tpr"]) <= 0) and np.all(np.diff(sweep["fpr"]) <= 0)
    assert by_tau.loc[0.95, "accuracy"] == pytest.approx(0.75)


def test_tau2_sweep(staged):
    logs, truth = staged
    sweep = threshold_sweep(logs, truth, [0.6, 0.8, 1.0], "tau2", 0.95, 0.8).set_index("tau")
    assert sweep.loc[0.8, "tpr"] == 1.0 and sweep.loc[0.8, "fpr"] == 0.0
    assert sweep.loc[0.6, "fpr"] == pytest.approx(0.5)
    assert sweep.loc[1.0, "acceptance"] == 0.0
    assert sweep.loc[1.0, "share_s3"] == pytest.approx(0.75)  # S1 에서 수락된 s0 외 전부


def test_sweep_argument_errors(staged):
    logs, truth = staged
    with pytest.raises(InvalidArgumentError):
        threshold_sweep(logs, truth, [], "tau1")
    with pytest.raises(InvalidArgumentError):
        threshold_sweep(logs, truth, [0.5, 1.5], "tau1")
    with pytest.raises(InvalidArgumentError):
        threshold_sweep(logs, truth, [0.5], "tau3")
    with pytest.raises(InvalidArgumentError):
        threshold_sweep([], truth, [0.5], "tau1")


def test_sensitivity_report(staged):
    logs, truth = staged
    sweep1 = threshold_sweep(logs, truth, [0.925, 0.95, 0.975], "tau1", 0.95, 0.8)
    sweep2 = threshold_sweep(logs, truth, [0.7, 0.8, 0.9], "tau2", 0.95, 0.8)
    table = sensitivity_report(sweep1, sweep2, 0.95, 0.8, 0.025, 0.1)
    assert table["parameter"].tolist() == ["tau1", "tau1", "tau2", "tau2"]
    assert table["delta_accuracy"].iloc[:2].tolist() == [0.0, 0.0]
    low, high = table.iloc[2], table.iloc[3]
    assert low["delta_accuracy"] == pytest.approx(0.25)
    assert low["delta_cost_pct"] == pytest.approx(-25.0)
    assert high["delta_accuracy"] == pytest.approx(0.0)
    assert high["delta_cost_pct"] == pytest.approx(25.0)
    with pytest.raises(InvalidArgumentError):
        sensitivity_report(sweep1, sweep2, 0.95, 0.8, 0.05, 0.1)


def test_roc_svg_is_reproducible(tmp_path, staged):
    logs, truth = staged
    sweep = threshold_sweep(logs, truth, [0.0, 0.5, 0.95, 1.0], "tau1")
    a = plot_roc(sweep, tmp_path / "a.svg", "S1 acceptance")
    b = plot_roc(sweep, tmp_path / "b.svg", "S1 acceptance")
    assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()
