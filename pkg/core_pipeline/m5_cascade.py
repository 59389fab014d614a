# 📜 core_pipeline/m5_cascade.py
# 모듈 5: 3단계 캐스케이드 추론 (S1 → S2 → S3)
#
# S1: 클래스 헤드 신뢰도 > τ₁ 이면 헤드 클래스를 유지하고 그 클래스 하나만 포즈 최적화
#     (헤드 상위 top_k 포즈 bin 을 앞세운 격자 초기화)
# S2: 아니면 상위 top_k 클래스 각각에 대해 상위 top_k 포즈 bin 중 NLL 최소 포즈를 제안으로 삼고,
#     제안들 중 NLL 최소인 것 하나만 최적화
# S3: S2 결과의 match_score < τ₂ (또는 τ₂ ≥ 1) 이면 버리고 full 추론
#
# infer_staged 는 세 단계 결과를 모두 계산해 기록하며, resolve_cascade 는 그 기록만으로
# 임의의 (τ₁, τ₂, stages) 에서 infer_cascade 가 내릴 결정을 그대로 재현합니다.

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from omegaconf import DictConfig

from core.camera import CameraIntrinsics, Pose, PoseGridSpec, project, rotation_from_pose
from core.likelihood import FeatureMap, match_score
from core.mesh import ModelBank
from core_pipeline.m3_heads import FeedForwardHeads
from core_pipeline.m4_infer import (
    STAGE_FULL,
    STAGE_S1,
    STAGE_S2,
    STAGE_S3,
    InferenceResult,
    OptimizerOptions,
    best_grid_init,
    infer_full,
    optimize_pose,
)
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

STAGE_VARIANTS = ("full", "s1", "s1s2", "s1s2s3")


@dataclass(frozen=True)
class CascadeConfig:
    tau1: float = 0.95
    tau2: float = 0.8
    top_k: int = 3
    stages: str = "s1s2s3"

    def validate(self) -> None:
        if not (0.0 <= self.tau1 <= 1.0 and 0.0 <= self.tau2 <= 1.0):
            raise InvalidArgumentError(f"tau1/tau2 must be in [0, 1], got ({self.tau1}, {self.tau2})")
        if self.top_k < 1:
            raise InvalidArgumentError(f"top_k must be >= 1, got {self.top_k}")
        if self.stages not in STAGE_VARIANTS:
            raise InvalidArgumentError(f"stages must be one of {STAGE_VARIANTS}, got {self.stages!r}")

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "CascadeConfig":
        return cls(
            tau1=float(cfg.CASCADE.tau1),
            tau2=float(cfg.CASCADE.tau2),
            top_k=int(cfg.CASCADE.top_k),
            stages=str(cfg.CASCADE.stages),
        )


@dataclass(frozen=True)
class StageOutcome:
    """S1 또는 S2 한 단계의 결과."""

    class_id: int
    pose: Pose
    nll: float
    score: float
    iterations: int
    proposals: int = 1

    def to_record(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "pose": self.pose.to_dict(),
            "nll": float(self.nll) if np.isfinite(self.nll) else None,
            "score": float(self.score),
            "iterations": int(self.iterations),
            "proposals": int(self.proposals),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "StageOutcome":
        nll = rec["nll"]
        return cls(
            int(rec["class_id"]),
            Pose.from_dict(rec["pose"]),
            float("inf") if nll is None else float(nll),
            float(rec["score"]),
            int(rec["iterations"]),
            int(rec.get("proposals", 1)),
        )


@dataclass(frozen=True)
class CascadeContext:
    """캐스케이드 실행에 필요한 고정 입력."""

    bank: ModelBank
    cam: CameraIntrinsics
    grid: PoseGridSpec
    distance: float
    opts: OptimizerOptions = OptimizerOptions()
    n_jobs: int = 1


def _score(F: FeatureMap, ctx: CascadeContext, class_id: int, pose: Pose) -> float:
    model = ctx.bank.models[class_id]
    proj = project(model, pose, ctx.cam, ctx.opts.depth_tolerance, ctx.opts.dilation)
    return match_score(F, proj, model.texture)


def _top_bins(pose_probs: np.ndarray, top_k: int) -> List[int]:
    k = min(top_k, len(pose_probs))
    return [int(b) for b in np.argsort(-pose_probs, kind="stable")[:k]]


def run_s1(
    F: FeatureMap, class_probs: np.ndarray, pose_probs: np.ndarray, ctx: CascadeContext, top_k: int = 3
) -> StageOutcome:
    """
    헤드 클래스 유지, 그 클래스 하나에 대해서만 포즈를 맞춥니다.

    초기화 후보는 헤드의 상위 top_k 포즈 bin 중심을 앞에, 나머지 격자 포즈를 뒤에 둡니다
    (NLL 동점이면 헤드 bin 우선). 포즈 헤드가 틀려도 후보 집합은 full 추론과 같습니다.
    """
    class_id = int(np.argmax(class_probs))
    model = ctx.bank.models[class_id]
    top_bins = _top_bins(pose_probs, top_k)
    seeds = set(top_bins)
    candidates = [ctx.grid.bin_center(b, ctx.distance) for b in top_bins]
    candidates += [p for b, p in enumerate(ctx.grid.poses(ctx.distance)) if b not in seeds]
    init, _ = best_grid_init(F, model, ctx.bank.background, ctx.cam, ctx.grid, ctx.distance, ctx.opts, candidates)
    fit = optimize_pose(F, model, ctx.bank.background, init, ctx.cam, ctx.opts)
    score = _score(F, ctx, class_id, fit.pose) if np.isfinite(fit.nll) else 0.0
    return StageOutcome(class_id, fit.pose, fit.nll, score, fit.iterations, proposals=len(top_bins))


def run_s2(
    F: FeatureMap, class_probs: np.ndarray, pose_probs: np.ndarray, ctx: CascadeContext, top_k: int
) -> StageOutcome:
    """상위 top_k 클래스 제안을 격자 NLL 로 순위화하고 최선의 제안 하나만 최적화."""
    k_cls = min(top_k, len(class_probs))
    top_classes = [int(c) for c in np.argsort(-class_probs, kind="stable")[:k_cls]]
    centers = [ctx.grid.bin_center(b, ctx.distance) for b in _top_bins(pose_probs, top_k)]

    proposals = []
    for class_id in top_classes:
        model = ctx.bank.models[class_id]
        pose, value = best_grid_init(F, model, ctx.bank.background, ctx.cam, ctx.grid, ctx.distance, ctx.opts, centers)
        proposals.append((value, class_id, pose))
    value, class_id, pose = min(proposals, key=lambda p: (p[0], p[1]))

    model = ctx.bank.models[class_id]
    fit = optimize_pose(F, model, ctx.bank.background, pose, ctx.cam, ctx.opts)
    score = _score(F, ctx, class_id, fit.pose) if np.isfinite(fit.nll) else 0.0
    return StageOutcome(class_id, fit.pose, fit.nll, score, fit.iterations, proposals=len(proposals))


def _stage_result(outcome: StageOutcome, stage: str, iterations: int, confidence: float, n_classes: int) -> InferenceResult:
    class_nll: List[Optional[float]] = [None] * n_classes
    class_score: List[Optional[float]] = [None] * n_classes
    class_nll[outcome.class_id] = outcome.nll
    class_score[outcome.class_id] = outcome.score
    return InferenceResult(
        predicted_class=outcome.class_id,
        pose=outcome.pose,
        rotation=rotation_from_pose(outcome.pose),
        class_nll=class_nll,
        class_score=class_score,
        stage=stage,
        iterations=iterations,
        full_runs=0,
        confidence=confidence,
    )


def _accept_s1(confidence: float, tau1: float) -> bool:
    return confidence > tau1


def _needs_s3(score: float, tau2: float) -> bool:
    return tau2 >= 1.0 or score < tau2


def infer_cascade(
    F: FeatureMap,
    heads: Optional[FeedForwardHeads],
    ctx: CascadeContext,
    cascade: CascadeConfig = CascadeConfig(),
) -> InferenceResult:
    """
    S1/S2/S3 캐스케이드를 필요한 단계까지만 실행합니다.

    Raises
    ------
    InvalidArgumentError
        heads 가 없을 때.
    """
    if heads is None:
        raise InvalidArgumentError("cascade inference requires trained heads")
    cascade.validate()
    if cascade.stages == "full":
        return infer_full(F, ctx.bank, ctx.cam, ctx.grid, ctx.distance, ctx.opts, ctx.n_jobs)

    class_probs, pose_probs = heads.predict(F)
    confidence = float(np.max(class_probs))
    n_classes = ctx.bank.n_classes

    if _accept_s1(confidence, cascade.tau1):
        s1 = run_s1(F, class_probs, pose_probs, ctx, cascade.top_k)
        return _stage_result(s1, STAGE_S1, s1.iterations, confidence, n_classes)

    if cascade.stages == "s1":
        full = infer_full(F, ctx.bank, ctx.cam, ctx.grid, ctx.distance, ctx.opts, ctx.n_jobs)
        full.stage, full.confidence = STAGE_S3, confidence
        return full

    s2 = run_s2(F, class_probs, pose_probs, ctx, cascade.top_k)
    if cascade.stages == "s1s2" or not _needs_s3(s2.score, cascade.tau2):
        return _stage_result(s2, STAGE_S2, s2.iterations, confidence, n_classes)

    full = infer_full(F, ctx.bank, ctx.cam, ctx.grid, ctx.distance, ctx.opts, ctx.n_jobs)
    full.stage, full.confidence = STAGE_S3, confidence
    full.iterations += s2.iterations
    return full


@dataclass
class StagedLog:
    """한 샘플에 대한 모든 단계의 결과 (임계값 sweep 용)."""

    confidence: float
    s1: StageOutcome
    s2: StageOutcome
    full: InferenceResult

    def to_record(self) -> dict:
        return {
            "confidence": float(self.confidence),
            "s1": self.s1.to_record(),
            "s2": self.s2.to_record(),
            "full": self.full.to_record(),
        }


def infer_staged(
    F: FeatureMap,
    heads: Optional[FeedForwardHeads],
    ctx: CascadeContext,
    top_k: int = 3,
) -> StagedLog:
    """S1, S2, full 결과를 모두 계산합니다 (infer_cascade 와 같은 함수 사용)."""
    if heads is None:
        raise InvalidArgumentError("staged inference requires trained heads")
    class_probs, pose_probs = heads.predict(F)
    return StagedLog(
        confidence=float(np.max(class_probs)),
        s1=run_s1(F, class_probs, pose_probs, ctx, top_k),
        s2=run_s2(F, class_probs, pose_probs, ctx, top_k),
        full=infer_full(F, ctx.bank, ctx.cam, ctx.grid, ctx.distance, ctx.opts, ctx.n_jobs),
    )


@dataclass(frozen=True)
class Decision:
    stage: str
    class_id: int
    pose: Pose
    iterations: int
    full_runs: int


def resolve_cascade(log: Dict, tau1: float, tau2: float, stages: str = "s1s2s3") -> Decision:
    """
    기록된 단계 결과 (StagedLog.to_record 형식) 로 infer_cascade 의 결정을 재현합니다.

    iterations 는 해당 결정까지 실제로 실행되었을 최적화 반복 수입니다.
    """
    if stages not in STAGE_VARIANTS:
        raise InvalidArgumentError(f"stages must be one of {STAGE_VARIANTS}, got {stages!r}")
    full = log["full"]
    full_pose = Pose.from_dict(full["pose"])
    full_iters = int(full["iterations"])
    if stages == "full":
        return Decision(STAGE_FULL, int(full["predicted_class"]), full_pose, full_iters, 1)

    confidence = float(log["confidence"])
    if _accept_s1(confidence, tau1):
        s1 = StageOutcome.from_record(log["s1"])
        return Decision(STAGE_S1, s1.class_id, s1.pose, s1.iterations, 0)
    if stages == "s1":
        return Decision(STAGE_S3, int(full["predicted_class"]), full_pose, full_iters, 1)

    s2 = StageOutcome.from_record(log["s2"])
    if stages == "s1s2" or not _needs_s3(s2.score, tau2):
        return Decision(STAGE_S2, s2.class_id, s2.pose, s2.iterations, 0)
    return Decision(STAGE_S3, int(full["predicted_class"]), full_pose, s2.iterations + full_iters, 1)
