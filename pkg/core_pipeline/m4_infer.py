# 📜 core_pipeline/m4_infer.py
# 모듈 4: render-and-compare 포즈 최적화와 전체(full) 추론
#
# - optimize_pose: 정점 샘플링 NLL 에 대한 경사하강 (스텝 감쇠, 스텝 클리핑, k 회마다 가시성 갱신)
#                  뒤에 격자 nll 좌표 탐색으로 마무리
# - infer_full   : 클래스마다 144개 격자 포즈 → 거리 3단계 탐색 → 최적화, NLL 최소 클래스 선택
#                  (동점은 낮은 클래스 인덱스). 클래스별 작업은 joblib 으로 병렬 실행 가능하며
#                  결과 순서는 완료 순서와 무관합니다.

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from omegaconf import DictConfig

from core.camera import CameraIntrinsics, Pose, PoseGridSpec, project, rotation_from_pose
from core.likelihood import FeatureMap, match_score, nll, pose_gradient
from core.mesh import BackgroundModel, ModelBank, NeuralMeshModel
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

STAGE_S1 = "S1"
STAGE_S2 = "S2"
STAGE_S3 = "S3"
STAGE_FULL = "full"


@dataclass(frozen=True)
class OptimizerOptions:
    lr: float = 0.1
    iterations: int = 80
    decay: float = 0.98
    max_step: float = 0.1
    grad_tol: float = 1e-6
    refresh_every: int = 10
    polish_sweeps: int = 24
    polish_step: float = 0.05
    polish_min_step: float = 1e-3
    distance_factors: Tuple[float, ...] = (0.9, 1.0, 1.1)
    depth_tolerance: float = 0.25
    dilation: int = 1

    def validate(self) -> None:
        if self.iterations < 0:
            raise InvalidArgumentError(f"iterations must be >= 0, got {self.iterations}")
        if not self.lr > 0 or not 0 < self.decay <= 1 or not self.max_step > 0:
            raise InvalidArgumentError("optimizer lr/max_step must be > 0 and decay in (0, 1]")
        if self.refresh_every < 1:
            raise InvalidArgumentError(f"refresh_every must be >= 1, got {self.refresh_every}")
        if self.polish_sweeps < 0 or not 0 < self.polish_min_step <= self.polish_step:
            raise InvalidArgumentError("polish_sweeps must be >= 0 and 0 < polish_min_step <= polish_step")
        if not self.distance_factors or min(self.distance_factors) <= 0:
            raise InvalidArgumentError("distance_factors must be a nonempty list of positive values")

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "OptimizerOptions":
        return cls(
            lr=float(cfg.OPTIMIZER.lr),
            iterations=int(cfg.OPTIMIZER.iterations),
            decay=float(cfg.OPTIMIZER.decay),
            max_step=float(cfg.OPTIMIZER.max_step),
            grad_tol=float(cfg.OPTIMIZER.grad_tol),
            refresh_every=int(cfg.OPTIMIZER.refresh_every),
            polish_sweeps=int(cfg.OPTIMIZER.polish_sweeps),
            polish_step=float(cfg.OPTIMIZER.polish_step),
            polish_min_step=float(cfg.OPTIMIZER.polish_min_step),
            distance_factors=tuple(float(x) for x in cfg.OPTIMIZER.distance_factors),
            depth_tolerance=float(cfg.CAMERA.depth_tolerance),
            dilation=int(cfg.CAMERA.dilation),
        )


class PoseFit(NamedTuple):
    pose: Pose
    nll: float
    iterations: int


@dataclass(frozen=True)
class ClassFit:
    class_id: int
    pose: Pose
    nll: float
    score: float
    iterations: int
    init_nll: float


@dataclass
class InferenceResult:
    predicted_class: int
    pose: Pose
    rotation: np.ndarray
    class_nll: List[Optional[float]]
    class_score: List[Optional[float]]
    stage: str
    iterations: int
    full_runs: int
    confidence: Optional[float] = None
    tie: bool = False
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "predicted_class": int(self.predicted_class),
            "pose": self.pose.to_dict(),
            "rotation": np.asarray(self.rotation).tolist(),
            "class_nll": [_finite_or_none(x) for x in self.class_nll],
            "class_score": [_finite_or_none(x) for x in self.class_score],
            "stage": self.stage,
            "iterations": int(self.iterations),
            "full_runs": int(self.full_runs),
            "confidence": self.confidence,
            "tie": bool(self.tie),
            **self.extra,
        }


def _finite_or_none(x: Optional[float]) -> Optional[float]:
    if x is None or not math.isfinite(x):
        return None
    return float(x)


def _exact(F: FeatureMap, model: NeuralMeshModel, bg: BackgroundModel, pose: Pose, cam: CameraIntrinsics, opts: OptimizerOptions):
    proj = project(model, pose, cam, opts.depth_tolerance, opts.dilation)
    if proj.is_empty:
        return proj, math.inf
    return proj, nll(F, proj, model.texture, bg)


def _polish(
    F: FeatureMap,
    model: NeuralMeshModel,
    bg: BackgroundModel,
    pose: Pose,
    value: float,
    cam: CameraIntrinsics,
    opts: OptimizerOptions,
    budget: int,
) -> Tuple[Pose, float, int]:
    """
    격자 nll 위의 좌표 패턴 탐색. 한 sweep 은 각 각도 ±step 6개 후보를 평가하고,
    엄격히 나아진 최선의 후보로 이동합니다 (같으면 먼저 평가한 후보). 개선이 없으면 step 을 반으로 줄입니다.
    """
    step = opts.polish_step
    sweeps = 0
    while sweeps < budget and step >= opts.polish_min_step and value > 0.0:
        sweeps += 1
        best_pose, best_value = pose, value
        for axis in range(3):
            for sign in (-1.0, 1.0):
                angles = pose.angles()
                angles[axis] += sign * step
                trial = pose.with_angles(angles).wrapped()
                trial_value = _exact(F, model, bg, trial, cam, opts)[1]
                if trial_value < best_value:
                    best_pose, best_value = trial, trial_value
        if best_value < value:
            pose, value = best_pose, best_value
        else:
            step *= 0.5
    return pose, value, sweeps


def optimize_pose(
    F: FeatureMap,
    model: NeuralMeshModel,
    bg: BackgroundModel,
    init: Pose,
    cam: CameraIntrinsics,
    opts: OptimizerOptions = OptimizerOptions(),
) -> PoseFit:
    """
    (azimuth, elevation, theta) 최적화. 거리는 고정.

    1) 경사하강: pose ← pose − clip(lr·∇/n_visible, ±max_step), lr ← lr·decay.
       가시성/전경 마스크는 refresh_every 회마다, 마지막 refresh_every 회는 매 반복 다시 계산합니다.
    2) 마무리: 경사하강 끝점과 시작점 중 격자 nll 이 낮은 쪽에서 _polish 로 격자 nll 을 직접 줄입니다.
       대리 NLL 은 셀 안에서 거의 평평하므로 셀 이하 정밀도는 이 단계가 담당합니다.

    반복 예산 opts.iterations 중 min(polish_sweeps, iterations) 는 마무리 sweep 몫이며,
    반환 iterations 는 실제 실행한 경사 반복 + sweep 수입니다 (≤ opts.iterations).
    반환 포즈의 nll 은 시작점보다 크지 않습니다.

    Returns
    -------
    PoseFit
        (pose, nll, iterations). 시작 포즈에서 전경이 비면 (init, inf, 0).
    """
    opts.validate()
    init.validate()
    proj, init_nll = _exact(F, model, bg, init, cam, opts)
    if math.isinf(init_nll):
        logger.warning(f"class {model.class_id}: 시작 포즈에서 전경이 비어 최적화를 건너뜁니다 ({init})")
        return PoseFit(init, math.inf, 0)

    n_polish = min(opts.polish_sweeps, opts.iterations)
    n_grad = opts.iterations - n_polish
    angles = init.angles()
    lr = opts.lr
    iterations = 0
    for it in range(n_grad):
        if it and (it % opts.refresh_every == 0 or it >= n_grad - opts.refresh_every):
            proj = project(model, init.with_angles(angles), cam, opts.depth_tolerance, opts.dilation)
            if proj.is_empty:
                break
        n_visible = max(int(proj.visible.sum()), 1)
        grad = pose_gradient(F, model, None, init.with_angles(angles), cam, bg, frozen=proj) / n_visible
        iterations += 1
        if float(np.linalg.norm(grad)) < opts.grad_tol:
            break
        angles = angles - np.clip(lr * grad, -opts.max_step, opts.max_step)
        lr *= opts.decay

    pose, value = init, init_nll
    if iterations:
        final = init.with_angles(angles).wrapped()
        _, final_nll = _exact(F, model, bg, final, cam, opts)
        if final_nll < init_nll:
            pose, value = final, final_nll
    pose, value, sweeps = _polish(F, model, bg, pose, value, cam, opts, n_polish)
    return PoseFit(pose, value, iterations + sweeps)


def best_grid_init(
    F: FeatureMap,
    model: NeuralMeshModel,
    bg: BackgroundModel,
    cam: CameraIntrinsics,
    grid: PoseGridSpec,
    distance: float,
    opts: OptimizerOptions,
    candidates: Optional[Sequence[Pose]] = None,
) -> Tuple[Pose, float]:
    """격자(또는 주어진 후보) 포즈 중 NLL 최소 포즈를 고르고, 그 포즈에서 거리 배율을 탐색합니다."""
    poses = list(candidates) if candidates is not None else grid.poses(distance)
    scores = [_exact(F, model, bg, p, cam, opts)[1] for p in poses]
    best = int(np.argmin(scores))
    pose, score = poses[best], scores[best]
    for factor in opts.distance_factors:
        trial = pose.with_distance(distance * factor)
        trial_score = _exact(F, model, bg, trial, cam, opts)[1]
        if trial_score < score:
            pose, score = trial, trial_score
    return pose, score


def fit_class(
    F: FeatureMap,
    model: NeuralMeshModel,
    bg: BackgroundModel,
    cam: CameraIntrinsics,
    grid: PoseGridSpec,
    distance: float,
    opts: OptimizerOptions,
    candidates: Optional[Sequence[Pose]] = None,
) -> ClassFit:
    init, init_nll = best_grid_init(F, model, bg, cam, grid, distance, opts, candidates)
    fit = optimize_pose(F, model, bg, init, cam, opts)
    score = 0.0
    if math.isfinite(fit.nll):
        proj = project(model, fit.pose, cam, opts.depth_tolerance, opts.dilation)
        score = match_score(F, proj, model.texture)
    return ClassFit(model.class_id, fit.pose, fit.nll, score, fit.iterations, init_nll)


def infer_full(
    F: FeatureMap,
    bank: ModelBank,
    cam: CameraIntrinsics,
    grid: PoseGridSpec,
    distance: float,
    opts: OptimizerOptions = OptimizerOptions(),
    n_jobs: int = 1,
) -> InferenceResult:
    """
    모든 클래스에 대해 격자 초기화 + 최적화 후 NLL 최소 클래스를 예측합니다.

    Parameters
    ----------
    F : FeatureMap
    bank : ModelBank
    cam : CameraIntrinsics
        특징 격자 카메라.
    grid : PoseGridSpec
        초기화 포즈 격자 (기본 12×4×3).
    distance : float
        기준 카메라 거리.
    n_jobs : int
        클래스별 병렬 작업 수 (스레드).

    Returns
    -------
    InferenceResult
        stage="full", 클래스별 NLL/score, 반복 수 합계.
    """
    if F.dim != bank.dim:
        raise InvalidArgumentError(f"feature dim {F.dim} != bank texture dim {bank.dim}")
    fits = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(fit_class)(F, model, bank.background, cam, grid, distance, opts) for model in bank.models
    )
    fits = sorted(fits, key=lambda f: f.class_id)
    return _argmin_result(fits, STAGE_FULL, full_runs=1)


def _argmin_result(fits: Sequence[ClassFit], stage: str, full_runs: int, iterations_offset: int = 0) -> InferenceResult:
    nlls = np.array([f.nll for f in fits])
    best = int(np.argmin(nlls))  # 첫 최소값 = 낮은 클래스 인덱스
    tie = int(np.sum(nlls == nlls[best])) > 1
    winner = fits[best]
    return InferenceResult(
        predicted_class=winner.class_id,
        pose=winner.pose,
        rotation=rotation_from_pose(winner.pose),
        class_nll=[f.nll for f in fits],
        class_score=[f.score for f in fits],
        stage=stage,
        iterations=iterations_offset + sum(f.iterations for f in fits),
        full_runs=full_runs,
        tie=tie,
    )
