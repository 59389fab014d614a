# 📜 core_pipeline/m3_heads.py
# 모듈 3: 캐스케이드 S1/S2 용 피드포워드 헤드 (클래스 헤드 + 포즈 bin 헤드)
#
# - 입력: 고정된 추출기 ζ 의 특징맵을 풀링한 기술자 (전역 평균 + 2×2 평균)
# - 학습: sklearn 다항 로지스틱 회귀 (두 헤드 각각)
# - 보정: K-fold out-of-fold 로짓에서 온도(temperature) 스케일링, scipy 로 1차원 최소화
# - 학습에 한 번도 나오지 않은 포즈 bin 은 로짓 bias 를 크게 낮춰 확률을 사실상 0 으로 둡니다.

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold

from core.camera import PoseGridSpec
from core.likelihood import FeatureMap
from features.extractor import FeatureExtractor
from features.utils import calibrated_softmax
from utils.errors import InvalidArgumentError, InvalidDatasetError

logger = logging.getLogger(__name__)

ABSENT_BIAS = -30.0


@dataclass(frozen=True, eq=False)
class FeedForwardHeads:
    class_weight: np.ndarray  # (d, Y)
    class_bias: np.ndarray  # (Y,)
    pose_weight: np.ndarray  # (d, P)
    pose_bias: np.ndarray  # (P,)
    grid: PoseGridSpec
    class_temperature: float = 1.0
    pose_temperature: float = 1.0

    @property
    def n_classes(self) -> int:
        return int(self.class_bias.shape[0])

    @property
    def n_pose_bins(self) -> int:
        return int(self.pose_bias.shape[0])

    @property
    def descriptor_dim(self) -> int:
        return int(self.class_weight.shape[0])

    def validate(self) -> None:
        if self.n_pose_bins != self.grid.n_bins:
            raise InvalidArgumentError(
                f"pose head has {self.n_pose_bins} bins, grid expects {self.grid.n_bins}"
            )
        if self.class_temperature <= 0 or self.pose_temperature <= 0:
            raise InvalidArgumentError("head temperatures must be > 0")

    def class_proba(self, descriptors: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(descriptors) @ self.class_weight + self.class_bias
        return calibrated_softmax(logits, self.class_temperature)

    def pose_proba(self, descriptors: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(descriptors) @ self.pose_weight + self.pose_bias
        return calibrated_softmax(logits, self.pose_temperature)

    def predict(self, F: FeatureMap) -> Tuple[np.ndarray, np.ndarray]:
        """(p(y|I), p(m|I)) for a single feature map."""
        d = descriptor(F)
        return self.class_proba(d)[0], self.pose_proba(d)[0]

    @classmethod
    def zeros(cls, descriptor_dim: int, n_classes: int, grid: PoseGridSpec) -> "FeedForwardHeads":
        return cls(
            class_weight=np.zeros((descriptor_dim, n_classes)),
            class_bias=np.zeros(n_classes),
            pose_weight=np.zeros((descriptor_dim, grid.n_bins)),
            pose_bias=np.zeros(grid.n_bins),
            grid=grid,
        )


def descriptor(F: FeatureMap) -> np.ndarray:
    """전역 평균 풀링(c) + 2×2 구역 평균(4c) = 5c 차원 기술자."""
    grid = F.grid
    parts = [grid.mean(axis=(0, 1))]
    for rows in np.array_split(np.arange(grid.shape[0]), 2):
        for cols in np.array_split(np.arange(grid.shape[1]), 2):
            if len(rows) and len(cols):
                parts.append(grid[np.ix_(rows, cols)].mean(axis=(0, 1)))
            else:
                parts.append(np.zeros(grid.shape[2]))
    return np.concatenate(parts)


def _fit_linear(
    x: np.ndarray, labels: np.ndarray, n_outputs: int, C: float, max_iter: int
) -> Tuple[np.ndarray, np.ndarray]:
    """다항 로지스틱 회귀를 (d, n_outputs) 가중치로 펼침. 학습에 없는 출력은 ABSENT_BIAS."""
    weight = np.zeros((x.shape[1], n_outputs))
    bias = np.full(n_outputs, ABSENT_BIAS)
    present = np.unique(labels)
    if len(present) == 1:
        bias[present[0]] = 0.0
        return weight, bias
    clf = LogisticRegression(C=C, max_iter=max_iter)
    clf.fit(x, labels)
    if len(clf.classes_) == 2:
        # 이진 로지스틱: softmax([0, z]) = sigmoid(z)
        weight[:, clf.classes_[0]] = 0.0
        bias[clf.classes_[0]] = 0.0
        weight[:, clf.classes_[1]] = clf.coef_[0]
        bias[clf.classes_[1]] = clf.intercept_[0]
    else:
        weight[:, clf.classes_] = clf.coef_.T
        bias[clf.classes_] = clf.intercept_
    return weight, bias


def _fit_temperature(logits: np.ndarray, labels: np.ndarray) -> float:
    """주어진 (보지 않은 샘플의) 로짓에서 NLL 을 최소화하는 온도 T (log T ∈ [−3, 3])."""

    def objective(log_t: float) -> float:
        logp = log_softmax(logits / np.exp(log_t), axis=1)
        return -float(np.mean(logp[np.arange(len(labels)), labels]))

    result = minimize_scalar(objective, bounds=(-3.0, 3.0), method="bounded")
    return float(np.exp(result.x))


def _out_of_fold_logits(
    x: np.ndarray,
    labels: np.ndarray,
    n_outputs: int,
    C: float,
    max_iter: int,
    folds: KFold,
) -> np.ndarray:
    """각 샘플을 그 샘플이 빠진 fold 모델로 채점한 로짓 (N, n_outputs)."""
    logits = np.zeros((len(labels), n_outputs))
    for fit_idx, hold_idx in folds.split(x):
        w, b = _fit_linear(x[fit_idx], labels[fit_idx], n_outputs, C, max_iter)
        logits[hold_idx] = x[hold_idx] @ w + b
    return logits


def fit_heads(
    descriptors: np.ndarray,
    labels: np.ndarray,
    pose_bins: np.ndarray,
    n_classes: int,
    grid: PoseGridSpec,
    C: float = 1e4,
    calibration_folds: int = 5,
    max_iter: int = 2000,
    rng: Optional[np.random.Generator] = None,
) -> FeedForwardHeads:
    """
    기술자/라벨로 두 헤드를 학습하고 out-of-fold 로짓으로 온도를 맞춥니다.

    최종 가중치는 전체 데이터로 학습하고, 온도는 K-fold 에서 각 샘플을 보지 않은
    모델의 로짓에 대해 NLL 을 최소화합니다.

    Parameters
    ----------
    descriptors : np.ndarray
        (N, d) 기술자.
    labels : np.ndarray
        (N,) 클래스.
    pose_bins : np.ndarray
        (N,) 포즈 bin 인덱스 (grid.bin_index).
    n_classes : int
    grid : PoseGridSpec
    calibration_folds : int
        온도 보정용 fold 수 (N 보다 크면 N 으로 줄임, 2 미만이면 에러).

    Returns
    -------
    FeedForwardHeads

    Raises
    ------
    InvalidDatasetError
        클래스가 하나뿐이거나 보정용 fold 를 만들 수 없는 데이터셋.
    """
    labels = np.asarray(labels, dtype=np.int64)
    pose_bins = np.asarray(pose_bins, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise InvalidDatasetError("heads need a dataset with at least 2 classes")
    n = len(labels)
    n_folds = min(calibration_folds, n)
    if n_folds < 2:
        raise InvalidDatasetError(f"temperature calibration needs >= 2 folds, got {n_folds} (N={n})")
    rng = rng if rng is not None else np.random.default_rng(0)
    folds = KFold(n_splits=n_folds, shuffle=True, random_state=int(rng.integers(2**31 - 1)))

    cw, cb = _fit_linear(descriptors, labels, n_classes, C, max_iter)
    pw, pb = _fit_linear(descriptors, pose_bins, grid.n_bins, C, max_iter)
    t_class = _fit_temperature(_out_of_fold_logits(descriptors, labels, n_classes, C, max_iter, folds), labels)
    t_pose = _fit_temperature(_out_of_fold_logits(descriptors, pose_bins, grid.n_bins, C, max_iter, folds), pose_bins)
    heads = FeedForwardHeads(cw, cb, pw, pb, grid, t_class, t_pose)
    heads.validate()

    train_acc = float(np.mean(np.argmax(heads.class_proba(descriptors), axis=1) == labels))
    logger.info(
        f"[M3] 헤드 학습 완료: N={n}, 클래스 정확도(train)={train_acc:.3f}, "
        f"T_class={t_class:.3f}, T_pose={t_pose:.3f} ({n_folds}-fold), "
        f"포즈 bin {len(np.unique(pose_bins))}/{grid.n_bins}"
    )
    return heads


def train_heads(
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    poses: Sequence,
    extractor: FeatureExtractor,
    n_classes: int,
    grid: PoseGridSpec,
    C: float = 1e4,
    calibration_folds: int = 5,
    max_iter: int = 2000,
    rng: Optional[np.random.Generator] = None,
) -> FeedForwardHeads:
    """고정된 추출기로 특징을 뽑아 fit_heads 를 호출합니다."""
    descriptors = np.stack([descriptor(extractor(img)) for img in images])
    pose_bins = np.array([grid.bin_index(p) for p in poses])
    return fit_heads(descriptors, np.asarray(labels), pose_bins, n_classes, grid, C, calibration_folds, max_iter, rng)
