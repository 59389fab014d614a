# 📜 core_pipeline/m2_train.py
# 모듈 2: 특징 추출기 ζ 와 클래스별 neural texture 를 공동 학습합니다.
#
# - L_con  : 한 이미지 안에서 전경-전경, 전경-배경 특징을 서로 멀어지게 하는 대조 손실
# - L_class: 클래스 텍스처 평균 μ(y) 끼리 멀어지게 하는 클래스 대조 손실
# - L_joint = w_con·L_con + w_class·L_class (추출기 기울기 단계)
# - 텍스처와 배경 모델은 GT 포즈 대응을 이용한 이동평균(MA)으로 갱신
#
# 손실 함수 (con_loss, class_loss) 는 정의 그대로의 합(sum) 형태를,
# 학습 기울기와 trace 는 쌍(pair) 평균 형태를 사용합니다.

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from omegaconf import DictConfig
from tqdm import tqdm

from core.camera import CameraIntrinsics, Pose, ProjectedMesh, project
from core.likelihood import FeatureMap
from core.mesh import BackgroundModel, ModelBank, NeuralMeshModel
from features.extractor import FeatureExtractor
from features.utils import safe_normalize
from utils.config_loader import subsystem_seed
from utils.errors import InvalidArgumentError, InvalidDatasetError, InvalidStateError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["epoch", "L_con", "L_class", "L_joint"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.5
    w_con: float = 1.0
    w_class: float = 1.0
    pair_cap: Optional[int] = 512
    early_stop_tolerance: float = 1e-3
    seed: int = 0
    depth_tolerance: float = 0.25
    dilation: int = 1

    def validate(self) -> None:
        if not 0.0 < self.momentum <= 1.0:
            raise InvalidArgumentError(f"momentum must be in (0, 1], got {self.momentum}")
        if not self.lr > 0:
            raise InvalidArgumentError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_con < 0 or self.w_class < 0:
            raise InvalidArgumentError("loss weights must be >= 0")

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "TrainConfig":
        cap = int(cfg.TRAIN.pair_cap)
        return cls(
            epochs=int(cfg.TRAIN.epochs),
            batch_size=int(cfg.TRAIN.batch_size),
            lr=float(cfg.TRAIN.lr),
            momentum=float(cfg.TRAIN.momentum),
            w_con=float(cfg.TRAIN.w_con),
            w_class=float(cfg.TRAIN.w_class),
            pair_cap=cap if cap > 0 else None,
            early_stop_tolerance=float(cfg.TRAIN.early_stop_tolerance),
            seed=subsystem_seed(cfg, "train"),
            depth_tolerance=float(cfg.CAMERA.depth_tolerance),
            dilation=int(cfg.CAMERA.dilation),
        )


@dataclass(frozen=True, eq=False)
class TrainSample:
    image: np.ndarray
    class_id: int
    pose: Pose
    sample_id: str = ""


class TrainResult(NamedTuple):
    bank: ModelBank
    trace: pd.DataFrame
    stopped_early: bool


@dataclass(frozen=True, eq=False)
class PreparedSample:
    pooled: np.ndarray
    proj: ProjectedMesh
    class_id: int


# ===== L_con =====
def _as_grid(F: Union[FeatureMap, np.ndarray]) -> np.ndarray:
    return F.grid if isinstance(F, FeatureMap) else np.asarray(F, dtype=np.float64)


def _exact_pair_terms(fg: np.ndarray, bg: np.ndarray):
    """닫힌 형태의 순서쌍 거리 합과 그 기울기."""
    n_f, n_b = len(fg), len(bg)
    s_f = fg.sum(axis=0)
    q_f = float(np.sum(fg * fg))
    s_ff = 2.0 * n_f * q_f - 2.0 * float(s_f @ s_f)
    g_ff = 4.0 * (n_f * fg - s_f)
    if n_b == 0:
        return s_ff, g_ff, 0.0, np.zeros_like(fg), np.zeros_like(bg)
    s_b = bg.sum(axis=0)
    q_b = float(np.sum(bg * bg))
    s_fb = n_b * q_f + n_f * q_b - 2.0 * float(s_f @ s_b)
    return s_ff, g_ff, s_fb, 2.0 * (n_b * fg - s_b), 2.0 * (n_f * bg - s_f)


def _sampled_pair_mean(a: np.ndarray, b: np.ndarray, cap: int, rng: np.random.Generator):
    """a×b 순서쌍 cap 개를 뽑아 평균 제곱거리와 (a, b) 기울기 추정."""
    i = rng.integers(len(a), size=cap)
    j = rng.integers(len(b), size=cap)
    d = a[i] - b[j]
    g_a = np.zeros_like(a)
    g_b = np.zeros_like(b)
    np.add.at(g_a, i, 2.0 * d / cap)
    np.add.at(g_b, j, -2.0 * d / cap)
    return float(np.sum(d * d)) / cap, g_a, g_b


def con_loss_and_grad(
    F: Union[FeatureMap, np.ndarray],
    fg_mask: np.ndarray,
    reduction: str = "sum",
    pair_cap: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """
    L_con 과 특징맵에 대한 기울기 (H, W, c).

    reduction="sum" 은 정의 그대로의 이중합, "mean" 은 항별 쌍 평균입니다.
    pair_cap 이 주어지고 항의 쌍 수가 이를 넘으면 rng 로 쌍을 샘플링해
    (합 형태에서는 전체 쌍 수/샘플 수로 스케일하여) 추정합니다.
    """
    grid = _as_grid(F)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if not fg_mask.any():
        raise InvalidStateError("con_loss needs a nonempty foreground")
    if reduction not in ("sum", "mean"):
        raise InvalidArgumentError(f"unknown reduction {reduction!r}")
    fg = grid[fg_mask]
    bg = grid[~fg_mask]
    n_f, n_b = len(fg), len(bg)
    n_ff, n_fb = n_f * n_f, n_f * n_b

    s_ff, g_ff, s_fb, g_fb_f, g_fb_b = _exact_pair_terms(fg, bg)
    m_ff, m_fb = s_ff / n_ff, (s_fb / n_fb if n_fb else 0.0)
    gm_ff, gm_fb_f, gm_fb_b = g_ff / n_ff, (g_fb_f / n_fb if n_fb else g_fb_f), (g_fb_b / n_fb if n_fb else g_fb_b)
    if pair_cap is not None:
        if rng is None:
            raise InvalidArgumentError("pair sampling requires an rng")
        if n_ff > pair_cap:
            m_ff, gm_ff, g2 = _sampled_pair_mean(fg, fg, pair_cap, rng)
            gm_ff = gm_ff + g2
        if n_fb > pair_cap:
            m_fb, gm_fb_f, gm_fb_b = _sampled_pair_mean(fg, bg, pair_cap, rng)

    grad = np.zeros_like(grid)
    if reduction == "mean":
        loss = -(m_ff + m_fb)
        grad[fg_mask] = -(gm_ff + gm_fb_f)
        grad[~fg_mask] = -gm_fb_b
    else:
        loss = -(m_ff * n_ff + m_fb * n_fb)
        grad[fg_mask] = -(gm_ff * n_ff + gm_fb_f * n_fb)
        grad[~fg_mask] = -gm_fb_b * n_fb
    return float(loss), grad


def con_loss(
    F: Union[FeatureMap, np.ndarray],
    fg_mask: np.ndarray,
    pair_cap: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    −Σ_{i∈FG}Σ_{j∈FG}‖f_i−f_j‖² − Σ_{i∈FG}Σ_{j∈BG}‖f_i−f_j‖².

    Raises
    ------
    InvalidStateError
        전경이 비어 있을 때.
    """
    loss, _ = con_loss_and_grad(F, fg_mask, "sum", pair_cap, rng)
    return loss


# ===== L_class =====
def class_means(bank: ModelBank) -> np.ndarray:
    return np.stack([m.texture.mean(axis=0) for m in bank.models])


def class_loss_from_means(means: np.ndarray, reduction: str = "sum") -> Tuple[float, np.ndarray]:
    """(−Σ_y Σ_{ȳ≠y}‖μ_y − μ_ȳ‖², ∂/∂μ). mean 은 순서쌍 수 Y(Y−1) 로 나눈 값."""
    n = len(means)
    if n < 2:
        raise InvalidStateError(f"class_loss needs at least 2 classes, got {n}")
    total = means.sum(axis=0)
    loss = -(2.0 * n * float(np.sum(means * means)) - 2.0 * float(total @ total))
    grad = -4.0 * (n * means - total)
    if reduction == "mean":
        pairs = n * (n - 1)
        return loss / pairs, grad / pairs
    return loss, grad


def class_loss(bank: Union[ModelBank, np.ndarray]) -> float:
    """−Σ_y Σ_{ȳ≠y} ‖μ(y) − μ(ȳ)‖² (Y < 2 이면 InvalidStateError)."""
    means = class_means(bank) if isinstance(bank, ModelBank) else np.asarray(bank, dtype=np.float64)
    loss, _ = class_loss_from_means(means)
    return loss


# ===== moving-average texture update =====
def _assignment_sums(grid: np.ndarray, proj: ProjectedMesh, n_vertices: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    S_r = {r(i) = r 인 전경 픽셀} ∪ {가시 정점 r 이 떨어지는 셀} 의 특징 합과 개수.
    """
    c = grid.shape[2]
    flat = grid.reshape(-1, c)
    corr = proj.correspondence.reshape(-1)
    sums = np.zeros((n_vertices, c))
    counts = np.zeros(n_vertices, dtype=np.int64)
    pix = np.flatnonzero(corr >= 0)
    np.add.at(sums, corr[pix], flat[pix])
    np.add.at(counts, corr[pix], 1)
    own = np.flatnonzero(proj.vertex_cell >= 0)
    cells = proj.vertex_cell[own]
    extra = corr[cells] != own
    np.add.at(sums, own[extra], flat[cells[extra]])
    np.add.at(counts, own[extra], 1)
    return sums, counts


def _blend(texture: np.ndarray, sums: np.ndarray, counts: np.ndarray, momentum: float, renormalize: bool) -> np.ndarray:
    out = texture.copy()
    rows = np.flatnonzero(counts > 0)
    if len(rows) == 0:
        return out
    target = sums[rows] / counts[rows, None]
    blended = (1.0 - momentum) * texture[rows] + momentum * target
    out[rows] = safe_normalize(blended) if renormalize else blended
    return out


def update_textures_ma(
    model: NeuralMeshModel,
    F: Union[FeatureMap, np.ndarray],
    proj: ProjectedMesh,
    momentum: float,
    renormalize: bool = True,
) -> NeuralMeshModel:
    """
    C_r ← (1−η)C_r + η·mean_{i∈S_r} f_i (S_r 가 빈 정점은 비트 단위로 그대로).

    Parameters
    ----------
    model : NeuralMeshModel
    F : FeatureMap
        GT 포즈 이미지의 특징맵.
    proj : ProjectedMesh
        GT 포즈로 계산한 투영 (대응 r(i) 와 정점 셀).
    momentum : float
        η ∈ (0, 1].
    renormalize : bool
        갱신된 텍스처를 단위 노름으로 재정규화.
    """
    if not 0.0 < momentum <= 1.0:
        raise InvalidArgumentError(f"momentum must be in (0, 1], got {momentum}")
    grid = _as_grid(F)
    sums, counts = _assignment_sums(grid, proj, model.n_vertices)
    return model.with_texture(_blend(model.texture, sums, counts, momentum, renormalize))


def update_background(bg: BackgroundModel, features: np.ndarray, momentum: float) -> BackgroundModel:
    """b 는 배경 특징의 이동평균, σ 는 이동 RMS 편차 (보고용)."""
    if len(features) == 0:
        return bg
    mean = (1.0 - momentum) * bg.mean + momentum * features.mean(axis=0)
    var = float(np.mean(np.sum((features - mean) ** 2, axis=1))) / features.shape[1]
    sigma = float(np.sqrt((1.0 - momentum) * bg.sigma ** 2 + momentum * var))
    return BackgroundModel(mean=mean, sigma=max(sigma, 1e-12))


# ===== joint objective =====
def joint_objective(
    extractor: FeatureExtractor,
    bank: ModelBank,
    batch: Sequence[PreparedSample],
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    배치 L_joint 와 추출기 파라미터 기울기 (dW, dbias).

    L_class 는 MA 갱신 후의 클래스 평균 μ′(y) = (1−η)μ(y) + η·m_b(y) 로 평가하고
    기울기는 배치 전경 평균 m_b 를 통해서만 흐릅니다.
    """
    n = len(batch)
    cap = config.pair_cap if rng is not None else None
    eta = config.momentum
    forwards = []
    l_con = 0.0
    for s in batch:
        z, f = extractor.forward(s.pooled)
        loss, g = con_loss_and_grad(f, s.proj.fg_mask, "mean", cap, rng)
        l_con += loss / n
        forwards.append((z, f, config.w_con * g / n))

    means = class_means(bank)
    present: Dict[int, Tuple[np.ndarray, int]] = {}
    for s, (_, f, _) in zip(batch, forwards):
        fg = f[s.proj.fg_mask]
        acc, cnt = present.get(s.class_id, (np.zeros(f.shape[2]), 0))
        present[s.class_id] = (acc + fg.sum(axis=0), cnt + len(fg))
    shifted = means.copy()
    for y, (acc, cnt) in present.items():
        shifted[y] = (1.0 - eta) * means[y] + eta * acc / cnt
    l_class, g_mu = class_loss_from_means(shifted, "mean")

    d_w = np.zeros_like(extractor.weight)
    d_b = np.zeros_like(extractor.bias)
    for s, (z, f, d_f) in zip(batch, forwards):
        _, cnt = present[s.class_id]
        d_f = d_f.copy()
        d_f[s.proj.fg_mask] += config.w_class * eta * g_mu[s.class_id] / cnt
        gw, gb = extractor.backward(s.pooled, z, d_f)
        d_w += gw
        d_b += gb
    return config.w_con * l_con + config.w_class * l_class, d_w, d_b


def _ma_step(bank: ModelBank, batch: Sequence[PreparedSample], momentum: float) -> ModelBank:
    """현재 추출기로 다시 추출한 특징으로 텍스처/배경을 배치 단위 MA 갱신."""
    per_class: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    bg_feats = []
    for s in batch:
        _, f = bank.extractor.forward(s.pooled)
        model = bank.models[s.class_id]
        sums, counts = _assignment_sums(f, s.proj, model.n_vertices)
        if s.class_id in per_class:
            acc_s, acc_c = per_class[s.class_id]
            sums, counts = acc_s + sums, acc_c + counts
        per_class[s.class_id] = (sums, counts)
        bg_feats.append(f[~s.proj.fg_mask])
    models = list(bank.models)
    for y, (sums, counts) in per_class.items():
        models[y] = models[y].with_texture(_blend(models[y].texture, sums, counts, momentum, True))
    background = update_background(bank.background, np.concatenate(bg_feats), momentum)
    return replace(bank, models=models, background=background)


def _prepare(
    samples: Sequence[TrainSample], bank: ModelBank, cam: CameraIntrinsics, config: TrainConfig
) -> List[PreparedSample]:
    prepared = []
    for s in samples:
        proj = project(bank.models[s.class_id], s.pose, cam, config.depth_tolerance, config.dilation)
        if proj.is_empty:
            logger.warning(f"[M2] 전경이 빈 학습 샘플 제외: {s.sample_id or '?'}")
            continue
        prepared.append(PreparedSample(bank.extractor.pool(s.image), proj, s.class_id))
    return prepared


def evaluate_losses(bank: ModelBank, prepared: Sequence[PreparedSample], config: TrainConfig) -> Dict[str, float]:
    """학습 세트 전체의 (쌍 평균, 정확한) L_con, L_class, L_joint."""
    l_con = 0.0
    for s in prepared:
        _, f = bank.extractor.forward(s.pooled)
        loss, _ = con_loss_and_grad(f, s.proj.fg_mask, "mean")
        l_con += loss / len(prepared)
    l_class, _ = class_loss_from_means(class_means(bank), "mean")
    return {
        "L_con": l_con,
        "L_class": l_class,
        "L_joint": config.w_con * l_con + config.w_class * l_class,
    }


def train_bank(
    samples: Sequence[TrainSample],
    bank: ModelBank,
    cam: CameraIntrinsics,
    config: TrainConfig,
    trace: Optional[pd.DataFrame] = None,
) -> TrainResult:
    """
    추출기 기울기 단계와 텍스처 MA 갱신을 배치마다 번갈아 수행합니다.

    Parameters
    ----------
    samples : sequence of TrainSample
        포즈가 주석된 학습 이미지 (클래스마다 1개 이상).
    bank : ModelBank
        초기(또는 재개 시 저장된) 모델 뱅크.
    cam : CameraIntrinsics
        특징 격자 카메라.
    config : TrainConfig
    trace : pd.DataFrame, optional
        재개 시 이전 trace. 마지막 epoch 다음부터 config.epochs 까지 이어서 학습합니다.

    Returns
    -------
    TrainResult
        (bank, trace[epoch, L_con, L_class, L_joint], stopped_early)
        L_joint 가 허용오차 이상 증가하면 직전 epoch 상태로 되돌리고 멈춥니다.
    """
    config.validate()
    if bank.n_classes < 2:
        raise InvalidDatasetError(f"training needs at least 2 classes, bank has {bank.n_classes}")
    present = {s.class_id for s in samples}
    missing = sorted(set(range(bank.n_classes)) - present)
    if missing:
        raise InvalidDatasetError(f"no training samples for classes {missing}")

    prepared = _prepare(samples, bank, cam, config)
    if {s.class_id for s in prepared} != set(range(bank.n_classes)):
        raise InvalidDatasetError("every class needs at least one training sample with visible foreground")

    rows = trace.to_dict("records") if trace is not None and len(trace) else []
    if not rows:
        rows.append({"epoch": 0, **evaluate_losses(bank, prepared, config)})
    first_epoch = int(rows[-1]["epoch"]) + 1
    logger.info(
        f"[M2] 학습 시작: 샘플 {len(prepared)}개, epoch {first_epoch}..{config.epochs}, "
        f"L_joint={rows[-1]['L_joint']:.4f}"
    )

    stopped = False
    for epoch in tqdm(range(first_epoch, config.epochs + 1), desc="Training epochs"):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(prepared))
        previous = bank
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[start : start + config.batch_size]]
            _, d_w, d_b = joint_objective(bank.extractor, bank, batch, config, rng)
            extractor = bank.extractor.with_params(
                bank.extractor.weight - config.lr * d_w, bank.extractor.bias - config.lr * d_b
            )
            bank = _ma_step(replace(bank, extractor=extractor), batch, config.momentum)

        losses = evaluate_losses(bank, prepared, config)
        if losses["L_joint"] > rows[-1]["L_joint"] + config.early_stop_tolerance:
            logger.warning(
                f"[M2] epoch {epoch}: L_joint {losses['L_joint']:.4f} > "
                f"{rows[-1]['L_joint']:.4f}, 직전 epoch 로 되돌리고 조기 종료"
            )
            bank = previous
            stopped = True
            break
        rows.append({"epoch": epoch, **losses})
        logger.info(
            f"[M2] epoch {epoch}: L_con={losses['L_con']:.4f} L_class={losses['L_class']:.4f} "
            f"L_joint={losses['L_joint']:.4f}"
        )

    bank.validate()
    return TrainResult(bank, pd.DataFrame(rows, columns=TRACE_COLUMNS), stopped)
