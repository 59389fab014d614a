# 📜 core_pipeline/m1_synth.py
# 모듈 1: 합성 장면 생성기. 클래스별 외관 코드를 가진 cuboid 를 GT 포즈로 렌더링하고
#         가림(L0~L3) 및 nuisance(context/texture/shape/weather/pose) 변형을 적용합니다.
#
# - 가시성은 특징 격자 해상도에서 판정하고, 외관은 입력 이미지 해상도로 렌더링합니다.
# - 장면마다 SeedSequence 를 스트림별로 나눠 쓰므로 nuisance 하나를 켜도 다른 요인의 난수는 변하지 않습니다.
# - 매니페스트는 단일 writer 가 마지막에 기록합니다.

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from omegaconf import DictConfig, OmegaConf
from scipy import ndimage
from tqdm import tqdm

from core.camera import (
    CameraIntrinsics,
    Pose,
    camera_points,
    depth_test,
    pinhole,
    rasterize,
    rotation_from_pose,
)
from core.data_scanner import MANIFEST_NAME, SUPPORTED_SCHEMA
from core.loader import IMAGE_SUFFIX, save_image_grid
from core.mesh import build_cuboid
from features.utils import safe_normalize
from utils.config_loader import subsystem_seed
from utils.errors import InvalidArgumentError, StorageError

logger = logging.getLogger(__name__)

LEVEL_BRACKETS: Dict[str, Tuple[float, float]] = {
    "L0": (0.0, 0.0),
    "L1": (0.2, 0.4),
    "L2": (0.4, 0.6),
    "L3": (0.6, 0.8),
}
NUISANCES = ("context", "texture", "shape", "weather", "pose")
BRACKET_TOLERANCE = 0.02

# 장면별 난수 스트림 (spawn 순서 고정)
_STREAMS = ("pose", "shape", "appearance", "background", "occlusion", "noise")


@dataclass(frozen=True)
class SynthSettings:
    image_size: Tuple[int, int] = (128, 128)
    channels: int = 16
    stride: int = 8
    focal: float = 25.0
    distance: float = 5.0
    class_dims: Tuple[Tuple[float, float, float], ...] = ((2.0, 1.0, 1.0), (1.0, 1.6, 1.0), (1.4, 1.4, 1.4))
    target_vertices: int = 1100
    elevation_band: Tuple[float, float] = (-np.pi / 18.0, np.pi / 3.0)
    theta_band: Tuple[float, float] = (-np.pi / 6.0, np.pi / 6.0)
    depth_tolerance: float = 0.25
    noise_std: float = 0.05
    instance_noise: float = 0.1
    texture_blend: float = 0.5
    shape_jitter: float = 0.2
    weather_contrast: float = 0.6
    weather_noise: float = 0.15
    render_dilation: int = 2
    n_fourier: int = 4
    fourier_scale: float = 1.5
    appearance_seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_dims)

    def lattice_camera(self) -> CameraIntrinsics:
        height, width = self.image_size
        return CameraIntrinsics.centered(self.focal, (height // self.stride, width // self.stride))

    def image_camera(self) -> CameraIntrinsics:
        return self.lattice_camera().upsampled(self.stride)

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "SynthSettings":
        return cls(
            image_size=(int(cfg.IMAGE.height), int(cfg.IMAGE.width)),
            channels=int(cfg.IMAGE.channels),
            stride=int(cfg.EXTRACTOR.stride),
            focal=float(cfg.CAMERA.focal),
            distance=float(cfg.CAMERA.distance),
            class_dims=_class_dims(cfg),
            target_vertices=int(cfg.MESH.target_vertices),
            elevation_band=tuple(float(x) for x in cfg.CAMERA.elevation_band),
            theta_band=tuple(float(x) for x in cfg.CAMERA.theta_band),
            depth_tolerance=float(cfg.CAMERA.depth_tolerance),
            noise_std=float(cfg.SYNTH.noise_std),
            instance_noise=float(cfg.SYNTH.instance_noise),
            texture_blend=float(cfg.SYNTH.texture_blend),
            shape_jitter=float(cfg.SYNTH.shape_jitter),
            weather_contrast=float(cfg.SYNTH.weather_contrast),
            weather_noise=float(cfg.SYNTH.weather_noise),
            render_dilation=int(cfg.SYNTH.render_dilation),
            n_fourier=int(cfg.SYNTH.n_fourier),
            fourier_scale=float(cfg.SYNTH.fourier_scale),
            appearance_seed=subsystem_seed(cfg, "synth"),
        )


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    level: str = "L0"
    nuisances: Tuple[str, ...] = ()
    seed: int = 0
    pose: Optional[Pose] = None

    def validate(self, settings: SynthSettings) -> None:
        if not 0 <= self.class_id < settings.n_classes:
            raise InvalidArgumentError(
                f"class_id {self.class_id} outside [0, {settings.n_classes})"
            )
        if self.level not in LEVEL_BRACKETS:
            raise InvalidArgumentError(f"unknown occlusion level {self.level!r}")
        unknown = set(self.nuisances) - set(NUISANCES)
        if unknown:
            raise InvalidArgumentError(f"unknown nuisances {sorted(unknown)}")
        if self.pose is not None:
            self.pose.validate()


@dataclass(frozen=True, eq=False)
class SceneRecord:
    image: np.ndarray
    class_id: int
    pose: Pose
    rotation: np.ndarray
    level: str
    nuisances: Tuple[str, ...]
    occlusion_ratio: float
    occlusion_reached: bool
    occluder_mask: np.ndarray
    fg_mask: np.ndarray
    dims: Tuple[float, float, float]
    appearance_id: str
    seed: int


class OcclusionResult(NamedTuple):
    image: np.ndarray
    ratio: float
    occluder_mask: np.ndarray
    reached: bool


# ===== Appearance =====
def appearance_field(
    points: np.ndarray,
    channels: int,
    rng: np.random.Generator,
    n_fourier: int = 4,
    scale: float = 1.5,
) -> np.ndarray:
    """
    정규화 좌표(각 축 [-1, 1])에서 정의되는 부드러운 랜덤 Fourier 외관 코드 (N, channels), 단위 노름.
    """
    freqs = rng.normal(0.0, scale, size=(channels, n_fourier, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(channels, n_fourier))
    amp = rng.normal(0.0, 1.0, size=(channels, n_fourier)) / np.sqrt(n_fourier)
    offset = rng.normal(0.0, 0.5, size=channels)
    waves = np.sin(np.einsum("cfk,nk->ncf", freqs, points) + phase[None])
    return safe_normalize(np.einsum("ncf,cf->nc", waves, amp) + offset)


def class_appearance(class_id: int, points: np.ndarray, settings: SynthSettings) -> np.ndarray:
    """클래스 고유의 외관 코드 (데이터셋 전체에서 고정)."""
    rng = np.random.default_rng([settings.appearance_seed, 7919, class_id])
    return appearance_field(points, settings.channels, rng, settings.n_fourier, settings.fourier_scale)


# ===== Background =====
def render_background(
    shape: Tuple[int, int, int], family: str, rng: np.random.Generator
) -> np.ndarray:
    """배경 클러터: 'clutter' = 가우시안 필터링 노이즈, 'stripes' = 방향성 줄무늬 (context nuisance)."""
    height, width, channels = shape
    if family == "clutter":
        noise = rng.normal(0.0, 1.0, size=shape)
        field = ndimage.gaussian_filter(noise, sigma=(4.0, 4.0, 0.0), mode="wrap")
        return 0.5 * field / max(field.std(), 1e-12)
    if family == "stripes":
        rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
        angle = rng.uniform(0.0, np.pi, size=channels)
        period = rng.uniform(6.0, 24.0, size=channels)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=channels)
        proj = cols[..., None] * np.cos(angle) + rows[..., None] * np.sin(angle)
        return 0.5 * np.sin(2.0 * np.pi * proj / period + phase) + rng.normal(0.0, 0.1, size=shape)
    raise InvalidArgumentError(f"unknown background family {family!r}")


# ===== Occlusion =====
def occlusion_ratio(occluder_mask: np.ndarray, fg_mask: np.ndarray) -> float:
    """가려진 전경 비율 |occ ∩ fg| / |fg| (전경이 비면 0)."""
    n_fg = int(fg_mask.sum())
    if n_fg == 0:
        return 0.0
    return float((occluder_mask & fg_mask).sum()) / n_fg


def apply_occlusion(
    image: np.ndarray,
    fg_mask: np.ndarray,
    level: str,
    rng: np.random.Generator,
    max_attempts: int = 400,
) -> OcclusionResult:
    """
    전경 위에 텍스처 사각형 가림막을 올려 가림 비율이 level 구간에 들어가게 합니다.

    Parameters
    ----------
    image : np.ndarray
        (H', W', c_in) 이미지.
    fg_mask : np.ndarray
        (H', W') 물체 전경.
    level : str
        "L0" ~ "L3".
    rng : np.random.Generator

    Returns
    -------
    OcclusionResult
        (가려진 이미지, 실제 비율, 가림 마스크, 구간 도달 여부).
        구간에 도달하지 못하면 최선의 비율과 reached=False 를 반환합니다.
    """
    if level not in LEVEL_BRACKETS:
        raise InvalidArgumentError(f"unknown occlusion level {level!r}")
    occ = np.zeros(fg_mask.shape, dtype=bool)
    if level == "L0":
        return OcclusionResult(image.copy(), 0.0, occ, True)
    if not fg_mask.any():
        raise InvalidArgumentError(f"occlusion level {level} needs a nonempty foreground")

    lo, hi = LEVEL_BRACKETS[level]
    target = rng.uniform(lo + BRACKET_TOLERANCE, hi - BRACKET_TOLERANCE)
    rows, cols = np.nonzero(fg_mask)
    top, bottom, left, right = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    box_h, box_w = bottom - top, right - left
    height, width = fg_mask.shape

    ratio = 0.0
    for _ in range(max_attempts):
        if ratio >= target:
            break
        h = int(rng.integers(max(1, int(0.15 * box_h)), max(2, int(0.6 * box_h)) + 1))
        w = int(rng.integers(max(1, int(0.15 * box_w)), max(2, int(0.6 * box_w)) + 1))
        r0 = int(np.clip(rng.integers(top - h // 2, bottom - h // 2 + 1), 0, height - 1))
        c0 = int(np.clip(rng.integers(left - w // 2, right - w // 2 + 1), 0, width - 1))
        candidate = occ.copy()
        candidate[r0 : r0 + h, c0 : c0 + w] = True
        new_ratio = occlusion_ratio(candidate, fg_mask)
        if new_ratio > hi:
            continue
        occ, ratio = candidate, new_ratio

    reached = lo <= ratio <= hi
    if not reached:
        logger.warning(f"가림 구간 {level} [{lo}, {hi}] 미도달: 실제 비율 {ratio:.3f}")

    channels = image.shape[2]
    color = rng.normal(0.0, 0.5, size=channels)
    pattern = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=image.shape), sigma=(2.0, 2.0, 0.0))
    out = image.copy()
    out[occ] = color + 0.5 * pattern[occ]
    return OcclusionResult(out, ratio, occ, reached)


# ===== Scene =====
def sample_pose(rng: np.random.Generator, settings: SynthSettings, out_of_band: bool = False) -> Pose:
    """학습 포즈 band 안(또는 pose-OOD 이면 band 밖)에서 포즈 샘플링."""
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    e_lo, e_hi = settings.elevation_band
    t_lo, t_hi = settings.theta_band
    if not out_of_band:
        return Pose(azimuth, rng.uniform(e_lo, e_hi), rng.uniform(t_lo, t_hi), settings.distance)
    # band 바깥: 고도는 위/아래 여유 구간 중 하나, 면내회전은 band 밖 ±
    if rng.uniform() < 0.5:
        elevation = rng.uniform(e_hi + 0.05, min(e_hi + 0.5, np.pi / 2 - 0.05))
    else:
        elevation = rng.uniform(max(e_lo - 0.5, -np.pi / 2 + 0.05), e_lo - 0.05)
    theta = np.sign(rng.uniform(-1.0, 1.0)) * rng.uniform(t_hi + 0.05, t_hi + 0.5)
    return Pose(azimuth, elevation, theta, settings.distance)


def _streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(_STREAMS, children)}


def render_object(
    vertices: np.ndarray, codes: np.ndarray, pose: Pose, settings: SynthSettings, background: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    특징 격자 해상도에서 가시성을 판정하고, 입력 해상도에서 외관 코드를 래스터화합니다.

    Returns
    -------
    (image, fg_mask)
    """
    lattice = settings.lattice_camera()
    cam_pts = camera_points(vertices, pose)
    uv_lat, depth = pinhole(cam_pts, lattice)
    visible, _ = depth_test(uv_lat, depth, lattice.grid, settings.depth_tolerance)
    uv_img, _ = pinhole(cam_pts, settings.image_camera())
    fg, corr = rasterize(uv_img, visible, settings.image_size, settings.render_dilation)
    image = background.copy()
    image[fg] = codes[corr[fg]]
    return image, fg


def generate_scene(spec: SceneSpec, settings: SynthSettings) -> SceneRecord:
    """
    SceneSpec 하나를 렌더링합니다. 같은 seed 는 비트 단위로 같은 결과를 냅니다.
    """
    spec.validate(settings)
    rng = _streams(spec.seed)
    nuisances = tuple(spec.nuisances)

    pose = spec.pose if spec.pose is not None else sample_pose(rng["pose"], settings, "pose" in nuisances)
    dims = np.asarray(settings.class_dims[spec.class_id], dtype=np.float64)
    if "shape" in nuisances:
        j = settings.shape_jitter
        dims = dims * rng["shape"].uniform(1.0 - j, 1.0 + j, size=3)

    vertices = build_cuboid(dims, settings.target_vertices)
    points = vertices / (dims / 2.0)
    codes = class_appearance(spec.class_id, points, settings)
    appearance_id = f"class{spec.class_id}"
    app_rng = rng["appearance"]
    if "texture" in nuisances:
        alt = appearance_field(points, settings.channels, app_rng, settings.n_fourier, settings.fourier_scale)
        a = settings.texture_blend
        codes = safe_normalize((1.0 - a) * codes + a * alt)
        appearance_id += f"+texture{spec.seed}"
    codes = safe_normalize(codes + settings.instance_noise * app_rng.normal(size=codes.shape))

    height, width = settings.image_size
    family = "stripes" if "context" in nuisances else "clutter"
    background = render_background((height, width, settings.channels), family, rng["background"])
    image, fg = render_object(vertices, codes, pose, settings, background)

    occlusion = apply_occlusion(image, fg, spec.level, rng["occlusion"]) if fg.any() else OcclusionResult(
        image, 0.0, np.zeros_like(fg), spec.level == "L0"
    )
    image = occlusion.image

    noise_rng = rng["noise"]
    if "weather" in nuisances:
        mean = image.mean(axis=(0, 1), keepdims=True)
        image = mean + settings.weather_contrast * (image - mean)
        image = image + noise_rng.normal(0.0, settings.weather_noise, size=image.shape)
    image = image + noise_rng.normal(0.0, settings.noise_std, size=image.shape)

    return SceneRecord(
        image=image,
        class_id=spec.class_id,
        pose=pose,
        rotation=rotation_from_pose(pose),
        level=spec.level,
        nuisances=nuisances,
        occlusion_ratio=occlusion.ratio,
        occlusion_reached=occlusion.reached,
        occluder_mask=occlusion.occluder_mask,
        fg_mask=fg,
        dims=tuple(float(d) for d in dims),
        appearance_id=appearance_id,
        seed=spec.seed,
    )


# ===== Dataset =====
def record_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def plan_dataset(
    n_classes: int,
    per_class: int,
    levels: Sequence[str],
    nuisances: Sequence[str],
    seed: int,
    train_fraction: float = 0.5,
) -> List[Tuple[str, str, SceneSpec]]:
    """
    (id, split, SceneSpec) 목록. 클래스 × (가림 level + nuisance) × per_class 로 층화합니다.
    L0·무 nuisance 장면 중 클래스별 앞쪽 train_fraction 만 train 입니다.
    """
    if n_classes < 1:
        raise InvalidArgumentError("at least one class must be configured")
    if per_class < 0:
        raise InvalidArgumentError(f"per_class must be >= 0, got {per_class}")
    n_train = int(round(train_fraction * per_class))
    plan: List[Tuple[str, str, SceneSpec]] = []
    index = 0
    for class_id in range(n_classes):
        for level in levels:
            for k in range(per_class):
                split = "train" if level == "L0" and k < n_train else "eval"
                spec = SceneSpec(class_id, level, (), record_seed(seed, index))
                plan.append((f"s{index:06d}", split, spec))
                index += 1
        for nuisance in nuisances:
            for _ in range(per_class):
                spec = SceneSpec(class_id, "L0", (nuisance,), record_seed(seed, index))
                plan.append((f"s{index:06d}", "eval", spec))
                index += 1
    return plan


def _generate_and_store(record_id: str, split: str, spec: SceneSpec, settings: SynthSettings, out_dir: Path) -> Dict:
    record = generate_scene(spec, settings)
    image_file = f"images/{record_id}{IMAGE_SUFFIX}"
    mask_file = f"masks/{record_id}_occluder.npy"
    fg_mask_file = f"masks/{record_id}_fg.npy"
    save_image_grid(out_dir / image_file, record.image)
    for name, mask in ((mask_file, record.occluder_mask), (fg_mask_file, record.fg_mask)):
        try:
            np.save(out_dir / name, mask)
        except OSError as e:
            raise StorageError(f"cannot write mask {out_dir / name}: {e}") from e
    return {
        "id": record_id,
        "file": image_file,
        "mask_file": mask_file,
        "fg_mask_file": fg_mask_file,
        "class_id": record.class_id,
        "pose": record.pose.to_dict(),
        "level": record.level,
        "nuisances": list(record.nuisances),
        "occlusion_ratio": record.occlusion_ratio,
        "occlusion_flag": bool(record.occlusion_reached),
        "seed": record.seed,
        "split": split,
        "dims": list(record.dims),
        "appearance_id": record.appearance_id,
    }


def generate_dataset(
    settings: SynthSettings,
    out_dir: str,
    per_class: int,
    levels: Sequence[str],
    nuisances: Sequence[str] = (),
    seed: int = 0,
    train_fraction: float = 0.5,
    n_jobs: int = 1,
) -> Dict:
    """
    데이터셋을 생성해 디스크에 쓰고 매니페스트(dict)를 반환합니다.

    Parameters
    ----------
    settings : SynthSettings
    out_dir : str
        출력 폴더 (없으면 생성).
    per_class : int
        클래스 × level(또는 nuisance) 당 장면 수.
    levels, nuisances : sequence of str
    seed : int
        장면 seed 의 루트.
    n_jobs : int
        joblib 병렬 작업 수.

    Returns
    -------
    dict
        {"schema_version", "config", "records"}
    """
    unknown_levels = set(levels) - set(LEVEL_BRACKETS)
    unknown_nuisances = set(nuisances) - set(NUISANCES)
    if unknown_levels or unknown_nuisances:
        raise InvalidArgumentError(
            f"unknown levels {sorted(unknown_levels)} / nuisances {sorted(unknown_nuisances)}"
        )
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create dataset directory {root}: {e}") from e

    plan = plan_dataset(settings.n_classes, per_class, levels, nuisances, seed, train_fraction)
    logger.info(
        f"[M1] 합성 데이터셋 생성: 클래스 {settings.n_classes}개 × {per_class} × "
        f"(levels {list(levels)} + nuisances {list(nuisances)}) = {len(plan)} 장면"
    )
    entries = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_generate_and_store)(rid, split, spec, settings, root)
        for rid, split, spec in tqdm(plan, desc="Generating scenes")
    )

    manifest = {
        "schema_version": SUPPORTED_SCHEMA,
        "config": {
            **asdict(settings),
            "per_class": per_class,
            "levels": list(levels),
            "nuisances": list(nuisances),
            "seed": seed,
            "train_fraction": train_fraction,
        },
        "records": entries,
    }
    manifest_path = root / MANIFEST_NAME
    try:
        manifest_path.write_text(json.dumps(_jsonable(manifest), sort_keys=True, indent=2))
    except OSError as e:
        raise StorageError(f"cannot write manifest {manifest_path}: {e}") from e

    n_flagged = sum(1 for e in entries if not e["occlusion_flag"])
    if n_flagged:
        logger.warning(f"[M1] 가림 구간 미도달 장면 {n_flagged}개 (매니페스트 occlusion_flag=false)")
    logger.info(f"[M1] 매니페스트 저장 완료: {manifest_path}")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def settings_from_manifest(manifest: Dict) -> SynthSettings:
    """매니페스트에 기록된 설정으로 SynthSettings 복원."""
    cfg = manifest["config"]
    names = set(SynthSettings.__dataclass_fields__)
    kwargs = {}
    for key, value in cfg.items():
        if key not in names:
            continue
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return SynthSettings(**kwargs)


def synth_from_config(cfg: DictConfig, n_jobs: int = 1) -> Dict:
    """cfg.SYNTH 에 따라 데이터셋 생성 (cmd_synth 진입점)."""
    settings = SynthSettings.from_config(cfg)
    return generate_dataset(
        settings,
        out_dir=cfg.PATHS.data_dir,
        per_class=int(cfg.SYNTH.per_class),
        levels=list(OmegaConf.to_container(cfg.SYNTH.levels)),
        nuisances=list(OmegaConf.to_container(cfg.SYNTH.nuisances)),
        seed=subsystem_seed(cfg, "synth"),
        train_fraction=float(cfg.SYNTH.train_fraction),
        n_jobs=n_jobs,
    )


def _class_dims(cfg: DictConfig) -> Tuple[Tuple[float, float, float], ...]:
    """MESH.class_dims 중 앞쪽 SYNTH.n_classes 개."""
    n_classes = int(cfg.SYNTH.n_classes)
    dims = [tuple(float(d) for d in triple) for triple in cfg.MESH.class_dims]
    if n_classes > len(dims):
        raise InvalidArgumentError(
            f"SYNTH.n_classes={n_classes} but MESH.class_dims has only {len(dims)} entries"
        )
    return tuple(dims[:n_classes])
