# 📜 core_pipeline/run_pipeline.py
# 🚀 명령별 실행 단계 (synth / train / infer / eval / sweep) 와 전체 파이프라인 지휘
#
# 모든 단계는 OmegaConf 설정 하나만 받아 디스크의 산출물을 읽고 씁니다.
# 주요 산출물(매니페스트, 모델/헤드 파일, trace, 로그, 보고서, SVG)은 같은 설정+seed 에서
# 바이트 단위로 재현되며, 타임스탬프는 run_metadata.json 에만 기록됩니다.

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from omegaconf import DictConfig, OmegaConf
from tqdm import tqdm

from analysis.m7_analyze import (
    EvalReport,
    ablation_table,
    cascade_results,
    compute_metrics,
    reference_from_staged,
    s3_recovery_rate,
)
from analysis.m8_sweep import plot_roc, sensitivity_report, threshold_sweep
from core.camera import PoseGridSpec
from core.data_scanner import load_manifest, load_record_image, record_pose, select_records
from core.mesh import ModelBank, build_bank
from core_pipeline.m1_synth import SynthSettings, settings_from_manifest, synth_from_config
from core_pipeline.m2_train import TrainConfig, TrainSample, train_bank
from core_pipeline.m3_heads import FeedForwardHeads, train_heads
from core_pipeline.m4_infer import OptimizerOptions, infer_full
from core_pipeline.m5_cascade import CascadeConfig, CascadeContext, infer_cascade, infer_staged
from core_pipeline.m6_save import (
    load_bank,
    load_heads,
    load_trace,
    read_jsonl,
    save_bank,
    save_heads,
    save_trace,
    write_jsonl,
    write_run_metadata,
)
from features.extractor import init_extractor
from utils.config_loader import resolve_n_jobs, subsystem_seed
from utils.errors import InvalidArgumentError, StorageError

logger = logging.getLogger(__name__)

TRACE_FILE = "loss_trace.csv"


def _out(cfg: DictConfig, name: str) -> Path:
    return Path(cfg.PATHS.output_dir) / name


def infer_log_path(cfg: DictConfig, mode: str) -> Path:
    return _out(cfg, f"infer_{mode}.jsonl")


def grid_from_config(cfg: DictConfig) -> PoseGridSpec:
    grid = PoseGridSpec(
        int(cfg.CAMERA.n_azimuth),
        int(cfg.CAMERA.n_elevation),
        int(cfg.CAMERA.n_theta),
        tuple(float(x) for x in cfg.CAMERA.elevation_band),
        tuple(float(x) for x in cfg.CAMERA.theta_band),
    )
    grid.validate()
    return grid


def _dataset(cfg: DictConfig) -> Tuple[Dict, SynthSettings]:
    manifest = load_manifest(cfg.PATHS.data_dir)
    return manifest, settings_from_manifest(manifest)


# ===== synth =====
def run_synth(cfg: DictConfig) -> Dict:
    n_jobs = resolve_n_jobs(int(cfg.INFER.parallel))
    manifest = synth_from_config(cfg, n_jobs=n_jobs)
    write_run_metadata(cfg.PATHS.data_dir, "synth", {"records": len(manifest["records"])})
    return manifest


# ===== train =====
def _train_samples(cfg: DictConfig, records: List[Dict]) -> List[TrainSample]:
    return [
        TrainSample(load_record_image(cfg.PATHS.data_dir, r), int(r["class_id"]), record_pose(r), r["id"])
        for r in tqdm(records, desc="Loading training scenes")
    ]


def _initial_bank(cfg: DictConfig, settings: SynthSettings) -> ModelBank:
    rng = np.random.default_rng(subsystem_seed(cfg, "init"))
    extractor = init_extractor(
        in_dim=settings.channels,
        out_dim=int(cfg.EXTRACTOR.dim),
        stride=settings.stride,
        smoothing=bool(cfg.EXTRACTOR.smoothing),
        normalize=bool(cfg.EXTRACTOR.normalize),
        rng=rng,
    )
    return build_bank(settings.class_dims, int(cfg.MESH.target_vertices), extractor, rng)


def run_train(cfg: DictConfig) -> Tuple[ModelBank, FeedForwardHeads]:
    """
    학습 분할로 모델 뱅크(추출기 + 텍스처 + 배경)와 피드포워드 헤드를 학습하고 저장합니다.

    Raises:
        StorageError: 모델 파일이 이미 있는데 force/resume 이 아닐 때
        SchemaVersionError: resume 대상 모델 파일의 버전이 다를 때
    """
    model_file = Path(cfg.PATHS.model_file)
    heads_file = Path(cfg.PATHS.heads_file)
    force, resume = bool(cfg.TRAIN.force), bool(cfg.TRAIN.resume)
    if not (force or resume):
        for path in (model_file, heads_file):
            if path.exists():
                raise StorageError(f"{path} already exists (use --force to overwrite)")

    manifest, settings = _dataset(cfg)
    records = select_records(manifest, "train")
    if not records:
        raise InvalidArgumentError(f"no training records in {cfg.PATHS.data_dir}")
    samples = _train_samples(cfg, records)
    cam = settings.lattice_camera()

    trace = None
    if resume:
        bank = load_bank(model_file)
        trace_path = _out(cfg, TRACE_FILE)
        trace = load_trace(trace_path) if trace_path.exists() else None
        logger.info(f"[Train] 재개: '{model_file}' (trace {0 if trace is None else len(trace)} 행)")
    else:
        bank = _initial_bank(cfg, settings)

    result = train_bank(samples, bank, cam, TrainConfig.from_config(cfg), trace)
    save_bank(model_file, result.bank, force=True)
    save_trace(_out(cfg, TRACE_FILE), result.trace)

    heads = train_heads(
        [s.image for s in samples],
        [s.class_id for s in samples],
        [s.pose for s in samples],
        result.bank.extractor,
        result.bank.n_classes,
        grid_from_config(cfg),
        C=float(cfg.HEADS.C),
        calibration_folds=int(cfg.HEADS.calibration_folds),
        max_iter=int(cfg.HEADS.max_iter),
        rng=np.random.default_rng(subsystem_seed(cfg, "heads")),
    )
    save_heads(heads_file, heads, force=True)
    write_run_metadata(cfg.PATHS.output_dir, "train", {"stopped_early": result.stopped_early})
    return result.bank, heads


# ===== infer =====
def run_infer(cfg: DictConfig, mode: Optional[str] = None) -> Path:
    """
    추론 분할의 장면마다 full / cascade / staged 추론을 실행하고 JSON Lines 로그를 씁니다.

    Raises:
        InvalidArgumentError: cascade/staged 인데 헤드 파일이 없을 때
    """
    mode = mode or str(cfg.INFER.mode)
    bank = load_bank(cfg.PATHS.model_file)
    heads = None
    if mode in ("cascade", "staged"):
        if not Path(cfg.PATHS.heads_file).exists():
            raise InvalidArgumentError(f"--mode {mode} needs a heads file, {cfg.PATHS.heads_file} not found")
        heads = load_heads(cfg.PATHS.heads_file)

    manifest, settings = _dataset(cfg)
    records = select_records(manifest, str(cfg.INFER.split))
    ctx = CascadeContext(
        bank=bank,
        cam=settings.lattice_camera(),
        grid=grid_from_config(cfg),
        distance=float(cfg.CAMERA.distance),
        opts=OptimizerOptions.from_config(cfg),
        n_jobs=resolve_n_jobs(int(cfg.INFER.parallel)),
    )
    cascade = CascadeConfig.from_config(cfg)
    cascade.validate()

    logs = []
    for rec in tqdm(records, desc=f"Inference ({mode})"):
        F = bank.extractor(load_record_image(cfg.PATHS.data_dir, rec))
        if mode == "full":
            out = infer_full(F, ctx.bank, ctx.cam, ctx.grid, ctx.distance, ctx.opts, ctx.n_jobs).to_record()
        elif mode == "cascade":
            out = infer_cascade(F, heads, ctx, cascade).to_record()
        elif mode == "staged":
            out = infer_staged(F, heads, ctx, cascade.top_k).to_record()
        else:
            raise InvalidArgumentError(f"unknown inference mode {mode!r}")
        logs.append({"id": rec["id"], **out})
        logger.debug(f"[Infer] {rec['id']}: {out.get('stage', 'staged')}")

    path = write_jsonl(infer_log_path(cfg, mode), logs)
    logger.info(f"[Infer] {mode} 추론 완료: {len(logs)} 샘플 → '{path}'")
    write_run_metadata(cfg.PATHS.output_dir, f"infer:{mode}", {"records": len(logs)})
    return path


# ===== eval =====
def _reference_for(cfg: DictConfig, logs: List[Dict]) -> Optional[Dict[str, int]]:
    if all(log.get("stage") == "full" for log in logs):
        return None
    full_path = infer_log_path(cfg, "full")
    if not full_path.exists():
        logger.warning(f"[Eval] '{full_path}' 가 없어 비용(%)을 계산하지 않습니다")
        return None
    return {log["id"]: int(log["iterations"]) for log in read_jsonl(full_path)}


def run_eval(cfg: DictConfig, mode: Optional[str] = None) -> EvalReport:
    """
    추론 로그를 매니페스트 정답과 비교해 eval_report_{mode}.csv/json 을 씁니다.
    staged 로그이면 현재 (τ₁, τ₂, stages) 로 캐스케이드 결정을 재현하고 ablation 표와 S3 복구율도 씁니다.
    """
    mode = mode or str(cfg.INFER.mode)
    log_path = infer_log_path(cfg, mode)
    logs = read_jsonl(log_path) if log_path.exists() else []
    if not logs:
        raise InvalidArgumentError(f"no records in {log_path}")
    manifest, _ = _dataset(cfg)
    truth = manifest["records"]

    cascade = CascadeConfig.from_config(cfg)
    if mode == "staged":
        results = cascade_results(logs, cascade.tau1, cascade.tau2, cascade.stages)
        report = compute_metrics(results, truth, reference_from_staged(logs))
        report.s3_recovery = s3_recovery_rate(logs, truth, cascade.tau1, cascade.tau2)
        ablation = ablation_table(logs, truth, cascade.tau1, cascade.tau2)
        ablation.to_csv(_out(cfg, "ablation.csv"), index=False)
    else:
        report = compute_metrics(logs, truth, _reference_for(cfg, logs))

    report.to_csv(_out(cfg, f"eval_report_{mode}.csv"))
    report.to_json(_out(cfg, f"eval_report_{mode}.json"))
    return report


# ===== sweep =====
def _with_points(grid, *points) -> List[float]:
    return sorted({round(float(t), 12) for t in [*grid, *points] if 0.0 <= t <= 1.0})


def run_sweep(cfg: DictConfig) -> Dict:
    """staged 로그만으로 τ₁/τ₂ sweep, ROC SVG, 민감도 표를 씁니다 (추론 재실행 없음)."""
    log_path = infer_log_path(cfg, "staged")
    if not log_path.exists():
        raise InvalidArgumentError(f"sweep needs staged logs ({log_path}); run `infer --mode staged` first")
    staged = read_jsonl(log_path)
    if not staged:
        raise InvalidArgumentError(f"no records in {log_path}")
    truth = load_manifest(cfg.PATHS.data_dir)["records"]

    tau1, tau2 = float(cfg.CASCADE.tau1), float(cfg.CASCADE.tau2)
    d1, d2 = float(cfg.SWEEP.delta_tau1), float(cfg.SWEEP.delta_tau2)
    grid1 = _with_points(cfg.SWEEP.tau1_grid, tau1, tau1 - d1, tau1 + d1)
    grid2 = _with_points(cfg.SWEEP.tau2_grid, tau2, tau2 - d2, tau2 + d2)

    sweep1 = threshold_sweep(staged, truth, grid1, "tau1", tau1, tau2)
    sweep2 = threshold_sweep(staged, truth, grid2, "tau2", tau1, tau2)
    sweep1.to_csv(_out(cfg, "sweep_tau1.csv"), index=False)
    sweep2.to_csv(_out(cfg, "sweep_tau2.csv"), index=False)
    plot_roc(sweep1, _out(cfg, "roc_tau1.svg"), "S1 acceptance (class confidence)")
    plot_roc(sweep2, _out(cfg, "roc_tau2.svg"), "S2 acceptance (match score)")

    if not (0.0 <= tau1 - d1 and tau1 + d1 <= 1.0 and 0.0 <= tau2 - d2 and tau2 + d2 <= 1.0):
        logger.warning("[Sweep] 민감도 구간이 [0, 1] 을 벗어나 sensitivity.csv 를 생략합니다")
        sensitivity = None
    else:
        sensitivity = sensitivity_report(sweep1, sweep2, round(tau1, 12), round(tau2, 12), d1, d2)
        sensitivity.to_csv(_out(cfg, "sensitivity.csv"), index=False)
    return {"tau1": sweep1, "tau2": sweep2, "sensitivity": sensitivity}


# ===== pipeline =====
def run_full_pipeline(cfg: DictConfig) -> Dict:
    """synth → train → infer(full, staged) → eval → sweep 를 한 seed 로 순차 실행."""
    logger.info("[Pipeline] 전체 파이프라인 시작")
    # 데이터셋을 새로 만들므로 이전 모델은 항상 덮어씀
    cfg = OmegaConf.merge(cfg, {"TRAIN": {"force": True, "resume": False}})
    logger.info("[Pipeline] 설정:\n" + OmegaConf.to_yaml(cfg))
    run_synth(cfg)
    run_train(cfg)
    run_infer(cfg, "full")
    run_infer(cfg, "staged")
    reports = {"full": run_eval(cfg, "full"), "staged": run_eval(cfg, "staged")}
    sweeps = run_sweep(cfg)
    write_run_metadata(cfg.PATHS.output_dir, "pipeline")
    logger.info("[Pipeline] 완료")
    return {"reports": reports, "sweeps": sweeps}
