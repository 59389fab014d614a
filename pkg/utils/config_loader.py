from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from omegaconf import DictConfig, OmegaConf

DEFAULT_CONFIG = str(Path(__file__).resolve().parents[1] / "configs" / "rcnet_config.yaml")
SUBSYSTEMS = ("synth", "init", "train", "heads")
LEVELS = ("L0", "L1", "L2", "L3")
NUISANCES = ("context", "texture", "shape", "weather", "pose")
INFER_MODES = ("full", "cascade", "staged")
THREADS_ENV = "RCNET_THREADS"


def read_user_config(path: str) -> DictConfig:
    """User overrides: YAML by extension, otherwise flat `SECTION.key=value` lines."""
    file_path = Path(path)
    if file_path.suffix in (".yaml", ".yml"):
        return OmegaConf.load(file_path)
    lines = []
    for raw in file_path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return OmegaConf.from_dotlist(lines)


def load_config(
    config_path: str = DEFAULT_CONFIG,
    user_file: Optional[str] = None,
    flags: Optional[Mapping[str, object]] = None,
    cli_args: Optional[list[str]] = None,
) -> DictConfig:
    """Defaults → user file → command flags → dotlist overrides, then fail-fast validation.

    The base config is in struct mode, so any unknown key in a later layer raises.
    """
    base_cfg = OmegaConf.load(config_path)
    OmegaConf.set_struct(base_cfg, True)
    layers = []
    if user_file:
        layers.append(read_user_config(user_file))
    if flags:
        layers.append(OmegaConf.from_dotlist([f"{k}={_dotlist_value(v)}" for k, v in flags.items() if v is not None]))
    layers.append(OmegaConf.from_cli(cli_args or []))
    cfg = OmegaConf.merge(base_cfg, *layers)
    validate_config(cfg)
    return cfg


def _dotlist_value(value: object) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(str(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def validate_config(cfg: DictConfig) -> None:
    """Fail-fast config validation."""
    # Paths
    assert cfg.PATHS.data_dir, "PATHS.data_dir is required"
    assert cfg.PATHS.output_dir, "PATHS.output_dir is required"
    assert cfg.PATHS.model_file, "PATHS.model_file is required"
    assert cfg.PATHS.heads_file, "PATHS.heads_file is required"

    # Image / extractor
    assert cfg.IMAGE.height > 0 and cfg.IMAGE.width > 0, "IMAGE size must be > 0"
    assert cfg.IMAGE.channels >= 1, "IMAGE.channels must be >= 1"
    assert cfg.EXTRACTOR.stride >= 1, "EXTRACTOR.stride must be >= 1"
    assert cfg.IMAGE.height % cfg.EXTRACTOR.stride == 0, "IMAGE.height must be divisible by EXTRACTOR.stride"
    assert cfg.IMAGE.width % cfg.EXTRACTOR.stride == 0, "IMAGE.width must be divisible by EXTRACTOR.stride"
    assert cfg.EXTRACTOR.dim >= 1, "EXTRACTOR.dim must be >= 1"

    # Mesh
    assert cfg.MESH.target_vertices >= 8, "MESH.target_vertices must be >= 8"
    dims = OmegaConf.to_container(cfg.MESH.class_dims, resolve=True)
    assert isinstance(dims, list) and dims, "MESH.class_dims must be a nonempty list"
    for triple in dims:
        assert len(triple) == 3, f"MESH.class_dims entry {triple} must have 3 extents"
        assert min(triple) > 0, f"MESH.class_dims entry {triple} must be positive"
    assert 2 <= cfg.SYNTH.n_classes <= len(dims), "SYNTH.n_classes must be in [2, len(MESH.class_dims)]"

    # Camera / grid
    assert cfg.CAMERA.focal > 0, "CAMERA.focal must be > 0"
    assert cfg.CAMERA.distance > 0, "CAMERA.distance must be > 0"
    for key in ("n_azimuth", "n_elevation", "n_theta"):
        assert cfg.CAMERA[key] >= 1, f"CAMERA.{key} must be >= 1"
    for key in ("elevation_band", "theta_band"):
        low, high = cfg.CAMERA[key]
        assert low <= high, f"CAMERA.{key}: low must be <= high"
    assert cfg.CAMERA.depth_tolerance >= 0, "CAMERA.depth_tolerance must be >= 0"
    assert cfg.CAMERA.dilation >= 0, "CAMERA.dilation must be >= 0"

    # Synth
    levels = OmegaConf.to_container(cfg.SYNTH.levels, resolve=True)
    nuisances = OmegaConf.to_container(cfg.SYNTH.nuisances, resolve=True)
    assert set(levels) <= set(LEVELS), f"SYNTH.levels must be a subset of {LEVELS}"
    assert set(nuisances) <= set(NUISANCES), f"SYNTH.nuisances must be a subset of {NUISANCES}"
    assert cfg.SYNTH.per_class >= 1, "SYNTH.per_class must be >= 1"
    assert 0.0 < cfg.SYNTH.train_fraction < 1.0, "SYNTH.train_fraction must be in (0, 1)"

    # Train / heads
    assert 0.0 < cfg.TRAIN.momentum <= 1.0, "TRAIN.momentum must be in (0, 1]"
    assert cfg.TRAIN.lr > 0, "TRAIN.lr must be > 0"
    assert cfg.TRAIN.epochs >= 0, "TRAIN.epochs must be >= 0"
    assert cfg.TRAIN.batch_size >= 1, "TRAIN.batch_size must be >= 1"
    assert cfg.HEADS.C > 0, "HEADS.C must be > 0"
    assert cfg.HEADS.calibration_folds >= 2, "HEADS.calibration_folds must be >= 2"

    # Optimizer / cascade
    assert cfg.OPTIMIZER.lr > 0, "OPTIMIZER.lr must be > 0"
    assert cfg.OPTIMIZER.iterations >= 0, "OPTIMIZER.iterations must be >= 0"
    assert 0.0 < cfg.OPTIMIZER.decay <= 1.0, "OPTIMIZER.decay must be in (0, 1]"
    assert cfg.OPTIMIZER.refresh_every >= 1, "OPTIMIZER.refresh_every must be >= 1"
    assert cfg.OPTIMIZER.polish_sweeps >= 0, "OPTIMIZER.polish_sweeps must be >= 0"
    assert 0.0 < cfg.OPTIMIZER.polish_min_step <= cfg.OPTIMIZER.polish_step, "OPTIMIZER.polish_min_step must be in (0, polish_step]"
    assert 0.0 <= cfg.CASCADE.tau1 <= 1.0, "CASCADE.tau1 must be in [0, 1]"
    assert 0.0 <= cfg.CASCADE.tau2 <= 1.0, "CASCADE.tau2 must be in [0, 1]"
    assert cfg.CASCADE.top_k >= 1, "CASCADE.top_k must be >= 1"
    assert cfg.CASCADE.stages in ("full", "s1", "s1s2", "s1s2s3"), "CASCADE.stages invalid"
    assert cfg.INFER.mode in INFER_MODES, f"INFER.mode must be one of {INFER_MODES}"
    assert cfg.INFER.split in ("train", "eval", "all"), "INFER.split must be train, eval or all"
    assert cfg.INFER.parallel >= 1, "INFER.parallel must be >= 1"
    for key in ("tau1_grid", "tau2_grid"):
        grid = OmegaConf.to_container(cfg.SWEEP[key], resolve=True)
        assert grid, f"SWEEP.{key} must not be empty"
        assert all(0.0 <= t <= 1.0 for t in grid), f"SWEEP.{key} values must be in [0, 1]"


def subsystem_seed(cfg: DictConfig, name: str) -> int:
    """Split GLOBAL_RANDOM_SEED into an independent seed per subsystem."""
    index = SUBSYSTEMS.index(name)
    seq = np.random.SeedSequence(int(cfg.GLOBAL_RANDOM_SEED), spawn_key=(index,))
    return int(seq.generate_state(1)[0])


def resolve_n_jobs(requested: int) -> int:
    """Cap a requested worker count by RCNET_THREADS when it is set."""
    cap = os.environ.get(THREADS_ENV)
    if cap:
        return max(1, min(int(requested), int(cap)))
    return max(1, int(requested))
