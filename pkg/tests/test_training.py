"""
test_training.py
================
특징 추출기/neural texture 공동 학습 검증.

동작:
1. L_con, L_class 닫힌 형태를 정의 그대로의 이중합과 비교
2. 손실 기울기와 L_joint 의 추출기 기울기를 유한차분과 비교
3. 이동평균 텍스처 갱신의 대응 집합과 "빈 정점은 그대로" 규칙 확인
4. train_bank 의 trace, 조기 종료 규칙, 재개(resume) 확인
5. 같은 seed 에서 L_class 를 켜면 클래스 텍스처 평균 사이 최소 거리가 더 커지는지
"""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from core.camera import Pose, project
from core.mesh import BackgroundModel
from core_pipeline.m1_synth import SceneSpec, generate_scene
from core_pipeline.m2_train import (
    TRACE_COLUMNS,
    PreparedSample,
    TrainConfig,
    TrainSample,
    class_loss,
    class_loss_from_means,
    class_means,
    con_loss,
    con_loss_and_grad,
    joint_objective,
    train_bank,
    update_background,
    update_textures_ma,
)
from features.extractor import identity_extractor
from utils.errors import InvalidArgumentError, InvalidDatasetError, InvalidStateError


def _brute_con_loss(grid, fg_mask):
    fg = grid[fg_mask]
    bg = grid[~fg_mask]
    total = 0.0
    for fi in fg:
        total -= np.sum((fg - fi) ** 2)
        total -= np.sum((bg - fi) ** 2)
    return total


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 4, 2), elements=st.floats(-2.0, 2.0)),
    hnp.arrays(np.bool_, (3, 4)),
)
def test_con_loss_matches_double_sum(grid, fg_mask):
    if not fg_mask.any():
        with pytest.raises(InvalidStateError):
            con_loss(grid, fg_mask)
        return
    assert con_loss(grid, fg_mask) == pytest.approx(_brute_con_loss(grid, fg_mask), rel=1e-9, abs=1e-9)


def test_con_loss_with_full_foreground():
    grid = np.random.default_rng(0).normal(size=(4, 4, 3))
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    assert con_loss(grid, mask) < 0.0
    assert con_loss(grid, np.ones((4, 4), dtype=bool)) == pytest.approx(_brute_con_loss(grid, np.ones((4, 4), bool)))


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_con_loss_gradient(reduction):
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(4, 5, 3))
    mask = rng.uniform(size=(4, 5)) < 0.4
    mask[0, 0] = True
    _, grad = con_loss_and_grad(grid, mask, reduction)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (3, 4, 2), (2, 1, 0)]:
        step = np.zeros_like(grid)
        step[idx] = eps
        up, _ = con_loss_and_grad(grid + step, mask, reduction)
        down, _ = con_loss_and_grad(grid - step, mask, reduction)
        assert grad[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-6)


def test_con_loss_pair_sampling():
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(8, 8, 4))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    exact, _ = con_loss_and_grad(grid, mask, "mean")
    sampled, grad = con_loss_and_grad(grid, mask, "mean", pair_cap=200, rng=np.random.default_rng(0))
    assert np.isfinite(grad).all()
    assert sampled == pytest.approx(exact, rel=0.15)
    with pytest.raises(InvalidArgumentError):
        con_loss_and_grad(grid, mask, "mean", pair_cap=8, rng=None)
    with pytest.raises(InvalidArgumentError):
        con_loss_and_grad(grid, mask, "median")


def test_class_loss_matches_double_sum():
    means = np.random.default_rng(3).normal(size=(4, 5))
    expected = -sum(np.sum((means[y] - means[z]) ** 2) for y in range(4) for z in range(4) if z != y)
    assert class_loss(means) == pytest.approx(expected)
    loss_mean, _ = class_loss_from_means(means, "mean")
    assert loss_mean == pytest.approx(expected / 12)
    with pytest.raises(InvalidStateError):
        class_loss(means[:1])


def test_class_loss_uses_texture_means(tiny_bank):
    means = np.stack([m.texture.mean(axis=0) for m in tiny_bank.models])
    assert class_loss(tiny_bank) == pytest.approx(-2.0 * np.sum((means[0] - means[1]) ** 2))


def test_class_loss_gradient_step_separates_means():
    means = np.random.default_rng(4).normal(size=(3, 4))
    loss, grad = class_loss_from_means(means)
    eps = 1e-6
    step = np.zeros_like(means)
    step[1, 2] = eps
    numeric = (class_loss(means + step) - class_loss(means - step)) / (2 * eps)
    assert grad[1, 2] == pytest.approx(numeric, rel=1e-6)
    assert class_loss(means - 0.01 * grad) < loss


def _assignment_sets(proj, n_vertices):
    sets = {r: [] for r in range(n_vertices)}
    height, width = proj.fg_mask.shape
    for row in range(height):
        for col in range(width):
            r = proj.correspondence[row, col]
            if r >= 0:
                sets[r].append((row, col))
    for r in np.flatnonzero(proj.vertex_cell >= 0):
        cell = divmod(int(proj.vertex_cell[r]), width)
        if cell not in sets[r]:
            sets[r].append(cell)
    return sets


def test_texture_update_moves_assigned_vertices_only(tiny_bank, lattice_cam, gt_pose):
    model = tiny_bank.models[0]
    proj = project(model, gt_pose, lattice_cam)
    grid = np.random.default_rng(6).normal(size=(*lattice_cam.grid, tiny_bank.dim))
    updated = update_textures_ma(model, grid, proj, momentum=1.0, renormalize=False)

    sets = _assignment_sets(proj, model.n_vertices)
    for r, cells in sets.items():
        if not cells:
            assert np.array_equal(updated.texture[r], model.texture[r])
        else:
            expected = np.mean([grid[c] for c in cells], axis=0)
            assert np.allclose(updated.texture[r], expected)
    assert any(not cells for cells in sets.values())
    assert any(cells for cells in sets.values())


def test_texture_update_blends_and_renormalizes(tiny_bank, lattice_cam, gt_pose):
    model = tiny_bank.models[1]
    proj = project(model, gt_pose, lattice_cam)
    grid = np.random.default_rng(7).normal(size=(*lattice_cam.grid, tiny_bank.dim))
    updated = update_textures_ma(model, grid, proj, momentum=0.3)
    moved = np.any(updated.texture != model.texture, axis=1)
    assert moved.any()
    assert np.allclose(np.linalg.norm(updated.texture[moved], axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        update_textures_ma(model, grid, proj, momentum=0.0)


def test_background_update_tracks_feature_mean():
    bg = BackgroundModel(np.zeros(3), 1.0)
    feats = np.tile([1.0, 2.0, 3.0], (10, 1))
    updated = update_background(bg, feats, momentum=0.5)
    assert np.allclose(updated.mean, [0.5, 1.0, 1.5])
    assert updated.sigma > 0
    assert update_background(bg, np.zeros((0, 3)), 0.5) is bg


def _batch(bank, cam, seed=8):
    rng = np.random.default_rng(seed)
    poses = [Pose(0.3, 0.2, 0.0, 5.0), Pose(1.8, 0.5, 0.1, 5.0), Pose(4.0, 0.1, -0.2, 5.0)]
    batch = []
    for class_id, pose in zip((0, 1, 0), poses):
        proj = project(bank.models[class_id], pose, cam)
        batch.append(PreparedSample(rng.normal(size=(*cam.grid, bank.dim)), proj, class_id))
    return batch


def test_joint_objective_gradient_matches_finite_differences(tiny_bank, lattice_cam):
    rng = np.random.default_rng(9)
    dim = tiny_bank.dim
    extractor = identity_extractor(dim, stride=2).with_params(
        np.eye(dim) + 0.2 * rng.normal(size=(dim, dim)), 0.1 * rng.normal(size=dim)
    )
    batch = _batch(tiny_bank, lattice_cam)
    config = TrainConfig(momentum=0.5, w_con=1.0, w_class=2.0)
    _, d_w, d_b = joint_objective(extractor, tiny_bank, batch, config)

    def loss(weight, bias):
        return joint_objective(extractor.with_params(weight, bias), tiny_bank, batch, config)[0]

    eps = 1e-6
    for i, j in [(0, 0), (2, 5), (7, 3)]:
        step = np.zeros_like(extractor.weight)
        step[i, j] = eps
        numeric = (loss(extractor.weight + step, extractor.bias) - loss(extractor.weight - step, extractor.bias)) / (2 * eps)
        assert d_w[i, j] == pytest.approx(numeric, rel=1e-4, abs=1e-6)
    for k in [0, 4]:
        step = np.zeros_like(extractor.bias)
        step[k] = eps
        numeric = (loss(extractor.weight, extractor.bias + step) - loss(extractor.weight, extractor.bias - step)) / (2 * eps)
        assert d_b[k] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_joint_objective_gradient_on_random_configurations(tiny_bank, lattice_cam):
    rng = np.random.default_rng(19)
    dim = tiny_bank.dim
    h = 1e-4
    for case in range(100):
        extractor = identity_extractor(dim, stride=2, normalize=bool(case % 2)).with_params(
            np.eye(dim) + 0.3 * rng.normal(size=(dim, dim)), 0.2 * rng.normal(size=dim)
        )
        batch = _batch(tiny_bank, lattice_cam, seed=1000 + case)
        config = TrainConfig(momentum=rng.uniform(0.1, 1.0), w_con=rng.uniform(0.0, 2.0), w_class=rng.uniform(0.0, 2.0))
        _, d_w, d_b = joint_objective(extractor, tiny_bank, batch, config)

        v_w = rng.normal(size=d_w.shape)
        v_b = rng.normal(size=d_b.shape)

        def loss(t):
            moved = extractor.with_params(extractor.weight + t * v_w, extractor.bias + t * v_b)
            return joint_objective(moved, tiny_bank, batch, config)[0]

        numeric = (loss(h) - loss(-h)) / (2 * h)
        analytic = float(np.sum(d_w * v_w) + np.sum(d_b * v_b))
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-6), (case, analytic, numeric)


@pytest.fixture
def train_samples(tiny_settings):
    samples = []
    for k, class_id in enumerate((0, 1, 0, 1)):
        rec = generate_scene(SceneSpec(class_id, "L0", (), seed=100 + k), tiny_settings)
        samples.append(TrainSample(rec.image, rec.class_id, rec.pose, f"t{k}"))
    return samples


def test_train_bank_trace_and_monotone_objective(tiny_bank, lattice_cam, train_samples):
    config = TrainConfig(epochs=2, batch_size=2, pair_cap=64, seed=0)
    result = train_bank(train_samples, tiny_bank, lattice_cam, config)
    trace = result.trace
    assert list(trace.columns) == TRACE_COLUMNS
    assert trace["epoch"].tolist() == list(range(len(trace)))
    if not result.stopped_early:
        assert len(trace) == 3
    assert np.all(np.diff(trace["L_joint"]) <= config.early_stop_tolerance)
    result.bank.validate()
    assert result.bank is not tiny_bank


def test_train_bank_resume_continues_epochs(tiny_bank, lattice_cam, train_samples):
    config = TrainConfig(epochs=1, batch_size=2, pair_cap=64, seed=0)
    first = train_bank(train_samples, tiny_bank, lattice_cam, config)
    resumed = train_bank(train_samples, first.bank, lattice_cam, replace(config, epochs=3), trace=first.trace)
    n_old = len(first.trace)
    assert resumed.trace.iloc[:n_old].equals(first.trace)
    assert resumed.trace["epoch"].tolist() == list(range(len(resumed.trace)))


def test_train_bank_is_seeded(tiny_bank, lattice_cam, train_samples):
    config = TrainConfig(epochs=1, batch_size=2, pair_cap=64, seed=3)
    a = train_bank(train_samples, tiny_bank, lattice_cam, config)
    b = train_bank(train_samples, tiny_bank, lattice_cam, config)
    assert np.array_equal(a.bank.extractor.weight, b.bank.extractor.weight)
    assert all(np.array_equal(x.texture, y.texture) for x, y in zip(a.bank.models, b.bank.models))


def test_train_bank_requires_every_class(tiny_bank, lattice_cam, train_samples):
    only_zero = [s for s in train_samples if s.class_id == 0]
    with pytest.raises(InvalidDatasetError):
        train_bank(only_zero, tiny_bank, lattice_cam, TrainConfig(epochs=1))
    single = tiny_bank.with_models(tiny_bank.models[:1])
    with pytest.raises(InvalidDatasetError):
        train_bank(only_zero, single, lattice_cam, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(momentum=0.0).validate()
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=-1.0).validate()


def _min_mean_distance(bank):
    means = class_means(bank)
    return min(
        float(np.linalg.norm(means[y] - means[z])) for y in range(len(means)) for z in range(y + 1, len(means))
    )


def test_class_loss_separates_texture_means(tiny_bank, lattice_cam, train_samples):
    # 같은 seed (같은 배치 순서와 쌍 샘플) 에서 L_class 가중치만 다르게
    base = TrainConfig(epochs=3, batch_size=2, pair_cap=64, seed=5, early_stop_tolerance=1e9)
    with_class = train_bank(train_samples, tiny_bank, lattice_cam, replace(base, w_class=1.0))
    without = train_bank(train_samples, tiny_bank, lattice_cam, replace(base, w_class=0.0))
    assert not with_class.stopped_early and not without.stopped_early
    assert _min_mean_distance(with_class.bank) > _min_mean_distance(without.bank)
    assert with_class.trace["L_class"].iloc[-1] < without.trace["L_class"].iloc[-1]
