"""Samplers, losses, exact gradients, the optimizer, and the train loop."""

import filecmp

import numpy as np
import pytest

from conftest import synthetic_sample, tiny_field_params, tiny_scene
from fieldrig.character import (analytic_occupancy, character_bounds,
                                character_mesh)
from fieldrig.fields import (BRANCHES, init_field_params, iter_params,
                             set_param)
from fieldrig.metrics import nearest_surface
from fieldrig.training import (LossWeights, TrainBatch, TrainConfig, backward,
                               gradient_check, heatmap_targets,
                               init_optim_state, loss_occ, loss_pose,
                               loss_skin, loss_total, make_train_batch,
                               read_loss_history, rmsprop_step,
                               sample_occupancy_points, sample_pose_points,
                               sample_skinning_points, train,
                               write_loss_history)


def zeroed_params():
    params = tiny_field_params()
    for name, arr in iter_params(params):
        set_param(params, name, np.zeros_like(arr))
    return params


def one_point_batch(target_occ=1.0):
    return TrainBatch([[0.0, 0.0, 2.0]], [target_occ],
                      [[0.0, 0.0, 2.0]], np.zeros((1, 5)),
                      [[0.0, 0.0, 2.0]], np.eye(5)[:1])


# ---------------------------------------------------------------------------
# Samplers


def test_occupancy_sampler_counts_targets_and_bias(char0):
    mesh = character_mesh(char0, None, resolution=32)
    pts, t = sample_occupancy_points(char0, None, 1000, seed=3, surface=mesh)
    assert pts.shape == (1000, 3)
    assert np.array_equal(t, analytic_occupancy(char0, pts))
    # First ceil(0.9 n) rows ride the surface; the tail is uniform.
    d, _, _ = nearest_surface(pts[:900], mesh)
    assert d.max() < 0.2
    assert 0.35 < t[:900].mean() < 0.65
    center, side = character_bounds(char0, None)
    assert np.all(np.abs(pts[900:] - center) <= side / 2 + 1e-12)


def test_occupancy_sampler_uniform_mode_and_validation(char0):
    pts, t = sample_occupancy_points(char0, None, 400, mix=0.0, seed=1)
    center, side = character_bounds(char0, None)
    assert np.all(np.abs(pts - center) <= side / 2 + 1e-12)
    assert t.mean() < 0.5
    again, _ = sample_occupancy_points(char0, None, 400, mix=0.0, seed=1)
    assert np.array_equal(pts, again)
    with pytest.raises(ValueError):
        sample_occupancy_points(char0, None, 10, mix=1.2)


def test_heatmap_targets_gaussian_of_distance():
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    t = heatmap_targets([[0.05, 0.0, 0.0]], joints, sigma_heat=0.05)
    assert t.shape == (1, 2)
    assert abs(t[0, 0] - np.exp(-0.5)) < 1e-12
    assert t[0, 1] < 1e-12
    peak = heatmap_targets(joints[:1], joints, sigma_heat=0.05)
    assert peak[0, 0] == 1.0


def test_pose_sampler_round_robin_and_targets():
    joints = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    pts, t = sample_pose_points(joints, 9, mix=1.0, sigma_joint=0.01, seed=2)
    for i in range(9):
        assert np.linalg.norm(pts[i] - joints[i % 3]) < 0.1
    assert np.array_equal(t, heatmap_targets(pts, joints))
    mixed, _ = sample_pose_points(joints, 10, mix=0.5, seed=2)
    assert mixed.shape == (10, 3)
    lo, hi = joints.min(axis=0), joints.max(axis=0)
    side = float((hi - lo).max()) + 0.5
    assert np.all(np.abs(mixed[5:] - 0.5 * (lo + hi)) <= side / 2)
    with pytest.raises(ValueError):
        sample_pose_points(joints, 5, mix=-0.1)


def test_skinning_sampler_simplex_targets(char0):
    mesh = character_mesh(char0, None, resolution=32)
    pts, t = sample_skinning_points(char0, 200, seed=5, surface=mesh)
    assert t.shape == (200, 15)
    assert np.abs(t.sum(axis=1) - 1.0).max() < 1e-9
    for leaf in (2, 5, 8, 11, 14):
        assert not t[:, leaf].any()
    d, _, _ = nearest_surface(pts, mesh)
    assert d.max() < 0.2
    empty_p, empty_t = sample_skinning_points(char0, 0)
    assert empty_p.shape == (0, 3) and empty_t.shape == (0, 15)


def test_train_batch_validation():
    good = one_point_batch()
    assert good.n_occ == 1 and good.n_pose == 1 and good.n_skin == 1
    p = [[0.0, 0.0, 0.0]]
    with pytest.raises(ValueError):
        TrainBatch(p, [0.5, 0.5], p, np.zeros((1, 5)), p, np.eye(5)[:1])
    with pytest.raises(ValueError):
        TrainBatch(p, [1.5], p, np.zeros((1, 5)), p, np.eye(5)[:1])
    with pytest.raises(ValueError):
        TrainBatch(p, [1.0], p, np.zeros(5), p, np.eye(5)[:1])
    with pytest.raises(ValueError):
        TrainBatch(p, [1.0], p, np.zeros((1, 5)) - 0.1, p, np.eye(5)[:1])
    with pytest.raises(ValueError):
        TrainBatch(p, [1.0], p, np.zeros((1, 5)), p, 0.9 * np.eye(5)[:1])


# ---------------------------------------------------------------------------
# Losses


def test_zeroed_model_losses_are_hand_computable():
    # All-zero parameters pin every sigmoid at 1/2 and the softmax at 1/k,
    # so each head loss reduces to arithmetic on the targets.
    params = zeroed_params()
    sample = synthetic_sample(seed=0)
    batch = one_point_batch(target_occ=1.0)
    assert loss_occ(batch, params, sample) == 0.25
    assert loss_occ(one_point_batch(0.0), params, sample) == 0.25
    assert loss_pose(batch, params, sample) == 5 * 0.25
    assert abs(loss_skin(batch, params, sample) - 0.8) < 1e-9
    total = loss_total(batch, params, sample)
    parts = (loss_occ(batch, params, sample)
             + loss_pose(batch, params, sample)
             + loss_skin(batch, params, sample))
    assert abs(total - parts) < 1e-15
    assert loss_total(batch, params, sample, LossWeights(2.0, 0.0, 0.0)) == 0.5


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(occ=-1.0)


# ---------------------------------------------------------------------------
# Gradients


def gradcheck_setup(with_image=True, seed=21):
    params = init_field_params(seed, vox_channels=2, im_channels=2, hidden=3,
                               n_joints=2, n_bones=2)
    # Freshly initialized parameters sit exactly on the leaky-ReLU corner
    # wherever a zero bias meets an empty count-grid cell, and no exact
    # gradient agrees with a difference stencil across a corner.  Randomize
    # every entry (biases included) to check in general position.
    rng = np.random.default_rng([seed, 99])
    for name, arr in iter_params(params):
        set_param(params, name,
                  rng.normal(0.0, 0.4, arr.shape).astype(np.float32))
    sample = synthetic_sample(seed=1, n_points=60, vox=4, hw=8,
                              with_image=with_image)
    rng = np.random.default_rng(9)
    blob = lambda n: rng.normal(0.0, 0.25, (n, 3)) + [0.0, 0.0, 2.0]
    skin_t = rng.random((3, 2)) + 0.1
    skin_t /= skin_t.sum(axis=1, keepdims=True)
    batch = TrainBatch(blob(5), rng.integers(0, 2, 5).astype(float),
                       blob(4), rng.random((4, 2)), blob(3), skin_t)
    return params, sample, batch


def test_gradients_match_finite_differences():
    params, sample, batch = gradcheck_setup()
    res = gradient_check(params, batch, sample, LossWeights(0.7, 1.1, 0.9))
    assert res.passed, res.failures[:3]
    assert res.checked == sum(a.size for _, a in iter_params(params))
    assert res.max_error < 1e-4


def test_gradients_match_finite_differences_without_image():
    params, sample, batch = gradcheck_setup(with_image=False)
    res = gradient_check(params, batch, sample)
    assert res.passed, res.failures[:3]
    grads = backward(batch, params, sample)
    assert not grads["im_enc.lift.weight"].any()
    assert grads["vox_enc.lift.weight"].any()


def test_backward_rejects_weighted_empty_head():
    params, sample, batch = gradcheck_setup()
    empty = TrainBatch(batch.occ_points, batch.occ_targets,
                       np.zeros((0, 3)), np.zeros((0, 2)),
                       batch.skin_points, batch.skin_targets)
    with pytest.raises(ValueError):
        backward(empty, params, sample)
    grads = backward(empty, params, sample, LossWeights(1.0, 0.0, 1.0))
    assert not grads["pose.w0"].any()
    assert grads["occ.w0"].any()


# ---------------------------------------------------------------------------
# Optimizer


def test_rmsprop_matches_hand_computed_step():
    params = tiny_field_params(seed=2)
    set_param(params, "occ.b4", np.array([1.0], dtype=np.float32))
    before = {n: a.copy() for n, a in iter_params(params)}
    grads = {name: np.zeros(arr.shape) for name, arr in iter_params(params)}
    grads["occ.b4"] = np.array([2.0])
    state = init_optim_state(params, lr=1e-3)
    params, state = rmsprop_step(params, grads, state)
    # v = 0.01 * 4, theta = 1 - 1e-3 * 2 / (0.2 + 1e-8)
    assert abs(state.v["occ.b4"][0] - 0.04) < 1e-15
    assert abs(params.occ.biases[4][0] - 0.99000) < 1e-6
    assert state.step == 1
    for name, arr in iter_params(params):
        if name != "occ.b4":
            assert arr.tobytes() == before[name].tobytes(), name
    grads["occ.b4"] = np.zeros(3)
    with pytest.raises(ValueError):
        rmsprop_step(params, grads, state)


def test_learning_rate_decay_schedule():
    params = tiny_field_params()
    zeros = {name: np.zeros(arr.shape) for name, arr in iter_params(params)}
    state = init_optim_state(params, lr=1e-3, decay_steps=(1, 3))
    seen = []
    for _ in range(4):
        params, state = rmsprop_step(params, zeros, state)
        seen.append(state.lr)
    assert np.allclose(seen, [1e-3, 1e-4, 1e-4, 1e-5])


def test_train_config_validation():
    TrainConfig().validate()
    bad = [dict(steps=-1), dict(mix_occ=1.5), dict(sigma_heat=0.0),
           dict(rho=1.0), dict(branches=()), dict(branches=("rgb",)),
           dict(n_occ=0), dict(hidden=0), dict(learning_rate=-1.0)]
    for kw in bad:
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()
    # A zero-weight head may go without points.
    TrainConfig(n_pose=0, weights=LossWeights(pose=0.0)).validate()


# ---------------------------------------------------------------------------
# Training loop


def toy_cfg(**kw):
    kw.setdefault("seed", 5)
    kw.setdefault("steps", 3)
    kw.setdefault("n_occ", 12)
    kw.setdefault("n_pose", 12)
    kw.setdefault("n_skin", 12)
    kw.setdefault("vox_channels", 4)
    kw.setdefault("im_channels", 4)
    kw.setdefault("hidden", 8)
    kw.setdefault("surface_resolution", 16)
    return TrainConfig(**kw)


def test_train_is_deterministic():
    dataset = [tiny_scene(seed=0, mesh_res=16, img=16, vox=8)]
    p1, h1 = train(dataset, toy_cfg())
    p2, h2 = train(dataset, toy_cfg())
    assert h1 == h2
    for (name, a), (_, b) in zip(iter_params(p1), iter_params(p2)):
        assert a.tobytes() == b.tobytes(), name


def test_train_with_zero_learning_rate_keeps_init():
    dataset = [tiny_scene(seed=0, mesh_res=16, img=16, vox=8)]
    cfg = toy_cfg(learning_rate=0.0)
    params, history = train(dataset, cfg)
    init = init_field_params(cfg.seed, vox_channels=4, im_channels=4,
                             hidden=8, vox_in=1, im_in=2)
    for (name, a), (_, b) in zip(iter_params(params), iter_params(init)):
        assert a.tobytes() == b.tobytes(), name
    assert len(history) == cfg.steps
    assert all(np.isfinite(row[4]) for row in history)


def test_train_reduces_loss():
    dataset = [tiny_scene(seed=0, mesh_res=16, img=16, vox=8)]
    cfg = toy_cfg(steps=60, n_occ=32, n_pose=32, n_skin=32)
    _, history = train(dataset, cfg)
    totals = [row[4] for row in history]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_train_rejects_bad_datasets():
    with_image = tiny_scene(seed=0, mesh_res=16, img=16, vox=8)
    lidar_only = tiny_scene(seed=1, mesh_res=16, img=16, vox=8,
                            with_image=False)
    with pytest.raises(ValueError):
        train([], toy_cfg())
    with pytest.raises(ValueError):
        train([with_image, lidar_only], toy_cfg(steps=1))


def test_make_train_batch_is_deterministic(char0):
    cfg = toy_cfg(n_occ=12, n_pose=7, n_skin=9)
    rest = character_mesh(char0, None, resolution=16)
    a = make_train_batch(char0, None, cfg, [3, 0], posed_surface=rest,
                         rest_surface=rest)
    b = make_train_batch(char0, None, cfg, [3, 0], posed_surface=rest,
                         rest_surface=rest)
    c = make_train_batch(char0, None, cfg, [3, 1], posed_surface=rest,
                         rest_surface=rest)
    assert (a.n_occ, a.n_pose, a.n_skin) == (12, 7, 9)
    assert np.array_equal(a.occ_points, b.occ_points)
    assert np.array_equal(a.pose_points, b.pose_points)
    assert np.array_equal(a.skin_points, b.skin_points)
    assert not np.array_equal(a.occ_points, c.occ_points)


def test_loss_history_round_trip(tmp_path):
    history = [(0, 0.1, 0.2, 0.30000000000004, 0.6),
               (1, 1e-17, 0.19, 0.29, float(np.pi))]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_loss_history(history, p1)
    back = read_loss_history(p1)
    assert back == history
    write_loss_history(back, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    p3 = tmp_path / "bad.csv"
    p3.write_text("step,loss\n0,1.0\n")
    with pytest.raises(ValueError):
        read_loss_history(p3)
