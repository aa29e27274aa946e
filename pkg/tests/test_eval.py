import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predfield import autodiff as ad
from predfield.evaluate import (AblationReport, compare_ablation, mmpjpe, overlay_points, predictor_loss,
                                read_points_csv, rollout_predict, toy_abs_err, track_all_starts, track_points,
                                write_trajectories_csv)
from predfield.nets import FieldBundle, predict_weights
from predfield.render import look_at
from predfield.scenes import ToySpec, make_toy2d
from predfield.train import TrainConfig, loss_pred

from helpers import mmpjpe_bruteforce, randomize, tiny_net_config


def random_instance(rng, frames, joints, K):
    gt = rng.normal(size=(frames, joints, 3))
    est = {u: gt[u:u + K + 1] + rng.normal(0, 0.3, (min(K + 1, frames - u), joints, 3)) for u in range(frames)}
    return est, gt


# --- mMPJPE ------------------------------------------------------------------------------


def test_perfect_tracking_is_zero():
    gt = np.random.default_rng(0).normal(size=(5, 3, 3))
    est = {u: gt[u:u + 3] for u in range(5)}
    assert mmpjpe(est, gt, 2) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_constant_offset_gives_its_norm(seed, d):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(5, 4, 3))
    direction = rng.normal(size=3)
    off = d * direction / np.linalg.norm(direction)
    est = {u: gt[u:u + 3] + off for u in range(5)}
    assert mmpjpe(est, gt, 2) == pytest.approx(d, rel=1e-9, abs=1e-12)


def test_hand_computed_small_instance():
    gt = np.array([[[0.0, 0, 0], [1, 0, 0]], [[0, 1, 0], [1, 1, 0]], [[0, 2, 0], [1, 2, 0]]])
    est = {0: np.array([gt[0], gt[1] + [3, 0, 0], gt[2]]), 1: np.array([gt[1], gt[2] + [0, 0, 4]])}
    # K=1: starts 0 and 1 -> errors 3 and 4
    assert mmpjpe(est, gt, 1) == pytest.approx(3.5)
    # K=2: only start 0 -> (3 + 0) / 2
    assert mmpjpe(est, gt, 2) == pytest.approx(1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matches_bruteforce_oracle(frames, joints, K, seed):
    """[DERIVED] double-loop oracle on random instances up to 5 frames and 4 joints."""
    if K > frames - 1:
        K = frames - 1
    est, gt = random_instance(np.random.default_rng(seed), frames, joints, K)
    assert mmpjpe(est, gt, K) == pytest.approx(mmpjpe_bruteforce(est, gt, K), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_k1_is_mean_adjacent_mpjpe(frames, joints, seed):
    est, gt = random_instance(np.random.default_rng(seed), frames, joints, 1)
    adjacent = np.mean([np.linalg.norm(est[u][1] - gt[u + 1], axis=-1).mean() for u in range(frames - 1)])
    assert mmpjpe(est, gt, 1) == pytest.approx(adjacent, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_translation_equivariance(frames, joints, seed):
    rng = np.random.default_rng(seed)
    K = frames - 1
    est, gt = random_instance(rng, frames, joints, K)
    shift = rng.normal(0, 10, 3)
    moved = {u: e + shift for u, e in est.items()}
    assert mmpjpe(moved, gt + shift, K) == pytest.approx(mmpjpe(est, gt, K), rel=1e-6)


def test_mmpjpe_rejects_bad_inputs():
    gt = np.zeros((4, 2, 3))
    with pytest.raises(ValueError, match="joint count"):
        mmpjpe({u: np.zeros((2, 3, 3)) for u in range(4)}, gt, 1)
    with pytest.raises(ValueError):
        mmpjpe({}, gt, 0)
    with pytest.raises(ValueError, match="too short"):
        mmpjpe({0: np.zeros((4, 2, 3))}, gt, 4)
    with pytest.raises(ValueError, match="joints"):
        mmpjpe({}, np.zeros((4, 0, 3)), 1)


# --- tracking ------------------------------------------------------------------------------


@pytest.fixture
def bundle():
    b = FieldBundle(tiny_net_config(), seed=3)
    randomize(b, np.random.default_rng(3), 0.3)
    return b


def test_zero_motion_track_is_constant(bundle):
    bundle.M.zero_output()
    seeds = np.random.default_rng(0).uniform(-0.5, 0.5, (6, 3))
    traj = track_points(bundle, seeds, 0, 5)
    assert traj.shape == (6, 6, 3)
    assert all(np.allclose(t, seeds, atol=1e-7) for t in traj)


def test_same_start_and_end_returns_seed(bundle):
    seeds = np.random.default_rng(1).uniform(-0.5, 0.5, (4, 3))
    traj = track_points(bundle, seeds, 2, 2)
    assert traj.shape == (1, 4, 3) and np.array_equal(traj[0], seeds)


def test_track_composition_exact(bundle):
    seeds = np.random.default_rng(2).uniform(-0.5, 0.5, (5, 3))
    whole = track_points(bundle, seeds, 0, 5)
    first = track_points(bundle, seeds, 0, 2)
    second = track_points(bundle, first[-1], 2, 5)
    assert np.array_equal(whole[:3], first) and np.array_equal(whole[2:], second)


def test_track_outside_interval(bundle):
    with pytest.raises(ValueError, match="u=0, v=6"):
        track_points(bundle, np.zeros((1, 3)), 0, 6)


def test_track_all_starts_feeds_mmpjpe(bundle):
    bundle.M.zero_output()
    gt = np.cumsum(np.full((6, 2, 3), 0.01), axis=0)
    est = track_all_starts(bundle, gt, 2)
    # stationary estimates against GT moving 0.01 per axis per frame
    step = np.sqrt(3) * 0.01
    assert mmpjpe(est, gt, 2) == pytest.approx(1.5 * step, rel=1e-4)


# --- rollout -----------------------------------------------------------------------------------


def test_single_step_rollout_is_predict(bundle):
    hist = bundle.codes.data[:bundle.cfg.history]
    r = rollout_predict(bundle, hist, 1)
    assert np.array_equal(r.codes[0], predict_weights(bundle, list(hist)).data)


def test_rollout_is_autoregressive(bundle):
    hist = list(bundle.codes.data[:bundle.cfg.history])
    r = rollout_predict(bundle, hist, 3, seeds=np.zeros((2, 3)))
    expect = []
    for _ in range(3):
        nxt = predict_weights(bundle, hist[-bundle.cfg.history:]).data
        expect.append(nxt)
        hist.append(nxt)
    assert np.array_equal(r.codes, np.stack(expect))
    assert r.positions.shape == (4, 2, 3)


def test_rollout_validates(bundle):
    with pytest.raises(ValueError):
        rollout_predict(bundle, bundle.codes.data[:1], 2)
    with pytest.raises(ValueError):
        rollout_predict(bundle, bundle.codes.data[:2], 0)


def test_constant_codes_overfit_rollout():
    """[DERIVED] a predictor fitted to a constant code sequence keeps rolling out that constant."""
    b = FieldBundle(tiny_net_config(num_transitions=8, predictor_width=16), seed=0)
    c = np.array([0.3, -0.2, 0.1], dtype=b.codes.dtype)
    b.codes.data[:] = c
    st_ = ad.AdamState(learning_rate=3e-3)
    for _ in range(600):
        total = loss_pred(b, b.cfg.history, "predictor_only")
        for j in range(b.cfg.history + 1, b.num_transitions):
            total = ad.add(total, loss_pred(b, j, "predictor_only"))
        ad.backward(total)
        ad.adam_step(b.predictor_parameters(), st_)
    assert predictor_loss(b) < 1e-5
    r = rollout_predict(b, b.codes.data[:b.cfg.history], 5)
    assert np.abs(r.codes - c).max() < 1e-2


# --- toy error and ablations ---------------------------------------------------------------------


def test_toy_abs_err_examples():
    toy = make_toy2d(ToySpec(resolution=8, frame_count=4))
    assert toy_abs_err(toy.motion, toy) == 0.0
    shifted = toy.motion.copy()
    shifted[..., 0] += 0.01
    assert toy_abs_err(shifted, toy) == pytest.approx(0.005)
    with pytest.raises(ValueError, match="shape"):
        toy_abs_err(toy.motion[:, :4], toy)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_toy_abs_err_non_negative_and_zero_only_at_gt(seed):
    toy = make_toy2d(ToySpec(resolution=4, frame_count=3, noise=0.0))
    rng = np.random.default_rng(seed)
    est = toy.motion.copy()
    idx = tuple(rng.integers(0, s) for s in est.shape)
    est[idx] += rng.uniform(1e-6, 1.0) * rng.choice([-1, 1])
    assert toy_abs_err(est, toy) > 0


TOY_CFG = dict(rays_per_batch=32, interval_length=5, field_width=8, field_depth=2, field_skip=None,
               motion_width=8, motion_depth=2, motion_skip=None, predictor_width=8, pos_frequencies=2,
               time_frequencies=1, log_every=0, iterations=6)


def test_identical_arms_give_identical_metrics(tmp_path):
    toy = make_toy2d(ToySpec(resolution=8, frame_count=5))
    cfg = TrainConfig(**TOY_CFG)
    rep = compare_ablation(toy, {"a": cfg, "b": cfg}, [0, 1], "toy_abs_err", csv_path=tmp_path / "abl.csv")
    assert rep.values["a"] == rep.values["b"]
    assert rep.wins() == 0 and not rep.verdict
    rows = (tmp_path / "abl.csv").read_text().splitlines()
    assert rows[0] == "seed,toy_abs_err_a,toy_abs_err_b,first_lower" and rows[-1].startswith("mean,")


def test_ablation_needs_two_arms():
    with pytest.raises(ValueError, match="two arms"):
        compare_ablation(None, {"a": TrainConfig()}, [0], "toy_abs_err")


def test_report_verdict():
    rep = AblationReport("m", ("x", "y"), [0, 1, 2], {"x": [1.0, 2.0, 3.0], "y": [1.5, 2.5, 3.5]})
    assert rep.wins() == 3 and rep.verdict
    rep.values["x"][1] = 2.5
    assert rep.wins() == 2 and not rep.verdict


# --- exports ---------------------------------------------------------------------------------------


def test_trajectory_csv_roundtrip(tmp_path):
    pos = np.random.default_rng(0).normal(size=(3, 2, 3))
    write_trajectories_csv(tmp_path / "t.csv", pos, start_frame=4)
    frames, pts = read_points_csv(tmp_path / "t.csv")
    assert list(frames) == [4, 4, 5, 5, 6, 6]
    np.testing.assert_allclose(pts, pos.reshape(-1, 3), rtol=1e-5)


def test_overlay_marks_projected_point():
    cam = look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 20.0, 16, 16)
    out = overlay_points(np.zeros((16, 16, 3)), cam, np.zeros((1, 3)), radius=0)
    u, v = np.round(cam.project(np.zeros((1, 3)))[0]).astype(int)
    assert np.array_equal(out[v, u], [0, 1, 0]) and out.sum() == 1.0
