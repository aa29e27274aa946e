import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predfield import autodiff as ad
from predfield.nets import (FieldBundle, MlpSpec, NetConfig, PositionalEncoderSpec, embed_weights, init_bundle,
                            mlp_parameter_count, motion_query, positional_encode, predict_weights, spacetime_query)
from predfield.train import TrainConfig

from helpers import randomize, relu_margin, tiny_net_config


# --- positional encoding ----------------------------------------------------------------


def test_encode_zero():
    out = positional_encode(np.zeros((1, 1)), 2, True).data
    assert np.array_equal(out, [[0.0, 0.0, 1.0, 0.0, 1.0]])


def test_encoded_dimension():
    spec = PositionalEncoderSpec()
    assert spec.dim(3, spec.num_frequencies_position) == 63
    assert positional_encode(np.zeros((2, 3)), 10, True).shape == (2, 63)
    assert positional_encode(np.zeros((2, 3)), 4, False).shape == (2, 24)


def test_encode_matches_formula():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (5, 3))
    with ad.precision(np.float64):
        got = positional_encode(x, 4, True).data
    cols = [x]
    for k in range(4):
        cols += [np.sin(2 ** k * np.pi * x), np.cos(2 ** k * np.pi * x)]
    np.testing.assert_allclose(got, np.concatenate(cols, axis=-1), rtol=1e-12, atol=1e-14)


def test_encode_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        positional_encode(np.array([[np.inf, 0.0]]), 2)


def test_mlp_skip_validation():
    with pytest.raises(ValueError):
        MlpSpec(4, (8, 8), 1, skip=2)
    with pytest.raises(ValueError):
        MlpSpec(4, (8, 8), 1, skip=0)


# --- space-time field --------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_bundle():
    return FieldBundle(NetConfig(), seed=0)


def test_head_ranges_on_random_queries(default_bundle):
    rng = np.random.default_rng(1)
    p = rng.uniform(-1, 1, (1000, 3))
    t = rng.uniform(0, 1, 1000)
    s = spacetime_query(default_bundle, p, t)
    assert (s.density.data >= 0).all()
    assert ((s.color.data >= 0) & (s.color.data <= 1)).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-10, 10), st.floats(0, 1))
def test_head_ranges_for_any_parameters(seed, spread, t):
    rng = np.random.default_rng(seed)
    bundle = FieldBundle(tiny_net_config(), seed % 1000)
    randomize(bundle, rng, scale=abs(spread) + 0.1)
    s = spacetime_query(bundle, rng.uniform(-1, 1, (20, 3)), t)
    assert (s.density.data >= 0).all()
    assert ((s.color.data >= 0) & (s.color.data <= 1)).all()


def test_query_is_deterministic(default_bundle):
    p = np.array([[0.1, -0.2, 0.3]])
    a = spacetime_query(default_bundle, p, 0.4)
    b = spacetime_query(default_bundle, p, 0.4)
    assert np.array_equal(a.color.data, b.color.data) and np.array_equal(a.density.data, b.density.data)


def test_out_of_bounds_points_are_clamped(default_bundle):
    inside = spacetime_query(default_bundle, np.array([[1.0, 0.0, -1.0]]), 0.5)
    outside = spacetime_query(default_bundle, np.array([[1.7, 0.0, -3.0]]), 0.5)
    assert np.array_equal(inside.color.data, outside.color.data)


def test_uninitialised_bundle_rejected():
    with pytest.raises(ValueError, match="not initialised"):
        spacetime_query(None, np.zeros((1, 3)), 0.0)


def test_empty_scene_fit_drives_density_to_zero():
    """[DERIVED] a field trained on empty rays learns sigma ~ 0 where sampled."""
    from predfield.render import RayBatch, render_rays, sample_points

    bundle = FieldBundle(tiny_net_config(field_width=16), seed=3)
    rng = np.random.default_rng(3)
    state = ad.AdamState(learning_rate=1e-2)
    origins = np.tile([0.0, 0.0, -3.0], (64, 1))
    for _ in range(150):
        d = rng.normal(size=(64, 3)) * [0.2, 0.2, 0.0] + [0, 0, 1]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rays = RayBatch(origins, d, np.full(64, 2.0), np.full(64, 4.0), 0.5)
        rgb, _ = render_rays(bundle, rays, sample_points(rays, 16, True, rng))
        ad.backward(ad.mean(ad.sqdiff(rgb, np.zeros((64, 3), dtype=np.float32))))
        params = bundle.field_parameters()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        ad.adam_step(params, state)
    pts = rng.uniform(-0.5, 0.5, (500, 3))
    assert spacetime_query(bundle, pts, 0.5).density.data.mean() < 0.05


# --- basis and embeddings ------------------------------------------------------------------


def test_embed_one_hot_selects_row():
    B = ad.Tensor(np.arange(15.0).reshape(5, 3))
    w = np.zeros(5)
    w[1] = 1
    assert np.array_equal(embed_weights(B, w).data, B.data[1])
    assert np.array_equal(embed_weights(B, np.zeros(5)).data, np.zeros(3))


def test_embed_matches_loop():
    rng = np.random.default_rng(4)
    B, w = rng.normal(size=(5, 32)), rng.normal(size=5)
    with ad.precision(np.float64):
        got = embed_weights(ad.Tensor(B), w).data
    loop = np.zeros(32)
    for i in range(5):
        for j in range(32):
            loop[j] += w[i] * B[i, j]
    np.testing.assert_allclose(got, loop, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_embed_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    B = ad.Tensor(rng.normal(size=(5, 8)), dtype=np.float64)
    u, v = rng.normal(size=5), rng.normal(size=5)
    with ad.precision(np.float64):
        lhs = embed_weights(B, alpha * u + beta * v).data
        rhs = alpha * embed_weights(B, u).data + beta * embed_weights(B, v).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_embed_length_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        embed_weights(ad.Tensor(np.zeros((5, 3))), np.zeros(4))


# --- motion field -----------------------------------------------------------------------------


def test_motion_output_shape(default_bundle):
    out = motion_query(default_bundle, np.zeros((7, 3)), default_bundle.embedding(0))
    assert out.shape == (7, 3)


def test_motion_rejects_wrong_embedding_length(default_bundle):
    with pytest.raises(ValueError, match="embedding shape"):
        motion_query(default_bundle, np.zeros((1, 3)), np.zeros(31))


def test_distinct_embeddings_give_distinct_motion(default_bundle):
    rng = np.random.default_rng(5)
    p = rng.uniform(-1, 1, (1, 3))
    outs = [motion_query(default_bundle, p, rng.normal(0, 1, 32)).data for _ in range(20)]
    diffs = [np.abs(a - b).max() for i, a in enumerate(outs) for b in outs[i + 1:]]
    assert min(diffs) > 0


def test_motion_weight_gradient_matches_fd():
    """[DERIVED] d||dp||^2 / dw against central differences."""
    with ad.precision(np.float64):
        bundle = FieldBundle(tiny_net_config(), seed=6)
        rng = np.random.default_rng(6)
        randomize(bundle, rng)
        p = rng.uniform(-1, 1, (4, 3))

        def f():
            d = motion_query(bundle, p, bundle.embedding(2))
            return ad.sum_(ad.mul(d, d))

        with relu_margin() as seen:
            f()
        assert seen[0] > 1e-3
        report = ad.grad_check(f, [bundle.codes, bundle.basis])
    assert report.passed, report.max_rel_error


# --- predictor ---------------------------------------------------------------------------------


def test_predictor_dimensions(default_bundle):
    W0 = default_bundle.P.layers[0][0]
    Wl = default_bundle.P.layers[-1][0]
    assert W0.shape[0] == 15 and Wl.shape[1] == 5
    assert len(default_bundle.P.layers) == 5
    out = predict_weights(default_bundle, [np.zeros(5)] * 3)
    assert out.shape == (5,)


def test_predictor_deterministic(default_bundle):
    h = [np.full(5, 0.1 * i) for i in range(3)]
    assert np.array_equal(predict_weights(default_bundle, h).data, predict_weights(default_bundle, h).data)


def test_predictor_history_length_checked(default_bundle):
    with pytest.raises(ValueError, match="need 3 history"):
        predict_weights(default_bundle, [np.zeros(5)] * 2)
    with pytest.raises(ValueError, match="shape"):
        predict_weights(default_bundle, [np.zeros(4)] * 3)


def test_predictor_fits_constant_sequence():
    """[DERIVED] P learns a constant code sequence to within 1e-2."""
    bundle = FieldBundle(NetConfig(predictor_width=32), seed=7)
    c = np.full(5, 0.3, dtype=np.float32)
    state = ad.AdamState(learning_rate=1e-3)
    for _ in range(300):
        out = predict_weights(bundle, [c, c, c])
        ad.backward(ad.sum_(ad.sqdiff(out, c)))
        ad.adam_step(bundle.predictor_parameters(), state)
    assert np.abs(predict_weights(bundle, [c, c, c]).data - c).max() < 1e-2


# --- initialisation -----------------------------------------------------------------------------


def test_init_reproducible():
    a, b = FieldBundle(tiny_net_config(), 11), FieldBundle(tiny_net_config(), 11)
    for x, y in zip(a.parameters(), b.parameters()):
        assert x.name == y.name and np.array_equal(x.data, y.data)


def test_init_bundle_from_train_config():
    cfg = TrainConfig(field_width=8, motion_width=8, predictor_width=8, field_depth=2, field_skip=1,
                      motion_depth=2, motion_skip=1)
    b = init_bundle(cfg, 0)
    assert b.codes.shape == (24, 5) and b.basis.shape == (5, 32)


def test_default_field_parameter_count():
    """[DERIVED] hand count: input 63 + 13, six 128-wide layers, skip into layer 4, 4 outputs."""
    b = FieldBundle(NetConfig(), 0)
    inp = 3 * 21 + 1 * 13
    hand = (inp * 128 + 128) + 3 * (128 * 128 + 128) + ((128 + inp) * 128 + 128) + (128 * 128 + 128) + (128 * 4 + 4)
    assert sum(p.size for p in b.field_parameters()) == hand
    assert hand == mlp_parameter_count(inp, (128,) * 6, 4, 4)


def test_basis_row_norm_statistics():
    """[DERIVED] mean row norm over 100 seeds agrees with the chi distribution."""
    m, n = 32, 5
    sigma = 0.1 / math.sqrt(m)
    norms = []
    for seed in range(100):
        b = FieldBundle(NetConfig(field_width=4, motion_width=4, predictor_width=4, field_depth=2, field_skip=1,
                                  motion_depth=2, motion_skip=1), seed)
        norms.extend(np.linalg.norm(b.basis.data, axis=1))
    mean_chi = sigma * math.sqrt(2) * math.exp(math.lgamma((m + 1) / 2) - math.lgamma(m / 2))
    var_chi = sigma ** 2 * m - mean_chi ** 2
    stderr = math.sqrt(var_chi / (100 * n))
    assert abs(np.mean(norms) - mean_chi) < 3 * stderr


def test_per_frame_embedding_layout():
    b = FieldBundle(tiny_net_config(embedding="per_frame"), 0)
    assert b.basis is None and b.codes.shape == (5, 4)
    assert b.P.layers[0][0].shape[0] == 2 * 4
    assert np.array_equal(b.embedding(1).data, b.codes.data[1])


def test_transition_index_checked(default_bundle):
    with pytest.raises(IndexError):
        default_bundle.embedding(24)


def test_forward_is_pure(default_bundle):
    before = {k: v.copy() for k, v in default_bundle.named_arrays().items()}
    spacetime_query(default_bundle, np.zeros((3, 3)), 0.2)
    motion_query(default_bundle, np.zeros((3, 3)), default_bundle.embedding(0))
    predict_weights(default_bundle, [default_bundle.codes[i] for i in range(3)])
    for k, v in default_bundle.named_arrays().items():
        assert np.array_equal(v, before[k])


def test_motion_field_can_use_fewer_bands():
    cfg = tiny_net_config(encoder=PositionalEncoderSpec(4, 1, True, num_frequencies_motion=1))
    b = FieldBundle(cfg, seed=0)
    assert b.M.spec.in_dim == 3 * (1 + 2 * 1) + cfg.embed_dim
    assert b.F.spec.in_dim == 3 * (1 + 2 * 4) + 1 * (1 + 2 * 1)
    out = motion_query(b, np.zeros((2, 3)), b.embedding(0))
    assert out.shape == (2, 3)
