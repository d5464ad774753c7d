import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chemolab.nn import (
    CheckpointError,
    ParamStore,
    VariantSpec,
    assemble_input,
    dense_backward,
    dense_forward,
    forward_sequence,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_sample,
    gru_backward,
    gru_step,
    init_params,
    load_checkpoint,
    policy_backward,
    policy_forward,
    save_checkpoint,
    sigmoid,
    softplus,
)
from oracles import bptt_fd_check, fd_gradient, flatten_grads, policy_fd_check

SMALL_TEMPORAL = VariantSpec("temporal", hidden=8, post_width=8)
SMALL_COMBINED = VariantSpec("combined", n_sensors=5, hidden=8, post_width=8)
SMALL_SPATIAL = VariantSpec("spatial", n_sensors=5, mlp_widths=(12, 12))


# ---------------------------------------------------------------- dense layer

def test_dense_identity_and_bias():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(dense_forward(x, np.zeros((3, 3)), b),
                          np.tile(b, (2, 1)))


def test_dense_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dense_forward(np.zeros((2, 4)), np.zeros((3, 5)), np.zeros(5))


@pytest.mark.parametrize("seed", range(10))
def test_dense_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((7, 5))
    w = rng.standard_normal((5, 8))
    b = rng.standard_normal(8)
    w_out = rng.standard_normal((7, 8))

    grad_x, grad_w, grad_b = dense_backward(x, w, w_out)

    def loss(wv, bv):
        return float((w_out * dense_forward(x, wv, bv)).sum())

    eps = 1e-6
    num_w = np.zeros_like(w)
    for i in range(w.size):
        up, dn = w.copy().ravel(), w.copy().ravel()
        up[i] += eps
        dn[i] -= eps
        num_w.ravel()[i] = (loss(up.reshape(w.shape), b) - loss(dn.reshape(w.shape), b)) / (2 * eps)
    assert np.max(np.abs(grad_w - num_w) / (1.0 + np.abs(num_w))) <= 1e-6
    num_b = np.zeros_like(b)
    for i in range(b.size):
        up, dn = b.copy(), b.copy()
        up[i] += eps
        dn[i] -= eps
        num_b[i] = (loss(w, up) - loss(w, dn)) / (2 * eps)
    assert np.max(np.abs(grad_b - num_b) / (1.0 + np.abs(num_b))) <= 1e-6


# ---------------------------------------------------------------- GRU cell

def zero_gru_params(spec):
    params = init_params(spec, seed=0)
    for name in params.names:
        params[name] = np.zeros_like(params[name])
    return params


def test_gru_all_zero_params_halves_hidden():
    spec = SMALL_TEMPORAL
    p = zero_gru_params(spec)
    h = np.linspace(-0.9, 0.9, spec.hidden)[None, :]
    x = np.ones((1, spec.input_dim))
    h_new, _ = gru_step(x, h, p)
    np.testing.assert_allclose(h_new, 0.5 * h, rtol=1e-15)
    h_new, _ = gru_step(x, np.zeros_like(h), p)
    np.testing.assert_array_equal(h_new, np.zeros_like(h))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_gru_hidden_stays_bounded(seed):
    # strict openness at scales where float64 tanh cannot saturate, and the
    # closed bound even under saturating weights
    rng = np.random.default_rng(seed)
    spec = SMALL_TEMPORAL
    params = init_params(spec, seed=seed)
    h = rng.uniform(-0.999, 0.999, (4, spec.hidden))
    x = rng.standard_normal((4, spec.input_dim)) * 2.0
    h_new, _ = gru_step(x, h, params)
    assert (np.abs(h_new) < 1.0).all()
    for name in params.names:
        if name.startswith("gru"):
            params[name] = 40.0 * rng.standard_normal(params[name].shape)
    h_new, _ = gru_step(x, h, params)
    assert (np.abs(h_new) <= 1.0).all()


@pytest.mark.parametrize("seed", range(10))
def test_bptt_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    spec = SMALL_TEMPORAL
    params = init_params(spec, seed=seed)
    b, length = 3, 16
    xs = rng.standard_normal((b, length, spec.input_dim))
    h0 = rng.uniform(-0.5, 0.5, (b, spec.hidden))
    reset = np.zeros((b, length))
    reset[0, 7] = 1.0  # mid-segment episode boundary must participate too
    err = bptt_fd_check(params, spec, xs, h0, reset, rng)
    assert err <= 1e-5


@pytest.mark.parametrize("kind", ["spatial", "combined"])
@pytest.mark.parametrize("seed", range(5))
def test_policy_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(200 + seed)
    spec = SMALL_SPATIAL if kind == "spatial" else SMALL_COMBINED
    params = init_params(spec, seed=seed)
    x = rng.standard_normal((4, spec.input_dim))
    h = rng.uniform(-0.5, 0.5, (4, spec.hidden))
    err = policy_fd_check(params, spec, x, h, rng)
    assert err <= 1e-6


# ---------------------------------------------------------------- variants

def test_temporal_input_permutation_invariant():
    spec = VariantSpec("temporal")
    m = np.array([[0.2, 1.0, 0.5, 2.0, 0.7]])
    a = assemble_input(spec, m, m.mean(axis=1), np.array([0.3]))
    b = assemble_input(spec, m[:, ::-1], m.mean(axis=1), np.array([0.3]))
    np.testing.assert_array_equal(a, b)


def test_spatial_ignores_hidden_state():
    spec = SMALL_SPATIAL
    params = init_params(spec, seed=1)
    x = np.random.default_rng(0).standard_normal((3, spec.input_dim))
    mu0, sg0, v0, h0 = policy_forward(params, spec, x)
    mu1, sg1, v1, h1 = policy_forward(params, spec, x, h=np.ones((3, 0)))
    np.testing.assert_array_equal(mu0, mu1)
    assert h0.shape == (3, 0) and h1.shape == (3, 0)


def test_combined_zero_hidden_matches_feedforward_subpath():
    # hand-composed feedforward extraction of the recurrent network at h = 0
    spec = SMALL_COMBINED
    params = init_params(spec, seed=7)
    rng = np.random.default_rng(5)
    m = rng.uniform(0.0, 3.0, (4, spec.n_sensors))
    prev = rng.standard_normal(4)
    x = assemble_input(spec, m, m.mean(axis=1), prev)
    mu, sg, val, h_new = policy_forward(params, spec, x)

    xs = x.copy()
    xs[:, : spec.n_sensors] = (xs[:, : spec.n_sensors] - 1.5) / 1.5
    xh = np.hstack([xs, np.zeros((4, spec.hidden))])
    z = sigmoid(xh @ params["gru_wz"] + params["gru_bz"])
    cand = np.tanh(np.hstack([xs, np.zeros((4, spec.hidden))]) @ params["gru_wh"]
                   + params["gru_bh"])
    g = z * cand
    post = np.tanh(g @ params["post_w"] + params["post_b"])
    mu_ref = (post @ params["mu_w"] + params["mu_b"])[:, 0]
    np.testing.assert_allclose(mu, mu_ref, rtol=1e-12)
    np.testing.assert_allclose(h_new, g, rtol=1e-12)


def test_policy_rejects_wrong_layout():
    spec = SMALL_COMBINED
    params = init_params(spec, seed=0)
    with pytest.raises(ValueError):
        policy_forward(params, spec, np.zeros((2, spec.input_dim + 1)))
    with pytest.raises(ValueError):
        policy_forward(params, spec, np.zeros((2, spec.input_dim)),
                       h=np.zeros((2, spec.hidden + 3)))


def test_sigma_positive_and_hidden_bounded_on_random_batches():
    rng = np.random.default_rng(3)
    for spec in (SMALL_SPATIAL, SMALL_TEMPORAL, SMALL_COMBINED):
        params = init_params(spec, seed=11)
        x = rng.standard_normal((64, spec.input_dim)) * 3.0
        mu, sg, val, h = policy_forward(params, spec, x)
        assert (sg > 0).all()
        assert (np.abs(h) < 1.0).all()


def test_all_parameters_receive_finite_nonzero_gradients():
    rng = np.random.default_rng(9)
    for spec in (SMALL_SPATIAL, SMALL_TEMPORAL, SMALL_COMBINED):
        params = init_params(spec, seed=2)
        x = rng.standard_normal((32, spec.input_dim))
        h = rng.uniform(-0.5, 0.5, (32, spec.hidden))
        out = policy_forward(params, spec, x, h, want_cache=True)
        grads, _, _ = policy_backward(params, spec, out[4],
                                      d_mu=np.ones(32), d_sigma=np.ones(32),
                                      d_value=np.ones(32))
        for name in params.names:
            assert np.isfinite(grads[name]).all(), name
            assert np.abs(grads[name]).max() > 0, name


# ---------------------------------------------------------------- gaussian head

def test_gaussian_closed_forms():
    assert np.isclose(gaussian_log_prob(0.3, 1.0, 0.3), -0.918938533204672742,
                      rtol=1e-15)
    assert np.isclose(gaussian_entropy(1.0), 1.418938533204672742, rtol=1e-15)


def test_gaussian_sampling_moments():
    rng = np.random.default_rng(12)
    n = 100_000
    mu, sigma = 0.7, 1.3
    draws = gaussian_sample(mu, sigma, rng.standard_normal(n))
    assert abs(draws.mean() - mu) < 3.0 * sigma / math.sqrt(n)
    assert abs(draws.std() - sigma) < 3.0 * sigma / math.sqrt(2.0 * n)


def test_log_prob_consistent_with_density():
    mus = np.array([0.0, 1.0, -2.0])
    sigmas = np.array([0.5, 1.0, 2.0])
    acts = np.array([0.3, 1.0, -1.0])
    lp = gaussian_log_prob(mus, sigmas, acts)
    dens = np.exp(-0.5 * ((acts - mus) / sigmas) ** 2) / (sigmas * np.sqrt(2 * np.pi))
    np.testing.assert_allclose(lp, np.log(dens), rtol=1e-12)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = SMALL_COMBINED
    params = init_params(spec, seed=21)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    meta = {"seed": 21, "step": 1234, "config_hash": "deadbeef", "tag": "final"}
    save_checkpoint(p1, params, meta)
    loaded, spec2, meta2 = load_checkpoint(p1)
    assert meta2 == meta and spec2 == spec
    save_checkpoint(p2, loaded, meta2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(loaded.flat(), params.flat())


def test_checkpoint_wrong_variant_rejected(tmp_path):
    params = init_params(SMALL_SPATIAL, seed=0)
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, params)
    with pytest.raises(CheckpointError, match="spatial"):
        load_checkpoint(path, expect_variant="combined")


def test_checkpoint_corruption_detected(tmp_path):
    params = init_params(SMALL_TEMPORAL, seed=0)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, params)
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_init_deterministic_and_scaled():
    a = init_params(SMALL_COMBINED, seed=5)
    b = init_params(SMALL_COMBINED, seed=5)
    np.testing.assert_array_equal(a.flat(), b.flat())
    # orthogonal columns at gain 1, small action-mean head
    w = a["post_w"]
    np.testing.assert_allclose(w.T @ w, np.eye(w.shape[1]), atol=1e-10)
    assert np.abs(a["mu_w"]).max() < 0.02


def test_param_store_rejects_bad_shapes():
    spec = SMALL_TEMPORAL
    good = {n: np.zeros(s) for n, s in
            [(n, a.shape) for n, a in init_params(spec, 0).arrays.items()]}
    good["mu_w"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        ParamStore(spec, good)
