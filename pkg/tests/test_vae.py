import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentsde.datasets import generate, make_ambient_map
from latentsde.errors import InvalidInputError, TrainingDivergedError
from latentsde.nn import forward
from latentsde.vae import (LinearGaussianModel, TrainConfig, VaeModel, build_model, encode,
                           generate_pairs, loss, loss_constants, reparam_noise, train)

def fixed_model(d, n, mean_bias=None, chol_diag=1.0, tau=0.01, nu=0.0, drift_zero=True):
    """Linear encoder with constant outputs: m = mean_bias, L = chol_diag * I."""
    model = build_model(n, d, seed=0, enc_hidden=(), dec_hidden=(), drift_hidden=(4,), tau=tau, nu=nu)
    model.mean_head.weights[0][:] = 0.0
    model.mean_head.biases[0][:] = 0.0 if mean_bias is None else mean_bias
    model.chol_head.weights[0][:] = 0.0
    model.chol_head.biases[0][:] = 0.0
    rows, cols = np.tril_indices(d)
    model.chol_head.biases[0][rows == cols] = math.log(math.expm1(chol_diag))
    if drift_zero:
        model.drift.weights[-1][:] = 0.0
        model.drift.biases[-1][:] = 0.0
    return model


def test_transition_hand_example():
    model = fixed_model(1, 2)
    x = np.zeros((1, 2))
    parts, _ = loss(model, x, x, 1.0, np.zeros((2, 1, 1)), grad=False)
    assert parts.transition == pytest.approx(1.0, abs=1e-12)


def test_entropy_identity_cholesky():
    model = fixed_model(2, 3)
    x = np.zeros((1, 3))
    parts, _ = loss(model, x, x, 0.1, np.zeros((2, 1, 2)), grad=False)
    assert parts.entropy == pytest.approx(-2.0, abs=1e-12)


def test_prior_term_and_nu_zero_removes_it():
    model = fixed_model(2, 3, mean_bias=np.array([1.0, 2.0]), chol_diag=0.5, nu=2.0)
    x = np.zeros((1, 3))
    eta = np.zeros((2, 1, 2))
    parts, _ = loss(model, x, x, 0.1, eta, grad=False)
    # (nu/2)(tr S + |m|^2) = 1 * (0.25 + 0.25 + 1 + 4)
    assert parts.prior == pytest.approx(5.5, abs=1e-12)
    model.nu = 0.0
    parts0, _ = loss(model, x, x, 0.1, eta, grad=False)
    assert parts0.prior == 0.0
    assert parts.total - parts0.total == pytest.approx(5.5, abs=1e-12)


def test_l1_added_once_and_log_det():
    model = build_model(3, 2, seed=1, enc_hidden=(4,), dec_hidden=(4,), drift_hidden=(4,),
                        diffusion_diag=True, lambda1=0.5)
    model.log_diag = np.log(np.array([2.0, 0.5]))
    x0 = np.random.default_rng(0).standard_normal((7, 3))
    parts, _ = loss(model, x0, x0, 0.01, np.zeros((2, 7, 2)), grad=False)
    assert parts.l1 == pytest.approx(0.5 * 2.5, abs=1e-14)


def _probe_model(seed, d=1, n=2, diag=False):
    rng = np.random.default_rng(seed)
    model = build_model(n, d, seed=seed, enc_hidden=(4,), dec_hidden=(4,), drift_hidden=(4,),
                        tau=float(rng.uniform(0.05, 1.0)), nu=float(rng.uniform(0, 1)),
                        diffusion_diag=diag, lambda1=0.3 if diag else 0.0)
    theta = model.get_flat()
    model.set_flat(theta + 0.3 * rng.standard_normal(theta.size))
    B = 3
    x0 = rng.standard_normal((B, n))
    x1 = x0 + 0.3 * rng.standard_normal((B, n))
    dt = rng.uniform(0.01, 0.2, B)
    eta = rng.standard_normal((2, B, d))
    return model, x0, x1, dt, eta


def gradcheck_error(model, x0, x1, dt, eta, step=1e-6):
    """max |g - fd| / max |fd| over all parameters."""
    _, g = loss(model, x0, x1, dt, eta)
    theta = model.get_flat()
    fd = np.empty_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        model.set_flat(tp)
        fp = loss(model, x0, x1, dt, eta, grad=False)[0].total
        model.set_flat(tm)
        fm = loss(model, x0, x1, dt, eta, grad=False)[0].total
        fd[k] = (fp - fm) / (2 * step)
    model.set_flat(theta)
    return np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)


@pytest.mark.parametrize("diag", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_gradcheck_small_models(seed, diag):
    assert gradcheck_error(*_probe_model(seed, d=2, n=3, diag=diag)) <= 1e-5


def test_diagonal_cov_gradcheck():
    rng = np.random.default_rng(3)
    model = build_model(3, 2, seed=3, enc_hidden=(4,), dec_hidden=(4,), drift_hidden=(4,),
                        diagonal_cov=True, nu=0.5)
    model.set_flat(model.get_flat() + 0.2 * rng.standard_normal(model.n_params))
    x0 = rng.standard_normal((4, 3))
    err = gradcheck_error(model, x0, x0 + 0.1, 0.05, rng.standard_normal((2, 4, 2)))
    assert err <= 1e-5


def test_loss_rejects_bad_shapes():
    model = build_model(3, 2, seed=0)
    with pytest.raises(InvalidInputError):
        loss(model, np.zeros((2, 4)), np.zeros((2, 4)), 0.1, np.zeros((2, 2, 2)))
    with pytest.raises(InvalidInputError):
        loss(model, np.zeros((2, 3)), np.zeros((2, 3)), 0.1, np.zeros((2, 3, 2)))
    with pytest.raises(InvalidInputError):
        loss(model, np.zeros((2, 3)), np.zeros((2, 3)), -0.1, np.zeros((2, 2, 2)))


def test_non_finite_loss_names_term():
    model = build_model(3, 2, seed=0)
    model.decoder.biases[-1][:] = np.inf
    with pytest.raises(TrainingDivergedError) as info:
        loss(model, np.zeros((2, 3)), np.zeros((2, 3)), 0.1, np.zeros((2, 2, 2)))
    assert info.value.term == "reconstruction"


def test_loss_constants_reconstruction_uses_n():
    model = build_model(5, 2, seed=0, tau=0.1)
    assert loss_constants(model)["reconstruction"] == pytest.approx(5 * math.log(2 * math.pi * 0.1))


def test_reparam_noise_counter_layout():
    a = reparam_noise(0, 3, 4, 2)
    b = reparam_noise(0, 3, 4, 2)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 4, 2)
    assert not np.array_equal(a, reparam_noise(0, 4, 4, 2))
    assert not np.array_equal(a, reparam_noise(0, 3, 4, 2, stream="val"))


# ---------------------------------------------------------------- Monte-Carlo term oracles

def mc_term_samples(model, x0, x1, dt, count, seed):
    """Per-sample values of each term's defining expectation for one pair."""
    d = model.d
    rng = np.random.default_rng(seed)
    (m0, m1), (L0, L1) = encode(model, np.vstack([x0, x1]))
    e0 = rng.standard_normal((count, d))
    e1 = rng.standard_normal((count, d))
    z0 = m0 + e0 @ L0.T
    z1 = m1 + e1 @ L1.T
    logdet = np.log(np.diag(L0)).sum() + np.log(np.diag(L1)).sum()
    c = loss_constants(model)
    # E log q(z0|x0) + E log q(z1|x1), dropped constant added back
    ent = -d * math.log(2 * math.pi) - logdet - 0.5 * (e0 * e0).sum(1) - 0.5 * (e1 * e1).sum(1)
    ent = ent - c["entropy"]
    # E -log N(z0; 0, I/nu) without the constant
    pri = 0.5 * model.nu * (z0 * z0).sum(1)
    # E -log N(z1; z0 + drift(m0) dt, dt D^2), drift frozen at the encoder mean
    D = model.D
    mu = forward(model.drift, m0)
    r = (z1 - z0 - mu * dt) / D
    tra = 0.5 * d * math.log(dt) + np.log(D).sum() + (r * r).sum(1) / (2 * dt)
    # E |f(z~) - x|^2 / (2 tau)
    rec = (((forward(model.decoder, z0) - x0) ** 2).sum(1)
           + ((forward(model.decoder, z1) - x1) ** 2).sum(1)) / (2 * model.tau)
    return {"entropy": ent, "prior": pri, "transition": tra, "reconstruction": rec}


def closed_form_reconstruction(model, x0, x1):
    """Exact E|A z~ + a - x|^2 / (2 tau) for a linear decoder."""
    A, a = model.decoder.weights[0], model.decoder.biases[0]
    m, L = encode(model, np.vstack([x0, x1]))
    out = 0.0
    for mi, Li, xi in zip(m, L, (x0, x1)):
        out += np.sum((A @ mi + a - xi) ** 2) + np.trace(A @ Li @ Li.T @ A.T)
    return out / (2 * model.tau)


def random_config(seed):
    rng = np.random.default_rng(100 + seed)
    d = int(rng.integers(1, 4))
    n = int(rng.integers(d, 6))
    diag = bool(seed % 2)
    model = build_model(n, d, seed=seed, enc_hidden=(5,), dec_hidden=(), drift_hidden=(5,),
                        tau=float(rng.uniform(0.1, 1.0)), nu=float(rng.uniform(0.2, 2.0)),
                        diffusion_diag=diag, lambda1=0.1 if diag else 0.0)
    model.set_flat(model.get_flat() + 0.3 * rng.standard_normal(model.n_params))
    x0 = rng.standard_normal(n)
    x1 = x0 + 0.2 * rng.standard_normal(n)
    dt = float(rng.uniform(0.01, 0.5))
    return model, x0, x1, dt


def term_oracle_zscores(seed, count=100_000):
    model, x0, x1, dt = random_config(seed)
    parts, _ = loss(model, x0, x1, dt, np.zeros((2, 1, model.d)), grad=False)
    samples = mc_term_samples(model, x0, x1, dt, count, seed)
    closed = {"entropy": parts.entropy, "prior": parts.prior, "transition": parts.transition,
              "reconstruction": closed_form_reconstruction(model, x0, x1)}
    out = {}
    for name, vals in samples.items():
        se = vals.std(ddof=1) / math.sqrt(count)
        out[name] = abs(vals.mean() - closed[name]) / max(se, 1e-300) if se > 0 else (
            0.0 if abs(vals.mean() - closed[name]) < 1e-10 else math.inf)
    return out


@pytest.mark.parametrize("seed", range(3))
def test_term_oracles_within_three_se(seed):
    z = term_oracle_zscores(seed, count=20_000)
    assert max(z.values()) <= 3.0, z


def test_reconstruction_term_is_single_sample_of_oracle():
    model, x0, x1, dt = random_config(4)
    count = 20_000
    eta = np.random.default_rng(9).standard_normal((2, count, model.d))
    X0, X1 = np.tile(x0, (count, 1)), np.tile(x1, (count, 1))
    parts, _ = loss(model, X0, X1, dt, eta, grad=False)
    vals = mc_term_samples(model, x0, x1, dt, count, 5)["reconstruction"]
    se = vals.std() / math.sqrt(count)  # same law as the batch-mean term
    assert abs(parts.reconstruction - closed_form_reconstruction(model, x0, x1)) <= 3 * se


# ---------------------------------------------------------------- isometry

def random_linear_gaussian(seed, d=2, n=4):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    Bm = -np.eye(d) + 0.3 * rng.standard_normal((d, d))
    P = np.eye(d) + 0.2 * np.diag(rng.uniform(size=d))
    return LinearGaussianModel(A=A, a=rng.standard_normal(n), B=Bm, c=rng.standard_normal(d),
                               prior_mean=rng.standard_normal(d), prior_cov=P, tau=0.05, dt=0.1)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_isometry_preserves_pair_density(seed, d):
    model = random_linear_gaussian(seed, d=d, n=d + 2)
    rng = np.random.default_rng(seed + 1)
    Q = random_orthogonal(rng, d)
    b = rng.standard_normal(d)
    x0, x1 = model.sample(100, seed)
    np.testing.assert_allclose(model.transformed(Q, b).pair_logpdf(x0, x1),
                               model.pair_logpdf(x0, x1), atol=1e-8, rtol=0)


def test_non_orthogonal_map_changes_density():
    model = random_linear_gaussian(0)
    x0, x1 = model.sample(50, 0)
    S = np.diag([2.0, 0.5])
    diff = np.abs(model.transformed(S, np.zeros(2)).pair_logpdf(x0, x1) - model.pair_logpdf(x0, x1))
    assert diff.max() > 1e-3


# ---------------------------------------------------------------- generation

def test_generate_pairs_degenerate_transition():
    model = build_model(3, 2, seed=0, tau=1e-30)
    model.tau = 0.0
    model.drift.weights[-1][:] = 0.0
    model.drift.biases[-1][:] = 0.0
    z0 = np.random.default_rng(0).standard_normal((20, 2))
    x0, x1, _, _ = generate_pairs(model, z0, 1e-12, seed=0)
    assert np.abs(x1 - x0).max() <= 1e-5


def test_generate_pairs_linear_decoder_column_space():
    model = build_model(5, 2, seed=2, dec_hidden=())
    model.tau = 0.0
    z0 = np.random.default_rng(0).standard_normal((30, 2))
    x0, x1, _, _ = generate_pairs(model, z0, 0.1, seed=1)
    A, a = model.decoder.weights[0], model.decoder.biases[0]
    s = np.linalg.svd(np.vstack([x0, x1]) - a, compute_uv=False)
    assert s[2] <= 1e-10 * s[0]
    np.testing.assert_allclose(x0, z0 @ A.T + a, atol=1e-12)


def test_generate_pairs_increment_covariance():
    model = build_model(3, 2, seed=0)
    model.drift.weights[-1][:] = 0.0
    model.drift.biases[-1][:] = 0.0
    dt = 0.01
    z0 = np.zeros((100_000, 2))
    _, _, z0, z1 = generate_pairs(model, z0, dt, seed=3)
    cov = np.cov((z1 - z0).T)
    np.testing.assert_allclose(cov, dt * np.eye(2), atol=0.05 * dt)


# ---------------------------------------------------------------- training

def linear_dataset(seed=0, steps=400):
    amap = make_ambient_map("linear", 1, 2, seed)
    return generate("ou1d", amap, steps, 0.01, "none", False, seed)


def test_zero_epochs_leaves_model_unchanged():
    ds = linear_dataset()
    model = build_model(2, 1, seed=0, enc_hidden=(), dec_hidden=())
    res = train(model, ds, TrainConfig(epochs=0))
    np.testing.assert_array_equal(res.model.get_flat(), model.get_flat())
    assert res.log == []


def test_linear_smoke_validation_decreases():
    ds = linear_dataset()
    model = build_model(2, 1, seed=0, enc_hidden=(), dec_hidden=())
    res = train(model, ds, TrainConfig(epochs=10, lr=1e-3))
    vals = [row["val_total"] for row in res.log]
    assert all(b < a for a, b in zip(vals, vals[1:])), vals


def test_training_is_deterministic_and_logs_columns():
    ds = linear_dataset(steps=200)
    model = build_model(2, 1, seed=0, enc_hidden=(8,), dec_hidden=(8,))
    cfg = TrainConfig(epochs=5, val_size=50, seed=2)
    a, b = train(model, ds, cfg), train(model, ds, cfg)
    np.testing.assert_array_equal(a.model.get_flat(), b.model.get_flat())
    assert a.log == b.log
    assert set(a.log[0]) == {"epoch", "entropy", "prior", "transition", "reconstruction", "l1",
                             "total", "val_total"}
    assert a.best_val == min([r["val_total"] for r in a.log] + [a.best_val])


def test_train_rejects_width_mismatch():
    ds = linear_dataset(steps=200)
    with pytest.raises(InvalidInputError):
        train(build_model(3, 1, seed=0), ds, TrainConfig(epochs=1))


def test_model_save_load_roundtrip(tmp_path):
    model = build_model(4, 2, seed=5, diffusion_diag=True, lambda1=0.2, nu=0.1)
    model.log_diag = np.array([0.3, -0.2])
    model.save(tmp_path / "m")
    back = VaeModel.load(tmp_path / "m")
    np.testing.assert_array_equal(back.get_flat(), model.get_flat())
    assert back.header() == model.header()
