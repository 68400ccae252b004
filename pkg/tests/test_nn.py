import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentsde.errors import InvalidInputError, TrainingDivergedError
from latentsde.nn import (ACTIVATIONS, AdamState, Mlp, adam_step, backward, flatten_grads, forward,
                          init_mlp, load_mlp, save_mlp)


def _fd_check(mlp, x, up, step=1e-5):
    """Relative error of analytic vs central-difference gradients of <up, f(x)>."""
    gin, grads = backward(mlp, x, up)
    flat = flatten_grads(grads)
    theta = mlp.get_flat()
    num = np.empty_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        mlp.set_flat(tp)
        fp = np.sum(up * forward(mlp, x))
        mlp.set_flat(tm)
        fm = np.sum(up * forward(mlp, x))
        num[k] = (fp - fm) / (2 * step)
    mlp.set_flat(theta)
    num_in = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        num_in[idx] = (np.sum(up * forward(mlp, xp)) - np.sum(up * forward(mlp, xm))) / (2 * step)
    scale = lambda a, b: np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)  # noqa: E731
    return scale(flat, num), scale(gin, num_in)


def test_identity_network():
    mlp = Mlp([3, 3], "identity", [np.eye(3)], [np.zeros(3)])
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(forward(mlp, x), x)
    u = np.array([0.3, 0.1, -4.0])
    gin, _ = backward(mlp, x, u)
    np.testing.assert_array_equal(gin, u)


def test_single_softplus_layer():
    mlp = Mlp([1, 1], "identity", [np.ones((1, 1))], [np.zeros(1)], output_activation="softplus")
    assert forward(mlp, np.zeros(1))[0] == pytest.approx(np.log(2.0), abs=1e-15)
    gin, _ = backward(mlp, np.zeros(1), np.ones(1))
    assert gin[0] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("act", ACTIVATIONS)
def test_gradcheck_4_layer_width_16(act):
    mlp = init_mlp([3, 16, 16, 16, 2], act, seed=4)
    rng = np.random.default_rng(1)
    for b in mlp.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((5, 3))
    up = rng.standard_normal((5, 2))
    # leaky_relu is piecewise linear; keep probes away from kinks
    e_par, e_in = _fd_check(mlp, x, up)
    assert e_par <= 1e-4 and e_in <= 1e-4


def _min_abs_preactivation(mlp, x):
    from latentsde.nn import forward_cached
    _, (_, pres) = forward_cached(mlp, x)
    return min(np.abs(p).min() for p in pres)


@given(st.integers(0, 10_000), st.sampled_from(ACTIVATIONS), st.sampled_from(ACTIVATIONS))
@settings(max_examples=25, deadline=None)
def test_gradcheck_random_probes(seed, act, out_act):
    rng = np.random.default_rng(seed)
    widths = [int(w) for w in rng.integers(1, 5, size=rng.integers(2, 5))]
    mlp = init_mlp(widths, act, seed=seed, output_activation=out_act)
    x = rng.standard_normal((3, widths[0]))
    up = rng.standard_normal((3, widths[-1]))
    if "leaky_relu" in (act, out_act) and _min_abs_preactivation(mlp, x) < 1e-3:
        return  # probe sits within the FD step of a kink
    e_par, e_in = _fd_check(mlp, x, up)
    assert e_par <= 1e-4 and e_in <= 1e-4


def test_width_mismatch():
    mlp = init_mlp([2, 4, 1], "tanh", 0)
    with pytest.raises(InvalidInputError):
        forward(mlp, np.zeros(3))
    with pytest.raises(InvalidInputError):
        backward(mlp, np.zeros(2), np.zeros(2))


def test_output_width_batched_and_single():
    mlp = init_mlp([2, 7, 5], "softplus", 3)
    assert forward(mlp, np.zeros(2)).shape == (5,)
    assert forward(mlp, np.zeros((9, 2))).shape == (9, 5)


def test_init_scales():
    k = init_mlp([400, 400], "leaky_relu", 0)
    assert k.weights[0].std() == pytest.approx(np.sqrt(2 / (1 + 0.01**2) / 400), rel=0.02)
    x = init_mlp([300, 100], "softplus", 0, gain=0.5)
    assert x.weights[0].std() == pytest.approx(0.5 * np.sqrt(2 / 400), rel=0.02)


def test_init_deterministic():
    a, b = init_mlp([2, 16, 2], "softplus", 9), init_mlp([2, 16, 2], "softplus", 9)
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())


def test_checkpoint_roundtrip(tmp_path):
    mlp = init_mlp([3, 5, 2], "tanh", 2, output_activation="softplus")
    save_mlp(mlp, tmp_path / "net")
    back = load_mlp(tmp_path / "net")
    assert back.header() == mlp.header()
    np.testing.assert_array_equal(back.get_flat(), mlp.get_flat())


def test_adam_zero_gradient():
    st_ = AdamState.for_params([np.zeros(3)])
    p = [np.array([1.0, -2.0, 3.0])]
    out = adam_step(st_, p, [np.zeros(3)])
    np.testing.assert_array_equal(out[0], p[0])
    assert st_.step == 1 and not st_.m[0].any() and not st_.v[0].any()


def test_adam_beta_zero_step():
    st_ = AdamState.for_params([np.zeros(1)], lr=0.1, beta1=0.0, beta2=0.0, eps=1e-8)
    out = adam_step(st_, [np.array([0.0])], [np.array([1.0])])
    assert out[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)


def test_adam_decay_multiplier():
    st_ = AdamState.for_params([np.zeros(1)], lr=1.0, decay=0.997)
    for _ in range(100):
        st_.end_epoch()
    assert st_.current_lr == pytest.approx(0.997**100)
    assert st_.current_lr == pytest.approx(0.7405, abs=5e-5)


def test_adam_matches_reference_loop():
    # independent scalar implementation of the textbook update
    g_seq = [0.3, -1.0, 2.0, 0.0, 0.7]
    st_ = AdamState.for_params([np.zeros(1)], lr=0.01, decay=0.9)
    p = [np.array([0.5])]
    m = v = 0.0
    ref = 0.5
    for t, g in enumerate(g_seq, 1):
        p = adam_step(st_, p, [np.array([g])])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * 0.9 ** (t - 1) * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        st_.end_epoch()
        assert p[0][0] == pytest.approx(ref, rel=1e-14)


def test_adam_non_finite():
    st_ = AdamState.for_params([np.zeros(2)])
    with pytest.raises(TrainingDivergedError):
        adam_step(st_, [np.zeros(2)], [np.array([1.0, np.nan])])
    with pytest.raises(InvalidInputError):
        adam_step(st_, [np.zeros(3)], [np.zeros(3)])


def test_adam_deterministic_training():
    def run():
        mlp = init_mlp([2, 8, 1], "softplus", 1)
        st_ = AdamState.for_params([mlp.get_flat()])
        x = np.linspace(-1, 1, 20).reshape(10, 2)
        for _ in range(30):
            y = forward(mlp, x)
            _, g = backward(mlp, x, 2 * (y - 1.0))
            (flat,) = adam_step(st_, [mlp.get_flat()], [flatten_grads(g)])
            mlp.set_flat(flat)
        return mlp.get_flat()
    np.testing.assert_array_equal(run(), run())
