from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystalgfn import autodiff as ad
from crystalgfn.autodiff import AdamState, Tensor, adam_step, grad, grad_check
from crystalgfn.policy import beta_log_prob


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(ad.square(x), [x])
    assert g == pytest.approx(6.0)


def test_log_derivative_at_one():
    x = Tensor(1.0, requires_grad=True)
    (g,) = grad(ad.log(x), [x])
    assert g == pytest.approx(1.0)


def test_output_gradient_is_one():
    x = Tensor(2.0, requires_grad=True)
    y = x * 1.0
    leaves = ad.backward(y, accumulate=False)
    assert leaves[id(x)] == pytest.approx(1.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_non_finite_gradient_names_op():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="pow"):
        ad.backward(ad.tsum(ad.power(x, 0.5)))


def test_sin_grad_check_at_zero():
    rep = grad_check(lambda t: ad.tsum(ad.sin(t[0])), np.array(0.0), tolerance=1e-6)
    assert rep.passed
    assert rep.analytic[0] == pytest.approx(1.0)


def test_beta_log_density_grad_check():
    def f(t):
        return ad.tsum(beta_log_prob(np.array([0.5]), t[0], t[1]))

    rep = grad_check(f, [np.array([2.0]), np.array([2.0])], tolerance=1e-4)
    assert rep.passed, str(rep)


def test_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 1)]
    point = [rng.standard_normal(s) * 0.5 for s in shapes]

    def f(t):
        h = ad.silu(x @ t[0] + t[1])
        h = ad.tanh(h @ t[2] + t[3])
        return ad.mean(ad.square(h @ t[4]))

    rep = grad_check(f, point, tolerance=1e-4)
    assert rep.passed, str(rep)


# every op kind against central differences, over random shapes
def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _any(rng, shape):
    return rng.standard_normal(shape)


UNARY = {
    "neg": (ad.neg, _any),
    "square": (ad.square, _any),
    "power": (lambda a: ad.power(a, 1.7), _positive),
    "exp": (ad.exp, _any),
    "log": (ad.log, _positive),
    "sigmoid": (ad.sigmoid, _any),
    "softplus": (ad.softplus, _any),
    "silu": (ad.silu, _any),
    "tanh": (ad.tanh, _any),
    "sin": (ad.sin, _any),
    "cos": (ad.cos, _any),
    "lgamma": (ad.lgamma, _positive),
    "log_softmax": (ad.log_softmax, _any),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), _any),
    "transpose": (ad.transpose, _any),
    "mean_axis": (lambda a: ad.mean(a, axis=0), _any),
    "sum_keepdims": (lambda a: ad.tsum(a, axis=1, keepdims=True), _any),
    "reshape": (lambda a: ad.reshape(a, (-1,)), _any),
    "getitem": (lambda a: a[:, 0], _any),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": ad.div,
    "concat": lambda a, b: ad.concat([a, b], axis=-1),
    "where": lambda a, b: ad.where(a.data > 0, a, b),
}


@settings(max_examples=12, deadline=None)
@given(name=st.sampled_from(sorted(UNARY)), rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_unary_ops_match_finite_differences(name, rows, cols, seed):
    op, dom = UNARY[name]
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(op(Tensor(np.ones((rows, cols)))).shape)
    rep = grad_check(lambda t: ad.tsum(op(t[0]) * w), [dom(rng, (rows, cols))], tolerance=1e-4)
    assert rep.passed, f"{name}: {rep}"


@settings(max_examples=12, deadline=None)
@given(name=st.sampled_from(sorted(BINARY)), rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_binary_ops_match_finite_differences(name, rows, cols, seed):
    op = BINARY[name]
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((rows, cols))
    b = rng.uniform(0.5, 2.0, (rows, cols))  # keeps div away from 0
    a[np.abs(a) < 1e-3] = 0.1  # keeps where() off its switching point
    w = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
    rep = grad_check(lambda t: ad.tsum(op(t[0], t[1]) * w), [a, b], tolerance=1e-4)
    assert rep.passed, f"{name}: {rep}"


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_matmul_and_broadcast_match_finite_differences(n, k, m, seed):
    rng = np.random.default_rng(seed)
    rep = grad_check(lambda t: ad.tsum(ad.tanh(t[0] @ t[1] + t[2])),
                     [rng.standard_normal((n, k)), rng.standard_normal((k, m)), rng.standard_normal(m)])
    assert rep.passed, str(rep)


@settings(max_examples=10, deadline=None)
@given(n_rows=st.integers(1, 5), n_idx=st.integers(0, 8), seed=st.integers(0, 10_000))
def test_gather_scatter_ops_match_finite_differences(n_rows, n_idx, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_rows, n_idx)
    seg = rng.integers(0, 3, n_idx)
    cols = rng.integers(0, 3, n_rows)

    def f(t):
        rows = ad.take_rows(t[0], idx)
        out = ad.tsum(ad.square(ad.segment_sum(rows, seg, 3)))
        out = out + ad.tsum(ad.segment_mean(rows, seg, 3))
        return out + ad.tsum(ad.take_along(t[0], cols))

    rep = grad_check(f, [rng.standard_normal((n_rows, 3))])
    assert rep.passed, str(rep)


def test_masked_log_softmax_gradient_and_normalization():
    mask = np.array([[True, False, True, True]])
    rng = np.random.default_rng(1)
    out = ad.log_softmax(Tensor(rng.standard_normal((1, 4))), mask)
    assert np.exp(out.data[mask]).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.isneginf(out.data[~mask]) | (out.data[~mask] < -1e20))
    rep = grad_check(lambda t: ad.tsum(ad.where(mask, ad.log_softmax(t[0], mask), 0.0)), [rng.standard_normal((1, 4))])
    assert rep.passed, str(rep)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 2))
    f = lambda x: ad.tsum(ad.sin(x) * ad.exp(x))
    g = lambda x: ad.tsum(ad.square(x) @ np.ones((2, 1)))
    x = Tensor(x0, requires_grad=True)
    (both,) = grad(f(x) + g(x), [x])
    x1 = Tensor(x0, requires_grad=True)
    (gf,) = grad(f(x1), [x1])
    x2 = Tensor(x0, requires_grad=True)
    (gg,) = grad(g(x2), [x2])
    np.testing.assert_allclose(both, gf + gg, rtol=1e-12, atol=1e-12)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(1.0, requires_grad=True)
    y = Tensor(2.0, requires_grad=True)
    gx, gy = grad(x * 3.0, [x, y])
    assert gx == 3.0 and gy == 0.0


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad


# -- optimizer ---------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(lr=0.1)
    out = adam_step(p, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(out["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_moves_by_lr_against_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([0.3, -5.0, 1e-3])
    out = adam_step(p, {"w": g}, AdamState(lr=1e-2))
    # m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
    np.testing.assert_allclose(out["w"], -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(out["w"], -1e-2 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_update_tends_to_lr():
    p = {"w": np.array([0.0])}
    state = AdamState(lr=1e-3)
    deltas = []
    for _ in range(2000):
        new = adam_step(p, {"w": np.array([-0.7])}, state)
        deltas.append(float(new["w"][0] - p["w"][0]))
        p = new
    assert deltas[-1] == pytest.approx(1e-3, rel=1e-6)


def test_adam_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_adam_step_counter_increases_and_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = {"a": np.zeros((2, 2)), "b": np.zeros(1)}
        s = AdamState(lr=0.01, lr_overrides={"b": 0.1})
        steps = []
        for _ in range(5):
            p = adam_step(p, {"a": rng.standard_normal((2, 2)), "b": rng.standard_normal(1)}, s)
            steps.append(s.step)
        return p, steps

    (p1, s1), (p2, s2) = run(), run()
    assert s1 == [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(p1["a"], p2["a"])
    np.testing.assert_array_equal(p1["b"], p2["b"])


def test_lr_override_applies_per_parameter():
    out = adam_step({"a": np.zeros(1), "logZ": np.zeros(1)}, {"a": np.ones(1), "logZ": np.ones(1)},
                    AdamState(lr=1e-3, lr_overrides={"logZ": 0.1}))
    assert out["a"][0] == pytest.approx(-1e-3, rel=1e-6)
    assert out["logZ"][0] == pytest.approx(-0.1, rel=1e-6)
