import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdia_detect import neural as nn
from fdia_detect.errors import ConfigError, DataError, NumericError


def naive_conv1d(x, w, b):
    """Direct loop over the definition with explicit zero padding."""
    n, c, length = x.shape
    f, _, k = w.shape
    pad = (k - 1) // 2
    xp = np.zeros((n, c, length + 2 * pad))
    xp[:, :, pad:pad + length] = x
    out = np.zeros((n, f, length))
    for a in range(n):
        for o in range(f):
            for t in range(length):
                out[a, o, t] = b[o] + sum(w[o, ci, j] * xp[a, ci, t + j] for ci in range(c) for j in range(k))
    return out


def fd_grad(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn()
        flat[k] = orig - h
        down = fn()
        flat[k] = orig
        gf[k] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 7))
        out, _ = nn.conv1d_forward(x, np.array([[[0.0, 1.0, 0.0]]]), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_hand_example(self):
        out, _ = nn.conv1d_forward(np.array([[[1.0, 2.0, 3.0]]]), np.ones((1, 1, 3)), np.zeros(1))
        np.testing.assert_allclose(out.ravel(), [3.0, 6.0, 5.0])

    def test_bias_only(self):
        out, _ = nn.conv1d_forward(np.zeros((3, 2, 5)), np.ones((4, 2, 3)), np.full(4, 0.7))
        np.testing.assert_allclose(out, 0.7)

    def test_matches_naive_loop(self, rng):
        x, w, b = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
        out, _ = nn.conv1d_forward(x, w, b)
        np.testing.assert_allclose(out, naive_conv1d(x, w, b), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DataError, match="channel mismatch"):
            nn.conv1d_forward(rng.normal(size=(1, 2, 5)), rng.normal(size=(3, 4, 3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            nn.conv1d_forward(np.zeros((1, 1, 4)), np.zeros((1, 1, 2)))

    def test_bias_grad_counts(self):
        x = np.zeros((3, 2, 6))
        out, cache = nn.conv1d_forward(x, np.ones((4, 2, 3)), np.zeros(4))
        _, _, gb = nn.conv1d_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(gb, np.full(4, 3 * 6))

    def test_zero_grad_out(self, rng):
        out, cache = nn.conv1d_forward(rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 3)), np.zeros(2))
        gx, gw, gb = nn.conv1d_backward(np.zeros_like(out), cache)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_shape_mismatch(self, rng):
        out, cache = nn.conv1d_forward(rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 3)))
        with pytest.raises(DataError):
            nn.conv1d_backward(np.zeros((2, 2, 4)), cache)

    def test_finite_differences(self, rng):
        x, w, b = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
        r = rng.normal(size=(2, 2, 6))
        loss = lambda: float(np.sum(nn.conv1d_forward(x, w, b)[0] * r))
        _, cache = nn.conv1d_forward(x, w, b)
        gx, gw, gb = nn.conv1d_backward(r, cache)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            assert nn.relative_error(analytic, fd_grad(loss, arr)) < 1e-6


class TestTransposedConv:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]),
           st.integers(5, 12), st.integers(0, 2**31))
    def test_adjoint_identity(self, n, c, f, k, length, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(f, c, k))
        x, y = rng.normal(size=(n, c, length)), rng.normal(size=(n, f, length))
        conv, _ = nn.conv1d_forward(x, w)
        convt, _ = nn.transposed_conv1d_forward(y, w)
        assert abs(np.sum(conv * y) - np.sum(x * convt)) < 1e-10

    def test_finite_differences(self, rng):
        y, w, b = rng.normal(size=(2, 3, 6)), rng.normal(size=(3, 2, 5)), rng.normal(size=2)
        r = rng.normal(size=(2, 2, 6))
        loss = lambda: float(np.sum(nn.transposed_conv1d_forward(y, w, b)[0] * r))
        _, cache = nn.transposed_conv1d_forward(y, w, b)
        gy, gw, gb = nn.transposed_conv1d_backward(r, cache)
        for analytic, arr in ((gy, y), (gw, w), (gb, b)):
            assert nn.relative_error(analytic, fd_grad(loss, arr)) < 1e-6


class TestDense:
    def test_finite_differences(self, rng):
        x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        r = rng.normal(size=(4, 3))
        loss = lambda: float(np.sum(nn.dense_forward(x, w, b)[0] * r))
        _, cache = nn.dense_forward(x, w, b)
        gx, gw, gb = nn.dense_backward(r, cache)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            assert nn.relative_error(analytic, fd_grad(loss, arr)) < 1e-6

    def test_leading_axes(self, rng):
        x, w = rng.normal(size=(2, 7, 5)), rng.normal(size=(3, 5))
        out, _ = nn.dense_forward(x, w)
        np.testing.assert_allclose(out, x @ w.T)

    def test_grad_check_report(self, rng):
        layer = nn.Dense(6, 4, rng, name="fc")
        x, r = rng.normal(size=(5, 6)), rng.normal(size=(5, 4))
        layer.zero_grad()
        layer.forward(x)
        layer.backward(r)
        loss = lambda: float(np.sum(layer.forward(x) * r))
        report = nn.grad_check(loss, layer.params, layer.grads, tolerance=1e-6)
        assert report.ok, str(report)


class TestActivations:
    def test_leaky_relu_values(self):
        out, _ = nn.leaky_relu_forward(np.array([-1.0, 3.0]), 0.2)
        np.testing.assert_allclose(out, [-0.2, 3.0])

    def test_leaky_relu_backward(self):
        _, cache = nn.leaky_relu_forward(np.array([-1.0, 3.0]), 0.2)
        np.testing.assert_allclose(nn.leaky_relu_backward(np.ones(2), cache), [0.2, 1.0])

    @pytest.mark.parametrize("training", [True, False])
    def test_dropout_rate_zero_identity(self, rng, training):
        x = rng.normal(size=(3, 4))
        out, _ = nn.dropout_forward(x, 0.0, training, rng)
        np.testing.assert_array_equal(out, x)

    def test_dropout_eval_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(nn.dropout_forward(x, 0.2, False)[0], x)

    def test_dropout_preserves_expectation(self):
        rng = np.random.default_rng(5)
        x = np.linspace(0.5, 2.0, 8)
        acc = np.zeros_like(x)
        for _ in range(10_000):
            acc += nn.dropout_forward(x, 0.2, True, rng)[0]
        np.testing.assert_allclose(acc / 10_000, x, rtol=0.02)

    def test_dropout_rate_validation(self):
        with pytest.raises(ConfigError):
            nn.Dropout(1.0)


class TestBatchNorm:
    def test_two_sample_batch(self):
        state = {}
        out, _ = nn.batchnorm_forward(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), state, True)
        expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + nn.BN_EPS)
        np.testing.assert_allclose(out.ravel(), expected, rtol=1e-14)

    def test_eval_needs_running_stats(self):
        with pytest.raises(DataError, match="no running statistics"):
            nn.batchnorm_forward(np.ones((2, 1)), np.ones(1), np.zeros(1), {}, False)

    def test_running_stats_momentum(self):
        state = {}
        g, b = np.ones(1), np.zeros(1)
        nn.batchnorm_forward(np.array([[1.0], [3.0]]), g, b, state, True)
        nn.batchnorm_forward(np.array([[5.0], [7.0]]), g, b, state, True)
        assert state["running_mean"][0] == pytest.approx(0.9 * 2 + 0.1 * 6)

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("shape", [(5, 3), (4, 3, 6)])
    def test_finite_differences(self, rng, training, shape):
        x = rng.normal(size=shape)
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        state = {"running_mean": rng.normal(size=3), "running_var": rng.uniform(0.5, 2, 3)}
        r = rng.normal(size=shape)

        def loss():
            st = {k: v.copy() for k, v in state.items()}
            return float(np.sum(nn.batchnorm_forward(x, gamma, beta, st, training)[0] * r))

        _, cache = nn.batchnorm_forward(x, gamma, beta, {k: v.copy() for k, v in state.items()}, training)
        gx, gg, gb = nn.batchnorm_backward(r, cache)
        for analytic, arr in ((gx, x), (gg, gamma), (gb, beta)):
            assert nn.relative_error(analytic, fd_grad(loss, arr)) < 1e-6


class TestAdam:
    def test_schedule_arithmetic(self):
        assert nn.scheduled_rate(0.001, 0.95, 10, 25) == pytest.approx(9.025e-4, rel=1e-12)

    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        state = nn.OptimizerState()
        nn.adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2 after one step, so the move is lr * g / (|g| + eps)
        p = {"w": np.array([0.5])}
        state = nn.OptimizerState(initial_rate=1e-3)
        nn.adam_step(p, {"w": np.array([1.0])}, state)
        assert 0.5 - p["w"][0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)

    def test_non_finite_gradient_named(self):
        with pytest.raises(NumericError, match="'bad'"):
            nn.adam_step({"bad": np.zeros(1)}, {"bad": np.array([np.nan])}, nn.OptimizerState())


class TestSequential:
    def test_non_finite_forward_trips(self, rng):
        seq = nn.Sequential([nn.Dense(2, 2, rng, name="fc")], name="s")
        seq.layers[0].params["weight"][:] = np.inf
        with pytest.raises(NumericError, match="s.fc"):
            seq.forward(np.ones((1, 2)))

    def test_grad_check_flags_failing_block(self, rng):
        layer = nn.Dense(3, 2, rng, name="fc")
        x = rng.normal(size=(4, 3))
        loss = lambda: float(np.sum(layer.forward(x)))
        wrong = {"weight": np.zeros((2, 3)), "bias": np.full(2, 4.0)}
        report = nn.grad_check(loss, layer.params, wrong, tolerance=1e-6)
        assert report.failing == ["weight"]

    def test_deterministic_dropout(self):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            outs.append(nn.dropout_forward(np.ones((4, 4)), 0.5, True, rng)[0])
        np.testing.assert_array_equal(*outs)
