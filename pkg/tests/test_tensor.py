import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctgmae import tensor as T


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_square(self):
        x = leaf([3.0])
        (g,) = T.backward(T.tsum(T.mul(x, x)), [x])
        np.testing.assert_array_equal(g, [6.0])

    def test_unreachable_is_zero(self):
        x, w = leaf([1.0, 2.0]), leaf([[5.0]])
        grads = T.backward(T.tsum(x), [x, w])
        np.testing.assert_array_equal(grads[1], np.zeros((1, 1)))

    def test_mse_closed_form(self, rng):
        A = rng.normal(size=(7, 3))
        b = rng.normal(size=7)
        x = leaf(rng.normal(size=3))
        (g,) = T.backward(T.mse(T.matmul(A, x), b), [x])
        np.testing.assert_allclose(g, 2 * A.T @ (A @ x.data - b) / 7, rtol=1e-12, atol=1e-14)

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            T.backward(T.mul(leaf([1.0, 2.0]), 2.0))

    def test_shared_subexpression(self):
        x = leaf(2.0)
        y = T.mul(x, x)
        (g,) = T.backward(T.add(y, y), [x])
        assert float(g) == 8.0

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_trips(self):
        with pytest.raises(FloatingPointError):
            T.mul(leaf([1e308]), 10.0)


class TestPrimitives:
    @settings(max_examples=100)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_rows_and_shift(self, x, c):
        p = T.softmax(x).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax(x + c).data, p, atol=1e-9)

    def test_dropout(self, rng):
        x = rng.normal(size=(4, 6))
        np.testing.assert_array_equal(T.dropout(x, 0.0, rng, True).data, x)
        np.testing.assert_array_equal(T.dropout(x, 0.5, rng, False).data, x)
        a = T.dropout(x, 0.3, np.random.default_rng(4), True).data
        b = T.dropout(x, 0.3, np.random.default_rng(4), True).data
        np.testing.assert_array_equal(a, b)
        kept = a != 0
        np.testing.assert_allclose(a[kept], x[kept] / 0.7, rtol=1e-15)

    def test_batch_norm_identity_in_inference(self, rng):
        x = rng.normal(size=(2, 5, 4))
        out = T.batch_norm(x, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), False, eps=0.0)
        np.testing.assert_array_equal(out.data, x)

    def test_batch_norm_training_stats(self, rng):
        x = rng.normal(3.0, 2.0, size=(6, 5, 4))
        mean, var = np.zeros(4), np.ones(4)
        out = T.batch_norm(x, np.ones(4), np.zeros(4), mean, var, True).data
        np.testing.assert_allclose(out.reshape(-1, 4).mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(mean, 0.1 * x.reshape(-1, 4).mean(axis=0), rtol=1e-12)

    def test_split_concat_round_trip(self, rng):
        x = leaf(rng.normal(size=(4, 3)))
        a, b = T.split(x, 2, axis=0)
        np.testing.assert_array_equal(T.concat([a, b], axis=0).data, x.data)

    def test_cross_entropy_value(self):
        logits = np.array([[0.0, 0.0], [2.0, 0.0]])
        loss = T.cross_entropy(logits, np.array([1, 0])).data
        expected = (np.log(2) + np.log1p(np.exp(-2.0))) / 2
        assert float(loss) == pytest.approx(expected, rel=1e-14)


class TestGradCheck:
    def test_quadratic(self, rng):
        A = rng.normal(size=(4, 4))
        Q = A @ A.T

        def loss(p):
            x = p["x"]
            return T.tsum(T.mul(x, T.matmul(x, Q)))

        assert T.grad_check(loss, {"x": rng.normal(size=(1, 4))}, 1e-5) < 1e-8

    @pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-2])
    def test_step_range(self, eps):
        with pytest.raises(ValueError):
            T.grad_check(lambda p: T.tsum(p["x"]), {"x": np.ones(2)}, eps)

    def test_non_finite_loss(self):
        def loss(p):
            return T.mul(T.tsum(p["x"]), np.inf)

        with pytest.raises(FloatingPointError):
            T.grad_check(loss, {"x": np.ones(2)})

    def test_primitive_composition(self, rng):
        """Every primitive the model uses, chained once."""
        labels = np.array([0, 1, 1])
        target = rng.normal(size=(3, 2))

        def loss(p):
            h = T.gelu(T.linear(p["x"], p["W"], p["b"]))
            h = T.batch_norm(h, p["g"], p["beta"], np.zeros(4), np.ones(4), True)
            q = T.reshape(h, (3, 1, 2, 2))
            att, _ = T.attention(q, q, q)
            flat = T.flatten(T.transpose(att, (0, 2, 1, 3)))
            both = T.concat([flat, T.softmax(flat)], axis=-1)
            left, right = T.split(both, 2, axis=-1)
            logits = T.sub(T.linear(left, p["V"]), T.mul(T.linear(right, p["V"]), 0.5))
            reg = T.mse(T.dropout(logits, 0.3, np.random.default_rng(1), True), target)
            return T.add(T.cross_entropy(logits, labels), reg)

        params = {"x": rng.normal(size=(3, 5)), "W": rng.normal(size=(5, 4)),
                  "b": rng.normal(size=4), "g": rng.uniform(0.5, 1.5, 4),
                  "beta": rng.normal(size=4), "V": rng.normal(size=(4, 2))}
        assert T.grad_check(loss, params) < 1e-6


class TestOptimizers:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        T.adam_step(p, {"w": np.zeros(2)}, T.OptimizerState(lr=0.1))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([1.0, 1.0])}
        T.adam_step(p, {"w": np.array([3.0, -0.5])}, T.OptimizerState(lr=0.01, eps=0.0))
        np.testing.assert_allclose(p["w"], [0.99, 1.01], rtol=1e-14)

    def test_adamw_without_decay_equals_adam(self, rng):
        p1 = {"w": rng.normal(size=(3, 3))}
        p2 = {"w": p1["w"].copy()}
        s1, s2 = T.OptimizerState(lr=0.01), T.OptimizerState(lr=0.01, weight_decay=0.0)
        for _ in range(5):
            g = rng.normal(size=(3, 3))
            T.adam_step(p1, {"w": g}, s1)
            T.adamw_step(p2, {"w": g}, s2)
        np.testing.assert_array_equal(p1["w"], p2["w"])

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0])}
        T.adamw_step(p, {"w": np.zeros(1)}, T.OptimizerState(lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(p["w"], [2.0 - 0.1 * 0.5 * 2.0], rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, T.OptimizerState())

    def test_state_shapes_follow_params(self, rng):
        state = T.OptimizerState()
        p = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
        T.adam_step(p, {k: np.ones_like(v) for k, v in p.items()}, state)
        assert state.step == 1
        assert {k: v.shape for k, v in state.m.items()} == {k: v.shape for k, v in p.items()}
