import math

import numpy as np
import pytest

from openpar import tensor as T
from openpar.tensor import (
    MASK_BLOCKED,
    DegenerateMaskError,
    ShapeError,
    Tape,
    Tensor,
)


def matmul_loops(a, b):
    """Triple-loop matrix product, the independent oracle."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(eye, b).data, b.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - matmul_loops(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = Tensor(rng.standard_normal((3, 4)))
            b = Tensor(rng.standard_normal((4, 5)))
            c = Tensor(rng.standard_normal((5, 2)))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-10

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a = T.parameter(rng.standard_normal((3, 4)))
        b = T.parameter(rng.standard_normal((4, 2)))
        with Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
            grads = tape.backward(loss)
        # d sum(AB) / dA = ones @ B^T
        assert np.allclose(grads[a], np.ones((3, 2)) @ b.data.T)
        assert np.allclose(grads[b], a.data.T @ np.ones((3, 2)))


class TestMaskedSoftmax:
    def test_symmetric(self):
        out = T.masked_softmax(Tensor([0.0, 0.0]), np.zeros(2))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_single_survivor(self):
        out = T.masked_softmax(Tensor([5.0, 1.0]), np.array([0.0, MASK_BLOCKED]))
        assert out.data[0] == 1.0
        assert out.data[1] == 0.0

    def test_closed_form(self):
        out = T.masked_softmax(
            Tensor([1.0, 2.0, 3.0]), np.array([0.0, 0.0, MASK_BLOCKED])
        )
        e = math.e
        expected = [1.0 / (1.0 + e), e / (1.0 + e), 0.0]
        assert np.allclose(out.data, expected, atol=1e-15)
        assert out.data[2] == 0.0

    def test_all_masked_raises(self):
        with pytest.raises(DegenerateMaskError):
            T.masked_softmax(Tensor([1.0, 2.0]), np.full(2, MASK_BLOCKED))

    def test_random_properties(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = rng.integers(2, 9)
            logits = Tensor(rng.standard_normal(n) * rng.uniform(0.1, 10))
            blocked = rng.random(n) < 0.4
            if blocked.all():
                blocked[rng.integers(n)] = False
            mask = np.where(blocked, MASK_BLOCKED, 0.0)
            out = T.masked_softmax(logits, mask).data
            assert np.all(out >= 0.0)
            assert abs(out.sum() - 1.0) < 1e-12
            assert np.all(out[blocked] == 0.0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal(6)
        mask = np.array([0.0, 0.0, MASK_BLOCKED, 0.0, MASK_BLOCKED, 0.0])
        base = T.masked_softmax(Tensor(logits), mask).data
        shifted = T.masked_softmax(Tensor(logits + 3.7), mask).data
        assert np.allclose(base, shifted, atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(13)
        mask = np.array([0.0, MASK_BLOCKED, 0.0, 0.0])
        p = T.parameter(rng.standard_normal(4))
        w = Tensor(rng.standard_normal(4))

        def loss_fn():
            return T.sum_all(T.mul(T.masked_softmax(p, mask), w))

        err, _ = T.grad_check(loss_fn, {"p": p}, step=1e-6)
        assert err < 1e-7


class TestLayerNorm:
    def unit_affine(self, n):
        return Tensor(np.ones(n)), Tensor(np.zeros(n))

    def test_constant_input_maps_to_bias(self):
        gain, bias = self.unit_affine(4)
        out = T.layer_norm(Tensor([1.0, 1.0, 1.0, 1.0]), gain, bias)
        assert np.allclose(out.data, np.zeros(4))

    def test_two_point_hand_computation(self):
        gain, bias = self.unit_affine(2)
        out = T.layer_norm(Tensor([-1.0, 1.0]), gain, bias, eps=1e-14)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_mean_zero_unit_variance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(16) * 3 + 5
        gain, bias = self.unit_affine(16)
        out = T.layer_norm(Tensor(x), gain, bias, eps=1e-12).data
        assert abs(out.mean()) < 1e-10
        assert abs(out.var() - 1.0) < 1e-6

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(21)
        x = T.parameter(rng.standard_normal(6))
        gain = T.parameter(rng.standard_normal(6))
        bias = T.parameter(rng.standard_normal(6))
        w = Tensor(rng.standard_normal(6))

        def loss_fn():
            return T.sum_all(T.mul(T.layer_norm(x, gain, bias), w))

        err, _ = T.grad_check(loss_fn, {"x": x, "g": gain, "b": bias}, step=1e-6)
        assert err < 1e-6

    def test_scalar_axis_rejected(self):
        gain, bias = self.unit_affine(1)
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor([3.0]), gain, bias)


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0

    def test_asymptotes(self):
        assert abs(T.gelu(Tensor(20.0)).item() - 20.0) < 1e-9
        assert abs(T.gelu(Tensor(-20.0)).item()) < 1e-9

    def test_value_at_one(self):
        # tanh form evaluated by hand: 0.5*(1 + tanh(sqrt(2/pi)*1.044715))
        expected = 0.5 * (1.0 + math.tanh(math.sqrt(2 / math.pi) * 1.044715))
        assert abs(T.gelu(Tensor(1.0)).item() - expected) < 1e-15
        assert abs(expected - 0.8412) < 1e-4

    def test_gradient_matches_fd(self):
        x = T.parameter(np.linspace(-3, 3, 13))

        def loss_fn():
            return T.sum_all(T.gelu(x))

        err, _ = T.grad_check(loss_fn, {"x": x}, step=1e-6)
        assert err < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        p = T.parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            grads = tape.backward(T.sum_all(p))
        assert np.array_equal(grads[p], np.ones((2, 3)))

    def test_quadratic_gives_2p(self):
        p = T.parameter(np.array([1.0, -2.0, 3.0]))
        with Tape() as tape:
            grads = tape.backward(T.sum_all(T.mul(p, p)))
        assert np.allclose(grads[p], 2 * p.data)

    def test_shared_input_accumulates(self):
        p = T.parameter(np.array([2.0]))
        with Tape() as tape:
            # p*p + p -> gradient 2p + 1
            grads = tape.backward(T.sum_all(T.add(T.mul(p, p), p)))
        assert np.allclose(grads[p], [5.0])

    def test_non_scalar_root_rejected(self):
        p = T.parameter(np.ones(3))
        with Tape() as tape:
            out = T.mul(p, p)
            with pytest.raises(ShapeError):
                tape.backward(out)

    def test_unreached_parameter_gets_zero_grad(self):
        p = T.parameter(np.ones(2))
        q = T.parameter(np.ones(2))
        with Tape() as tape:
            out = T.sum_all(T.add(p, T.scale(q, 0.0)))
            grads = tape.backward(out)
        assert np.allclose(grads[q], 0.0)

    def test_add_aliasing_does_not_cross_contaminate(self):
        p = T.parameter(np.array([1.0, 2.0]))
        q = T.parameter(np.array([3.0, 4.0]))
        with Tape() as tape:
            s = T.add(p, q)
            out = T.sum_all(T.add(s, T.mul(p, Tensor([10.0, 10.0]))))
            grads = tape.backward(out)
        assert np.allclose(grads[p], [11.0, 11.0])
        assert np.allclose(grads[q], [1.0, 1.0])


class TestOpsGradientsFd:
    """Finite-difference spot checks for the structural ops."""

    def check(self, build, params, tol=1e-7):
        err, _ = T.grad_check(build, params, step=1e-6)
        assert err < tol

    def test_concat_slice(self):
        rng = np.random.default_rng(31)
        a = T.parameter(rng.standard_normal((2, 3)))
        b = T.parameter(rng.standard_normal((2, 2)))
        w = Tensor(rng.standard_normal((2, 4)))

        def loss_fn():
            joined = T.concat([a, b], axis=1)
            return T.sum_all(T.mul(T.slice_axis(joined, 1, 1, 5), w))

        self.check(loss_fn, {"a": a, "b": b})

    def test_take_rows_and_positions(self):
        rng = np.random.default_rng(33)
        table = T.parameter(rng.standard_normal((5, 3)))
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        pos = np.array([2, 0])
        w = Tensor(rng.standard_normal((2, 3)))

        def loss_fn():
            emb = T.take_rows(table, ids)
            picked = T.take_positions(emb, pos)
            return T.sum_all(T.mul(picked, w))

        self.check(loss_fn, {"table": table})

    def test_logsumexp(self):
        rng = np.random.default_rng(35)
        x = T.parameter(rng.standard_normal((3, 4)))

        def loss_fn():
            return T.sum_all(T.logsumexp(x, axis=-1))

        self.check(loss_fn, {"x": x})

    def test_broadcast_ops(self):
        rng = np.random.default_rng(37)
        a = T.parameter(rng.standard_normal((2, 3, 4)))
        b = T.parameter(rng.standard_normal((4,)))

        def loss_fn():
            y = T.mul(T.add(a, b), T.exp(T.scale(b, 0.1)))
            return T.sum_all(T.div(y, Tensor(np.full((3, 4), 2.0))))

        self.check(loss_fn, {"a": a, "b": b})

    def test_batched_matmul(self):
        rng = np.random.default_rng(39)
        a = T.parameter(rng.standard_normal((2, 3, 4)))
        b = T.parameter(rng.standard_normal((2, 4, 2)))

        def loss_fn():
            return T.sum_all(T.matmul(a, b))

        self.check(loss_fn, {"a": a, "b": b})

    def test_broadcast_matmul_shared_rhs(self):
        rng = np.random.default_rng(41)
        a = T.parameter(rng.standard_normal((3, 2, 4)))
        w = T.parameter(rng.standard_normal((4, 5)))

        def loss_fn():
            return T.sum_all(T.matmul(a, w))

        self.check(loss_fn, {"a": a, "w": w})


class TestGradCheckApi:
    def test_quadratic_is_exact(self):
        p = T.parameter(np.array([1.0, 2.0, 3.0]))

        def loss_fn():
            return T.sum_all(T.mul(p, p))

        err, details = T.grad_check(loss_fn, {"p": p})
        assert err < 1e-9
        assert details[0][0] == "p"

    def test_nonfinite_loss_propagates(self):
        p = T.parameter(np.array([0.0]))

        def loss_fn():
            with np.errstate(divide="ignore"):
                return T.sum_all(T.log(p))

        with pytest.raises(T.NumericError):
            T.grad_check(loss_fn, {"p": p})
