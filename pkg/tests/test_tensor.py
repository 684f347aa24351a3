"""Gradient, sampling, and error-contract tests for the tensor core.

Every differentiable op is checked against a central finite-difference
oracle computed by mutating raw float32 data, independent of the tape.
"""

import numpy as np
import pytest

from fadelab import tensor as T
from fadelab.tensor import (
    NonFiniteError,
    RngState,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    forward_op,
    sample_rademacher,
    sample_uniform,
)


def fd_grads(build, datas, h=1e-3):
    """Central finite differences of the scalar build(*tensors) at datas."""
    tensors = [Tensor(d.copy()) for d in datas]
    grads = []
    for t in tensors:
        g = np.zeros(t.data.size, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = build(*tensors).item()
            flat[i] = orig - h
            fm = build(*tensors).item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def assert_grads_close(build, datas, rtol=1e-3):
    tensors = [Tensor(d.copy(), requires_grad=True) for d in datas]
    loss = build(*tensors)
    backward(loss)
    analytic = [t.grad.astype(np.float64) for t in tensors]
    numeric = fd_grads(build, datas)
    for a, n in zip(analytic, numeric):
        err = np.linalg.norm(a - n) / (np.linalg.norm(a) + np.linalg.norm(n) + 1e-12)
        assert err < rtol, f"gradient mismatch: {err:.2e}"


def away_from_zero(x, margin=0.08):
    """Shift entries out of the +-margin band so relu/kink FD stays clean."""
    return x + np.sign(x) * margin + (x == 0) * margin


def rand(shape, seed, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape) * scale).astype(np.float32)


def weighted_sum(out, seed=0):
    w = Tensor(rand(out.shape, seed + 1000))
    return T.sum_(T.mul(out, w))


class TestForwardExamples:
    def test_relu_definition(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_matmul_identity(self):
        a = Tensor(rand((3, 3), 1))
        out = T.matmul(Tensor(np.eye(3, dtype=np.float32)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_softmax_rows_are_distributions(self):
        x = Tensor(rand((16, 7), 2, scale=4.0))
        s = T.softmax(x).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
        assert (s >= 0).all() and (s <= 1).all()

    def test_clip_bounds(self):
        x = Tensor(rand((50,), 3, scale=3.0))
        out = T.clip(x, -0.5, 0.25).data
        assert out.min() >= -0.5 and out.max() <= 0.25

    def test_grouped_conv_groups1_equals_conv(self):
        x = Tensor(rand((2, 4, 8, 8), 4))
        w = Tensor(rand((6, 4, 3, 3), 5))
        a = T.conv2d(x, w, stride=1, padding="same")
        b = T.grouped_conv2d(x, w, stride=1, padding="same", groups=1)
        np.testing.assert_array_equal(a.data, b.data)

    def test_forward_op_dispatch(self):
        out = forward_op("relu", [Tensor([-2.0, 3.0])])
        np.testing.assert_array_equal(out.data, [0.0, 3.0])
        with pytest.raises(ShapeError, match="unknown op"):
            forward_op("fft", [Tensor([1.0])])


class TestBackwardExamples:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.sum_(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_dead_relu(self):
        x = Tensor([-1.0], requires_grad=True)
        backward(T.sum_(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_ten_parameter_mlp_matches_finite_differences(self):
        x = rand((3, 2), 10)

        def build(w1, b1, w2):
            h = T.relu(T.add(T.matmul(Tensor(x), w1), b1))
            out = T.matmul(h, w2)
            return T.sum_(T.mul(out, out))

        assert_grads_close(build, [rand((2, 2), 11), rand((2,), 12), rand((2, 1), 13)])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        with pytest.raises(TapeError, match="scalar"):
            backward(y)
        T.clear_tape()

    def test_empty_tape_rejected(self):
        with pytest.raises(TapeError, match="empty"):
            backward(Tensor(1.0))

    def test_tape_is_single_use(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.sum_(T.mul(x, x))
        backward(loss)
        assert T.tape_size() == 0

    def test_grad_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        backward(T.sum_(T.add(T.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [7.0])


class TestGradientChecks:
    """Analytic vs central finite differences (h=1e-3) within 1e-3 relative."""

    def test_matmul_2d(self):
        assert_grads_close(lambda a, b: weighted_sum(T.matmul(a, b), 1), [rand((4, 3), 20), rand((3, 5), 21)])

    def test_matmul_batched_broadcast(self):
        assert_grads_close(
            lambda a, b: weighted_sum(T.matmul(a, b), 2),
            [rand((1, 4, 3), 22), rand((6, 3, 2), 23)],
        )

    def test_add_broadcast(self):
        assert_grads_close(lambda a, b: weighted_sum(T.add(a, b), 3), [rand((5, 4), 24), rand((4,), 25)])

    def test_mul_broadcast(self):
        assert_grads_close(lambda a, b: weighted_sum(T.mul(a, b), 4), [rand((5, 4), 26), rand((5, 1), 27)])

    def test_relu(self):
        data = away_from_zero(rand((6, 5), 28))
        assert_grads_close(lambda x: weighted_sum(T.relu(x), 5), [data])

    def test_log(self):
        data = np.abs(rand((4, 4), 29)) + 0.5
        assert_grads_close(lambda x: weighted_sum(T.log(x), 6), [data])

    def test_reshape(self):
        assert_grads_close(lambda x: weighted_sum(T.reshape(x, (2, 6)), 7), [rand((3, 4), 30)])

    def test_mean_all_and_axis(self):
        assert_grads_close(lambda x: T.mean(x), [rand((3, 4), 31)])
        assert_grads_close(lambda x: weighted_sum(T.mean(x, axis=1), 8), [rand((3, 4), 32)])

    def test_sum_axis_keepdims(self):
        assert_grads_close(lambda x: weighted_sum(T.sum_(x, axis=0, keepdims=True), 9), [rand((3, 4), 33)])

    def test_softmax(self):
        assert_grads_close(lambda x: weighted_sum(T.softmax(x), 10), [rand((4, 6), 34, scale=2.0)])

    def test_log_softmax(self):
        assert_grads_close(lambda x: weighted_sum(T.log_softmax(x), 11), [rand((4, 6), 35, scale=2.0)])

    def test_cross_entropy(self):
        labels = np.array([0, 2, 1, 2])
        assert_grads_close(lambda x: T.cross_entropy(x, labels), [rand((4, 3), 36, scale=2.0)])

    def test_l2_norm_sq(self):
        assert_grads_close(lambda x: T.l2_norm_sq(x), [rand((3, 4), 37)])
        assert_grads_close(lambda x: weighted_sum(T.l2_norm_sq(x, axis=1), 12), [rand((3, 4), 38)])

    def test_max_min(self):
        data = rand((4, 5), 39, scale=3.0)
        assert_grads_close(lambda x: weighted_sum(T.max_(x, axis=1), 13), [data])
        assert_grads_close(lambda x: T.min_(x), [data])

    def test_clip(self):
        data = rand((5, 5), 40, scale=2.0)
        # keep every entry at least h away from the clamp bounds
        data = data[(np.abs(data - 1.0) > 0.05) & (np.abs(data + 1.0) > 0.05)][:16].reshape(4, 4)
        assert_grads_close(lambda x: weighted_sum(T.clip(x, -1.0, 1.0), 14), [data])

    def test_concat(self):
        assert_grads_close(
            lambda a, b: weighted_sum(T.concat([a, b], axis=1), 15),
            [rand((3, 2), 41), rand((3, 4), 42)],
        )

    def test_slice_basic(self):
        assert_grads_close(
            lambda x: weighted_sum(T.slice_(x, key=(slice(1, 3), slice(0, 2))), 16),
            [rand((4, 3), 43)],
        )

    def test_slice_gather_with_duplicates(self):
        idx = np.array([0, 2, 2, 1])
        assert_grads_close(
            lambda x: weighted_sum(T.slice_(x, axis=0, indices=idx), 17),
            [rand((3, 4), 44)],
        )

    def test_conv2d_valid(self):
        assert_grads_close(
            lambda x, w: weighted_sum(T.conv2d(x, w), 18),
            [rand((2, 2, 5, 5), 45), rand((3, 2, 3, 3), 46)],
        )

    def test_conv2d_same_stride2(self):
        assert_grads_close(
            lambda x, w: weighted_sum(T.conv2d(x, w, stride=2, padding="same"), 19),
            [rand((2, 2, 6, 6), 47), rand((3, 2, 3, 3), 48)],
        )

    def test_grouped_conv2d(self):
        assert_grads_close(
            lambda x, w: weighted_sum(T.grouped_conv2d(x, w, groups=2), 20),
            [rand((2, 4, 5, 5), 49), rand((6, 2, 3, 3), 50)],
        )


class TestSampling:
    def test_uniform_degenerate_interval(self):
        out = sample_uniform(RngState(7), (4, 4), 0.0, 0.0)
        np.testing.assert_array_equal(out.data, np.zeros((4, 4), dtype=np.float32))

    def test_uniform_law_of_large_numbers(self):
        out = sample_uniform(RngState(123), (100_000,), -1.0, 1.0)
        assert -0.02 < out.data.mean() < 0.02
        assert out.data.min() >= -1.0 and out.data.max() < 1.0

    def test_uniform_determinism(self):
        a = sample_uniform(RngState(9), (64,), 0.0, 2.0)
        b = sample_uniform(RngState(9), (64,), 0.0, 2.0)
        np.testing.assert_array_equal(a.data, b.data)

    def test_uniform_rejects_inverted_bounds(self):
        with pytest.raises(ValueError, match="lo"):
            sample_uniform(RngState(1), (3,), 1.0, 0.0)

    def test_rademacher_support(self):
        out = sample_rademacher(RngState(5), (1000,))
        np.testing.assert_array_equal(np.abs(out.data), 1.0)

    def test_rademacher_frequency(self):
        out = sample_rademacher(RngState(17), (100_000,))
        frac = (out.data > 0).mean()
        assert 0.49 < frac < 0.51

    def test_rademacher_determinism(self):
        a = sample_rademacher(RngState(3), (128,))
        b = sample_rademacher(RngState(3), (128,))
        np.testing.assert_array_equal(a.data, b.data)

    def test_child_streams_are_independent_and_stable(self):
        root = RngState(42)
        a1 = root.child("stage-a").uniform((8,))
        a2 = RngState(42).child("stage-a").uniform((8,))
        b = RngState(42).child("stage-b").uniform((8,))
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_clone_preserves_stream_position(self):
        rng = RngState(11)
        rng.uniform((5,))
        snap = rng.clone()
        np.testing.assert_array_equal(rng.uniform((5,)), snap.uniform((5,)))


class TestErrors:
    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\)"):
            T.matmul(Tensor(rand((2, 3), 60)), Tensor(rand((2, 3), 61)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.inf])

    def test_non_finite_result_rejected(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(Tensor([0.0]))

    def test_conv_shape_error(self):
        with pytest.raises(ShapeError, match="conv2d"):
            T.conv2d(Tensor(rand((1, 3, 5, 5), 62)), Tensor(rand((2, 4, 3, 3), 63)))

    def test_gather_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            T.slice_(Tensor(rand((3, 2), 64)), axis=0, indices=np.array([0, 3]))
