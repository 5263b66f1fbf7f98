import math

import numpy as np
import pytest

from discoasr import autodiff as ad


def t(data, grad=True):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor(np.eye(2))
        b = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_dot_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        assert np.abs(got - want).max() <= 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


class TestLogSoftmax:
    def test_uniform(self):
        out = ad.log_softmax(ad.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, -math.log(3.0), atol=1e-15)

    def test_large_logits_stable(self):
        out = ad.log_softmax(ad.Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0]) < 1e-12 and abs(out[1] + 1000.0) < 1e-9

    def test_exp_sums_to_one(self):
        rng = np.random.default_rng(1)
        out = ad.log_softmax(ad.Tensor(rng.standard_normal((5, 7))))
        assert np.abs(np.exp(out.data).sum(axis=-1) - 1.0).max() <= 1e-12


class TestLayerNorm:
    def test_two_point(self):
        out = ad.layer_norm(ad.Tensor([1.0, 3.0]), ad.Tensor([1.0, 1.0]),
                            ad.Tensor([0.0, 0.0]), eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_constant_vector_floors_to_zero(self):
        out = ad.layer_norm(ad.Tensor([2.0, 2.0, 2.0]), ad.Tensor(np.ones(3)),
                            ad.Tensor(np.zeros(3)))
        assert np.abs(out.data).max() < 1e-6

    def test_zero_gain_gives_bias(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.standard_normal((4, 3)))
        bias = ad.Tensor([5.0, -1.0, 0.5])
        out = ad.layer_norm(x, ad.Tensor(np.zeros(3)), bias)
        assert np.array_equal(out.data, np.broadcast_to(bias.data, (4, 3)))


class TestDepthwiseConv:
    def test_unit_kernel_identity(self):
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.standard_normal((6, 3)))
        out = ad.depthwise_conv1d(x, ad.Tensor(np.ones((3, 1))))
        assert np.array_equal(out.data, x.data)

    def test_hand_convolution(self):
        out = ad.depthwise_conv1d(ad.Tensor([[1.0], [2.0], [3.0]]),
                                  ad.Tensor([[1.0, 1.0, 1.0]]))
        assert out.data.flatten().tolist() == [3.0, 6.0, 5.0]

    def test_sliding_window_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((9, 4))
        k = rng.standard_normal((4, 5))
        pad = 2
        xp = np.pad(x, ((pad, pad), (0, 0)))
        want = np.zeros_like(x)
        for ti in range(9):
            for c in range(4):
                for j in range(5):
                    want[ti, c] += xp[ti + j, c] * k[c, j]
        got = ad.depthwise_conv1d(ad.Tensor(x), ad.Tensor(k)).data
        assert np.abs(got - want).max() <= 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeError, match="odd"):
            ad.depthwise_conv1d(ad.Tensor(np.ones((4, 2))), ad.Tensor(np.ones((2, 4))))


class TestBackward:
    def test_sum_of_squares(self):
        x = t([1.0, -2.0])
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(x, x))
        tape.backward(loss)
        assert x.grad.tolist() == [2.0, -4.0]

    def test_matmul_against_finite_differences(self):
        rng = np.random.default_rng(5)
        a = t(rng.standard_normal((3, 4)))
        b = t(rng.standard_normal((4, 2)))
        ad.check_gradients(lambda: ad.tensor_sum(ad.matmul(a, b)), [a, b])

    def test_constant_branch_gets_no_grad(self):
        x = t([1.0, 2.0])
        c = ad.Tensor([3.0, 4.0])  # requires_grad False
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(x, c))
        tape.backward(loss)
        assert c.grad is None
        assert x.grad is not None

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0])
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ad.TapeError, match="scalar"):
            tape.backward(y)

    def test_tape_reuse_rejected(self):
        x = t([1.0])
        with ad.Tape() as tape:
            loss = ad.tensor_sum(x)
        tape.backward(loss)
        with pytest.raises(ad.TapeError, match="consumed"):
            tape.backward(loss)


def _gradcheck_cases():
    rng = np.random.default_rng(6)
    x = t(rng.standard_normal((4, 6)))
    y = t(rng.standard_normal((4, 6)))
    w = t(rng.standard_normal((6, 6)))
    k = t(rng.standard_normal((6, 3)))
    g = t(rng.standard_normal(6))
    b = t(rng.standard_normal(6))
    v = t(rng.standard_normal(9))
    mask = ad.Tensor((rng.random((4, 6)) > 0.3).astype(np.float64) / 0.7)
    return {
        "add_bias": (lambda: ad.tensor_sum(ad.add(x, g)), [x, g]),
        "sub": (lambda: ad.tensor_sum(ad.sub(x, y)), [x, y]),
        "mul": (lambda: ad.tensor_sum(ad.mul(x, y)), [x, y]),
        "scale": (lambda: ad.tensor_sum(ad.scale(x, -1.7)), [x]),
        "exp": (lambda: ad.tensor_sum(ad.exp(ad.scale(x, 0.3))), [x]),
        "sigmoid": (lambda: ad.tensor_sum(ad.sigmoid(x)), [x]),
        "swish": (lambda: ad.tensor_sum(ad.swish(x)), [x]),
        "glu": (lambda: ad.tensor_sum(ad.glu(x)), [x]),
        "matmul": (lambda: ad.tensor_sum(ad.matmul(x, w)), [x, w]),
        "transpose": (lambda: ad.tensor_sum(ad.mul(ad.transpose(x), ad.transpose(y))), [x]),
        "reshape": (lambda: ad.tensor_sum(ad.exp(ad.reshape(x, (2, 12)))), [x]),
        "slice": (lambda: ad.tensor_sum(ad.slice_axis(x, 1, 1, 4)), [x]),
        "concat": (lambda: ad.tensor_sum(ad.swish(ad.concat([x, y], axis=1))), [x, y]),
        "pad_rows": (lambda: ad.tensor_sum(ad.swish(ad.pad_rows(x, 3))), [x]),
        "sum_axis": (lambda: ad.tensor_sum(ad.exp(ad.tensor_sum(x, axis=0))), [x]),
        "mean": (lambda: ad.tensor_mean(ad.mul(x, x)), [x]),
        "mean_axis": (lambda: ad.tensor_sum(ad.exp(ad.tensor_mean(x, axis=1))), [x]),
        "softmax": (lambda: ad.tensor_sum(ad.mul(ad.softmax(x), y)), [x]),
        "log_softmax": (lambda: ad.tensor_sum(ad.mul(ad.log_softmax(x), y)), [x]),
        "layer_norm": (lambda: ad.tensor_sum(ad.swish(ad.layer_norm(x, g, b))), [x, g, b]),
        "depthwise_conv": (lambda: ad.tensor_sum(ad.depthwise_conv1d(x, k)), [x, k]),
        "pointwise_conv": (lambda: ad.tensor_sum(ad.matmul(ad.swish(x), w)), [x, w]),
        "relative_bias": (lambda: ad.tensor_sum(ad.mul(ad.relative_position_bias(v, 4),
                                                       ad.matmul(x, ad.transpose(y)))), [v, x]),
        "dropout_frozen_mask": (lambda: ad.tensor_sum(ad.mul(x, mask)), [x]),
    }


@pytest.mark.parametrize("name", sorted(_gradcheck_cases().keys()))
def test_gradient_matches_finite_differences(name):
    fn, tensors = _gradcheck_cases()[name]
    ad.check_gradients(fn, tensors, rel_tol=1e-4, abs_tol=1e-8)


class TestDeterminismAndDebug:
    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(7)
        x = np.asarray(rng.standard_normal((8, 5)))
        w = np.asarray(rng.standard_normal((5, 5)))

        def run():
            return ad.layer_norm(ad.swish(ad.matmul(ad.Tensor(x), ad.Tensor(w))),
                                 ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5))).data

        assert np.array_equal(run(), run())

    def test_debug_flag_surfaces_nonfinite(self):
        ad.set_debug_finite_checks(True)
        try:
            with pytest.raises(ad.NumericsError):
                ad.exp(ad.Tensor([1e9]))
        finally:
            ad.set_debug_finite_checks(False)
        # without the flag the value propagates
        assert not np.isfinite(ad.exp(ad.Tensor([1e9])).data).all()

    def test_dropout_eval_is_identity(self):
        x = ad.Tensor(np.ones((3, 3)))
        out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_dropout_seeded_reproducible(self):
        x = ad.Tensor(np.ones((20, 20)))
        a = ad.dropout(x, 0.4, np.random.default_rng(3), training=True).data
        b = ad.dropout(x, 0.4, np.random.default_rng(3), training=True).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, x.data)


class TestTapeScoping:
    def test_no_recording_outside_tape(self):
        x = t([1.0, 2.0])
        tape = ad.Tape()
        with tape:
            pass  # nothing recorded
        y = ad.tensor_sum(ad.mul(x, x))
        assert len(tape) == 0
        assert y.item() == 5.0

    def test_stop_recording_context(self):
        x = t([1.0, 2.0])
        with ad.Tape() as tape:
            with ad.stop_recording():
                ad.tensor_sum(ad.mul(x, x))
            loss = ad.tensor_sum(x)
        assert len(tape) == 1
        tape.backward(loss)
        assert x.grad.tolist() == [1.0, 1.0]
