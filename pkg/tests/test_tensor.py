import numpy as np
import pytest

from profitq import tensor as T
from profitq.tensor import Tensor, conv2d, conv2d_raw

from conftest import assert_grads_close, away_from, numeric_grad


def naive_conv(x, w, bias=None, stride=1, padding=0, pad_value=0.0, groups=1):
    """Six-loop reference convolution, deliberately written the stupid way."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    sh = sw = stride
    ph = pw = padding
    xp = np.full((n, cin, h + 2 * ph, wd + 2 * pw), pad_value, dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, oh, ow))
    cpg_out = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // cpg_out
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[b, g * cin_g + c, i * sh + u, j * sw + v]
                                        * w[o, c, u, v])
                    out[b, o, i, j] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        out = conv2d_raw(x, w)
        np.testing.assert_array_equal(out, x)

    def test_all_ones_padded(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = conv2d_raw(x, w, padding=1, pad_value=0.0)
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 0, 0] == 4.0
        assert out[0, 0, 0, 2] == 4.0
        assert out[0, 0, 2, 2] == 4.0

    def test_matches_naive_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d_raw(x, w, b, stride=1, padding=0)
        ref = naive_conv(x, w, b)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,pad_value", [
        (1, 1, 0.0), (2, 1, -0.375), (2, 0, 0.0), (1, 2, 1.5),
    ])
    def test_strided_padded_oracle(self, rng, stride, padding, pad_value):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        out = conv2d_raw(x, w, stride=stride, padding=padding, pad_value=pad_value)
        ref = naive_conv(x, w, stride=stride, padding=padding, pad_value=pad_value)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_depthwise_equals_per_channel_oracle(self, rng):
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(4, 1, 3, 3))
        out = conv2d_raw(x, w, stride=1, padding=1, groups=4)
        ref = naive_conv(x, w, stride=1, padding=1, groups=4)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_grouped_oracle(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(6, 2, 3, 3))
        out = conv2d_raw(x, w, groups=2)
        ref = naive_conv(x, w, groups=2)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_shape_errors(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 5, 5)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        with pytest.raises(ValueError):
            conv2d(x, w)
        with pytest.raises(ValueError):
            conv2d(Tensor(rng.normal(size=(1, 4, 5, 5))),
                   Tensor(rng.normal(size=(4, 2, 3, 3))), groups=3)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 3, 3)))

        def f():
            out = conv2d(x, w, b, stride=2, padding=1, pad_value=-0.375)
            return T.tensor_sum(T.mul(out, proj)).item()

        out = conv2d(x, w, b, stride=2, padding=1, pad_value=-0.375)
        T.tensor_sum(T.mul(out, proj)).backward()
        ng = numeric_grad(f, [x.data, w.data, b.data])
        assert_grads_close(x.grad, ng[0], what="conv2d/x")
        assert_grads_close(w.grad, ng[1], what="conv2d/w")
        assert_grads_close(b.grad, ng[2], what="conv2d/bias")


class TestBatchnorm:
    def test_normalized_input_passthrough(self, rng):
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                          np.zeros(3), np.ones(3), training=True, eps=1e-8)
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_constant_channel_gives_beta(self):
        x = np.full((2, 2, 3, 3), 7.0)
        beta = np.array([1.5, -0.5])
        out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(beta),
                          np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(out.data[:, 0], 1.5, atol=1e-6)
        np.testing.assert_allclose(out.data[:, 1], -0.5, atol=1e-6)

    def test_running_stats_recurrence(self, rng):
        x = rng.normal(1.0, 2.0, size=(4, 3, 5, 5))
        run_mean = rng.normal(size=3)
        run_var = rng.uniform(0.5, 2.0, size=3)
        momentum = 0.1
        expect_mean = (1 - momentum) * run_mean + momentum * x.mean(axis=(0, 2, 3))
        expect_var = (1 - momentum) * run_var + momentum * x.var(axis=(0, 2, 3))

        gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        T.batchnorm(Tensor(x), gamma, beta, run_mean, run_var,
                    momentum=momentum, training=True)
        np.testing.assert_allclose(run_mean, expect_mean, atol=1e-12)
        np.testing.assert_allclose(run_var, expect_var, atol=1e-12)

        y = rng.normal(size=(2, 3, 4, 4))
        out = T.batchnorm(Tensor(y), gamma, beta, run_mean, run_var, training=False)
        ref = (gamma.data[None, :, None, None]
               * (y - expect_mean[None, :, None, None])
               / np.sqrt(expect_var + 1e-5)[None, :, None, None]
               + beta.data[None, :, None, None])
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_train_eval_consistency(self, rng):
        x = rng.normal(size=(6, 3, 4, 4))
        run_mean = x.mean(axis=(0, 2, 3))
        run_var = x.var(axis=(0, 2, 3))
        gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        out_train = T.batchnorm(Tensor(x), gamma, beta, run_mean.copy(), run_var.copy(),
                                training=True, update_running=False)
        out_eval = T.batchnorm(Tensor(x), gamma, beta, run_mean, run_var,
                               training=False)
        np.testing.assert_allclose(out_train.data, out_eval.data, atol=1e-10)

    def test_zero_variance_safe(self):
        x = np.full((2, 1, 2, 2), 3.0)
        out = T.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                          np.zeros(1), np.ones(1), training=True)
        assert np.all(np.isfinite(out.data))

    def test_gradients_training_mode(self, rng):
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        proj = Tensor(rng.normal(size=(3, 2, 4, 4)))

        def f():
            out = T.batchnorm(x, gamma, beta, np.zeros(2), np.ones(2),
                              training=True, update_running=False)
            return T.tensor_sum(T.mul(out, proj)).item()

        out = T.batchnorm(x, gamma, beta, np.zeros(2), np.ones(2),
                          training=True, update_running=False)
        T.tensor_sum(T.mul(out, proj)).backward()
        ng = numeric_grad(f, [x.data, gamma.data, beta.data])
        assert_grads_close(x.grad, ng[0], what="bn/x")
        assert_grads_close(gamma.grad, ng[1], what="bn/gamma")
        assert_grads_close(beta.grad, ng[2], what="bn/beta")


class TestActivations:
    def test_h_swish_values(self):
        x = Tensor(np.array([0.0, 3.0, -3.0, -1.5, 10.0, -10.0]))
        out = T.h_swish(x).data
        np.testing.assert_allclose(out, [0.0, 3.0, 0.0, -0.375, 10.0, 0.0], atol=0)

    def test_h_swish_minimum(self):
        xs = np.linspace(-6, 6, 480001)
        ys = T.h_swish_raw(xs)
        i = ys.argmin()
        assert abs(ys[i] - (-0.375)) < 1e-9
        assert abs(xs[i] - (-1.5)) < 1e-4

    def test_relu6_values(self):
        out = T.relu6(Tensor(np.array([7.0, -1.0, 3.0]))).data
        np.testing.assert_array_equal(out, [6.0, 0.0, 3.0])

    def test_relu_values(self):
        out = T.relu(Tensor(np.array([-2.0, 0.5]))).data
        np.testing.assert_array_equal(out, [0.0, 0.5])

    @pytest.mark.parametrize("op,kinks", [
        (T.relu, (0.0,)),
        (T.relu6, (0.0, 6.0)),
        (T.h_swish, (-3.0, 3.0)),
    ])
    def test_gradients(self, rng, op, kinks):
        vals = away_from(rng.uniform(-8, 8, size=128), kinks)
        x = Tensor(vals, requires_grad=True)
        proj = Tensor(rng.normal(size=128))

        def f():
            return T.tensor_sum(T.mul(op(x), proj)).item()

        T.tensor_sum(T.mul(op(x), proj)).backward()
        ng = numeric_grad(f, [x.data])
        assert_grads_close(x.grad, ng[0], what=op.__name__)


class TestDensePoolLoss:
    def test_dense_identity(self, rng):
        x = rng.normal(size=(3, 4))
        out = T.dense(Tensor(x), Tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_dense_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        proj = Tensor(rng.normal(size=(4, 3)))

        def f():
            return T.tensor_sum(T.mul(T.dense(x, w, b), proj)).item()

        T.tensor_sum(T.mul(T.dense(x, w, b), proj)).backward()
        ng = numeric_grad(f, [x.data, w.data, b.data])
        assert_grads_close(x.grad, ng[0], what="dense/x")
        assert_grads_close(w.grad, ng[1], what="dense/w")
        assert_grads_close(b.grad, ng[2], what="dense/b")

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = T.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=(2, 3)), atol=1e-15)

    def test_global_avg_pool_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3)))

        def f():
            return T.tensor_sum(T.mul(T.global_avg_pool(x), proj)).item()

        T.tensor_sum(T.mul(T.global_avg_pool(x), proj)).backward()
        ng = numeric_grad(f, [x.data])
        assert_grads_close(x.grad, ng[0], what="pool/x")

    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((4, 10)))
        labels = np.array([0, 3, 7, 9])
        loss = T.softmax_cross_entropy(logits, labels)
        assert abs(loss.item() - np.log(10)) < 1e-12

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_gradients(self, rng):
        x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=6)

        def f():
            return T.softmax_cross_entropy(x, labels).item()

        T.softmax_cross_entropy(x, labels).backward()
        ng = numeric_grad(f, [x.data])
        assert_grads_close(x.grad, ng[0], what="ce/logits")

    def test_log_softmax_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        proj = Tensor(rng.normal(size=(4, 6)))

        def f():
            return T.tensor_sum(T.mul(T.log_softmax(x), proj)).item()

        T.tensor_sum(T.mul(T.log_softmax(x), proj)).backward()
        ng = numeric_grad(f, [x.data])
        assert_grads_close(x.grad, ng[0], what="log_softmax/x")


class TestTensorBasics:
    def test_shape_invariant(self, rng):
        t = Tensor(rng.normal(size=(2, 3)))
        assert t.size == 6 and t.shape == (2, 3)

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1.0, np.inf]))

    def test_non_finite_op_rejected(self):
        big = Tensor(np.array([1e308]))
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T.mul(T.mul(big, 1e308), Tensor(np.array([1.0])))

    def test_backward_needs_scalar(self):
        t = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(t, 2.0).backward()

    def test_grad_accumulates_through_shared_node(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        y = T.mul(x, 3.0)
        z = T.add(y, y)
        T.tensor_sum(z).backward()
        np.testing.assert_allclose(x.grad, np.full(4, 6.0), atol=1e-15)

    def test_detached_input_gets_no_grad(self, rng):
        x = Tensor(rng.normal(size=4))
        y = Tensor(rng.normal(size=4), requires_grad=True)
        T.tensor_sum(T.mul(x, y)).backward()
        assert x.grad is None
        assert y.grad is not None
