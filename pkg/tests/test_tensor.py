import numpy as np
import pytest

from pgga.optim import finite_diff_check
from pgga.tensor import (
    ComputationRecord,
    ParameterSet,
    BatchNormState,
    Tensor,
    backward,
    batch_norm,
    concat,
    conv2d,
    cross_entropy_sum,
    elementwise,
    global_pool,
    logistic,
    matmul,
    narrow,
    recording,
    relu,
    reshape,
    sqrt,
    stack,
    take_pairs,
    tmean,
    transpose,
    tsum,
)


def conv2d_oracle(x, w, stride, pad):
    """Naive quadruple-loop convolution used as the independent reference."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            r = i * stride + u - pad
                            s = j * stride + v - pad
                            if 0 <= r < H and 0 <= s < W:
                                acc += x[c, r, s] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (3, 5, 4))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x)

    def test_constant_input_ones_kernel_interior(self):
        c = 0.7
        x = np.full((1, 6, 6), c)
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("stride,pad,H,W", [(1, 0, 4, 4), (1, 1, 4, 4), (2, 1, 5, 5), (2, 1, 7, 5)])
    def test_matches_loop_oracle(self, stride, pad, H, W):
        rng = np.random.default_rng(42 + stride + pad + H)
        x = rng.uniform(-1, 1, (2, H, W))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, w, stride, pad), atol=1e-12, rtol=0)

    def test_all_small_shapes_match_oracle(self):
        rng = np.random.default_rng(7)
        for C in (1, 2, 4):
            for H, W in ((3, 3), (4, 8), (8, 8)):
                x = rng.uniform(-1, 1, (C, H, W))
                w = rng.uniform(-1, 1, (2, C, 3, 3))
                out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
                np.testing.assert_allclose(out.data, conv2d_oracle(x, w, 1, 1), atol=1e-12, rtol=0)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(3)
        xb = rng.uniform(-1, 1, (3, 2, 7, 5))
        w = rng.uniform(-1, 1, (4, 2, 3, 3))
        out = conv2d(Tensor(xb), Tensor(w), stride=2, pad=1)
        for b in range(3):
            single = conv2d(Tensor(xb[b]), Tensor(w), stride=2, pad=1)
            np.testing.assert_allclose(out.data[b], single.data, atol=1e-13, rtol=0)

    def test_shape_mismatch_reports_dimensions(self):
        x = Tensor(np.zeros((2, 4, 4)))
        w = Tensor(np.zeros((3, 5, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, w)
        with pytest.raises(ValueError, match="stride"):
            conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=3)
        with pytest.raises(ValueError, match="odd|square"):
            conv2d(x, Tensor(np.zeros((3, 2, 2, 2))))
        with pytest.raises(ValueError, match="exceeds"):
            conv2d(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((3, 2, 3, 3))), pad=0)

    def test_even_input_stride_two_halves(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, (1, 8, 6))
        w = rng.uniform(-1, 1, (2, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        assert out.data.shape == (2, 4, 3)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, w, 2, 1), atol=1e-12, rtol=0)


class TestGlobalPool:
    def test_constant_map(self):
        x = Tensor(np.full((2, 3, 3), 0.7))
        assert np.allclose(global_pool(x, "avg").data, 0.7)
        assert np.allclose(global_pool(x, "max").data, 0.7)

    def test_small_map(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert global_pool(x, "avg").data[0] == 2.5
        assert global_pool(x, "max").data[0] == 4.0

    def test_random_matches_scan_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, (5, 6, 7))
        avg = global_pool(Tensor(x), "avg").data
        mx = global_pool(Tensor(x), "max").data
        for c in range(5):
            best = -np.inf
            total = 0.0
            for i in range(6):
                for j in range(7):
                    total += x[c, i, j]
                    best = max(best, x[c, i, j])
            assert abs(avg[c] - total / 42) < 1e-12
            assert mx[c] == best

    def test_max_tie_goes_to_first_row_major(self):
        x = np.zeros((1, 2, 2))
        x[0, 0, 1] = 5.0
        x[0, 1, 0] = 5.0
        params = ParameterSet()
        p = params.add("x", x)
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            loss = tsum(global_pool(p, "max"))
        g = backward(rec, loss)["x"]
        assert g[0, 0, 1] == 1.0 and g[0, 1, 0] == 0.0


class TestBatchNorm:
    def test_constant_input_zero_output(self):
        state = BatchNormState(3)
        x = Tensor(np.full((2, 3, 4, 4), 1.7))
        out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, "train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_zero_scale_shift_three(self):
        state = BatchNormState(2)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 3, 3)))
        out = batch_norm(x, Tensor(np.zeros(2)), Tensor(np.full(2, 3.0)), state, "train")
        np.testing.assert_array_equal(out.data, 3.0)

    def test_train_moments(self):
        # data variance well above the 1e-5 epsilon so v/(v+eps) stays within 1e-6 of 1
        rng = np.random.default_rng(5)
        x = rng.normal(2.0, 6.0, size=(4, 3, 5, 5))
        state = BatchNormState(3)
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, "train")
        m = out.data.mean(axis=(0, 2, 3))
        v = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(m, 0.0, atol=1e-10)
        np.testing.assert_allclose(v, 1.0, atol=1e-6)

    def test_eval_before_train_rejected(self):
        state = BatchNormState(2)
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(RuntimeError, match="running statistics"):
            batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "eval")

    def test_running_stats_ema(self):
        rng = np.random.default_rng(9)
        state = BatchNormState(1)
        x1 = rng.normal(size=(2, 1, 2, 2))
        batch_norm(Tensor(x1), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "train")
        np.testing.assert_allclose(state.running_mean, x1.mean())
        x2 = rng.normal(size=(2, 1, 2, 2))
        batch_norm(Tensor(x2), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "train")
        np.testing.assert_allclose(state.running_mean, 0.9 * x1.mean() + 0.1 * x2.mean())


class TestElementwise:
    def test_relu_values(self):
        out = elementwise(Tensor(np.array([-2.0, 3.0])), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_logistic_at_zero(self):
        assert elementwise(Tensor(np.zeros(1)), "logistic").data[0] == 0.5

    def test_channel_broadcast_mul_matches_loop(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (4, 3, 2))
        s = rng.uniform(-1, 1, 4)
        out = elementwise(Tensor(x), "mul", y=Tensor(s))
        expect = np.empty_like(x)
        for c in range(4):
            for i in range(3):
                for j in range(2):
                    expect[c, i, j] = x[c, i, j] * s[c]
        np.testing.assert_allclose(out.data, expect, atol=1e-15)

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ValueError, match="incompatible"):
            elementwise(Tensor(np.zeros((3, 2, 2))), "add", y=Tensor(np.zeros(5)))


class TestBackward:
    def test_square_gradient(self):
        params = ParameterSet()
        x = params.add("x", np.array(3.0))
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            loss = x * x
        assert backward(rec, loss)["x"] == pytest.approx(6.0)

    def test_relu_dead_region(self):
        params = ParameterSet()
        x = params.add("x", -np.arange(1.0, 5.0))
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            loss = tsum(relu(x))
        np.testing.assert_array_equal(backward(rec, loss)["x"], 0.0)

    def test_three_layer_network_against_central_differences(self):
        rng = np.random.default_rng(21)
        params = ParameterSet()
        w1 = params.add("w1", rng.uniform(-1, 1, (4, 3)))
        w2 = params.add("w2", rng.uniform(-1, 1, (4, 4)))
        w3 = params.add("w3", rng.uniform(-1, 1, (1, 4)))
        x = Tensor(rng.uniform(-1, 1, 3))

        def forward():
            h1 = relu(matmul(w1, x))
            h2 = logistic(matmul(w2, h1))
            return tsum(matmul(w3, h2))

        err = finite_diff_check(forward, params.as_dict(), eps=1e-5)
        assert err < 1e-6

    def test_linearity_of_differentiation(self):
        rng = np.random.default_rng(2)
        xv = rng.uniform(-1, 1, 5)

        def grads_of(fn):
            params = ParameterSet()
            x = params.add("x", xv.copy())
            rec = ComputationRecord(params.as_dict())
            with recording(rec):
                loss = fn(x)
            return backward(rec, loss)["x"]

        g1 = grads_of(lambda x: tsum(x * x))
        g2 = grads_of(lambda x: tsum(logistic(x)))
        g12 = grads_of(lambda x: tsum(x * x) + tsum(logistic(x)))
        np.testing.assert_array_equal(g12, g1 + g2)

    def test_untouched_parameter_gets_zero_gradient(self):
        params = ParameterSet()
        x = params.add("x", np.array(2.0))
        params.add("unused", np.ones(3))
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            loss = x * x
        g = backward(rec, loss)
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        rec = ComputationRecord()
        with pytest.raises(ValueError, match="scalar"):
            backward(rec, Tensor(np.zeros(3)))

    def test_non_topological_record_rejected(self):
        params = ParameterSet()
        x = params.add("x", np.array(1.0))
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            a = x * 2.0
            b = a * 3.0
        rec.nodes.reverse()
        with pytest.raises(ValueError, match="topolog"):
            backward(rec, b)

    def test_reused_input_accumulates(self):
        params = ParameterSet()
        x = params.add("x", np.array(2.0))
        rec = ComputationRecord(params.as_dict())
        with recording(rec):
            y = x * 3.0
            loss = y * 5.0 + y * 7.0
        assert backward(rec, loss)["x"] == pytest.approx(36.0)


class TestOpGradients:
    """Central-difference checks for the remaining primitives."""

    def check(self, build, shapes, seed=0, tol=1e-6):
        rng = np.random.default_rng(seed)
        params = ParameterSet()
        tensors = [params.add(f"p{i}", rng.uniform(-1, 1, s)) for i, s in enumerate(shapes)]
        err = finite_diff_check(lambda: build(*tensors), params.as_dict(), eps=1e-5)
        assert err < tol, f"gradient error {err}"

    def test_broadcast_ops(self):
        self.check(lambda a, b: tsum((a + b) * (a - b) / (b + 3.0)), [(3, 4), (4,)])

    def test_sqrt(self):
        self.check(lambda a: tsum(sqrt(a * a + 0.5)), [(6,)])

    def test_reductions(self):
        self.check(lambda a: tsum(tmean(a, axis=1) * 2.0), [(3, 5)])
        self.check(lambda a: tsum(tsum(a, axis=0, keepdims=True)), [(3, 5)])

    def test_matmul_variants(self):
        self.check(lambda a, b: tsum(matmul(a, b)), [(3, 4), (4, 2)])
        self.check(lambda a, b: tsum(matmul(a, b)), [(3, 4), (4,)])
        self.check(lambda a, b: tsum(matmul(a, b)), [(4,), (4, 2)])
        self.check(lambda a, b: matmul(a, b), [(4,), (4,)])

    def test_shape_ops(self):
        self.check(lambda a: tsum(reshape(a, (6,)) * np.arange(6.0)), [(2, 3)])
        self.check(lambda a: tsum(transpose(a) * np.ones((3, 2))), [(2, 3)])
        self.check(lambda a: tsum(narrow(a, 1, 1, 2) * 2.0), [(3, 4)])
        self.check(lambda a, b: tsum(stack([a, b]) * 1.5), [(3,), (3,)])
        self.check(lambda a, b: tsum(concat([a, b], axis=0) * 2.0), [(2, 3), (1, 3)])

    def test_take_pairs(self):
        self.check(
            lambda a: tsum(take_pairs(a, [0, 1, 1], [2, 0, 0]) * np.array([1.0, 2.0, 3.0])),
            [(2, 3)],
        )

    def test_conv_and_pool(self):
        self.check(lambda x, w: tsum(conv2d(x, w, stride=1, pad=1)), [(2, 4, 4), (3, 2, 3, 3)], tol=1e-6)
        self.check(lambda x, w: tsum(conv2d(x, w, stride=2, pad=1) * 0.7), [(2, 5, 5), (2, 2, 3, 3)])
        self.check(lambda x: tsum(global_pool(x, "avg") * np.arange(3.0)), [(3, 4, 4)])
        self.check(lambda x: tsum(global_pool(x, "max") * np.arange(3.0)), [(3, 4, 4)])

    def test_batch_norm_train(self):
        # project with fixed random weights: a plain sum of BN outputs is
        # independent of x, which would leave only finite-difference noise
        coef = np.random.default_rng(99).uniform(-1, 1, (2, 3, 3, 3))

        def build(x, scale, shift):
            state = BatchNormState(3)
            return tsum(batch_norm(x, scale, shift, state, "train") * coef)

        self.check(build, [(2, 3, 3, 3), (3,), (3,)], tol=1e-5)

    def test_batch_norm_eval(self):
        state = BatchNormState(2)
        rng = np.random.default_rng(4)
        batch_norm(Tensor(rng.normal(size=(2, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")

        def build(x, scale, shift):
            return tsum(batch_norm(x, scale, shift, state, "eval"))

        self.check(build, [(2, 2, 3, 3), (2,), (2,)])

    def test_cross_entropy(self):
        labels = np.array([0, 2, 1])
        self.check(lambda lg: cross_entropy_sum(lg, labels), [(3, 4)])

    def test_logistic_exp_log(self):
        from pgga.tensor import exp, log

        self.check(lambda a: tsum(logistic(a) * 3.0), [(5,)])
        self.check(lambda a: tsum(exp(a * 0.5)), [(4,)])
        self.check(lambda a: tsum(log(a * a + 1.5)), [(4,)])


class TestCrossEntropy:
    def test_uniform_logits_give_log_n(self):
        logits = Tensor(np.zeros((2, 751)))
        loss = cross_entropy_sum(logits, np.array([3, 700]))
        assert loss.item() == pytest.approx(2 * np.log(751), abs=1e-9)

    def test_matches_direct_softmax_oracle(self):
        rng = np.random.default_rng(13)
        logits = rng.uniform(-2, 2, (2, 3))
        labels = np.array([1, 0])
        expect = 0.0
        for i in range(2):
            p = np.exp(logits[i]) / np.exp(logits[i]).sum()
            expect += -np.log(p[labels[i]])
        got = cross_entropy_sum(Tensor(logits), labels).item()
        assert abs(got - expect) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy_sum(Tensor(np.zeros((2, 3))), np.array([0, 3]))
