import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertmix import tensor as T
from oracles import central_diff, max_rel_err, naive_conv2d, naive_fully_connected, naive_maxpool


def rand_params(name, w_shape, b_shape, rng, scale=0.4, frozen=False):
    return T.LayerParams(name, rng.standard_normal(w_shape) * scale, rng.standard_normal(b_shape) * scale, frozen)


class TestConv2d:
    def test_ge_first_layer_geometry(self):
        rng = np.random.default_rng(0)
        params = rand_params("c", (5, 5, 1, 20), (20,), rng)
        out = T.conv2d(rng.random((28, 28, 1)), params)
        assert out.shape == (24, 24, 20)
        pooled, _ = T.maxpool(out, 2, 2)
        assert pooled.shape == (12, 12, 20)

    def test_zero_weights_give_constant_bias(self):
        bias = np.array([0.5, -1.25])
        params = T.LayerParams("c", np.zeros((3, 3, 2, 2)), bias)
        out = T.conv2d(np.random.default_rng(1).random((6, 6, 2)), params)
        assert np.array_equal(out[:, :, 0], np.full((4, 4), 0.5))
        assert np.array_equal(out[:, :, 1], np.full((4, 4), -1.25))

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        params = rand_params("c", (3, 3, 2, 2), (2,), rng)
        x = rng.standard_normal((6, 6, 2))
        assert np.array_equal(T.conv2d(x, params), naive_conv2d(x, params.weights, params.biases))

    def test_oracle_exact_on_random_geometries(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            h, w = rng.integers(3, 9, 2)
            cin, cout = rng.integers(1, 4, 2)
            k = int(rng.integers(2, min(h, w) + 1))
            params = rand_params("c", (k, k, cin, cout), (cout,), rng, scale=1.0)
            x = rng.standard_normal((h, w, cin))
            assert np.array_equal(T.conv2d(x, params), naive_conv2d(x, params.weights, params.biases))

    def test_batch_path_identical_to_single(self):
        rng = np.random.default_rng(4)
        params = rand_params("c", (3, 3, 2, 4), (4,), rng)
        xs = rng.standard_normal((5, 7, 7, 2))
        batched = T.conv2d(xs, params)
        for i in range(5):
            assert np.array_equal(batched[i], T.conv2d(xs[i], params))

    def test_shape_errors_name_dimensions(self):
        rng = np.random.default_rng(5)
        params = rand_params("c", (5, 5, 3, 2), (2,), rng)
        with pytest.raises(T.ShapeError, match="3"):
            T.conv2d(rng.random((8, 8, 1)), params)
        with pytest.raises(T.ShapeError, match="kernel 5"):
            T.conv2d(rng.random((4, 4, 3)), params)


class TestMaxpool:
    def test_tap_subsampling_geometries(self):
        x = np.random.default_rng(0).random((12, 12, 20))
        out, _ = T.maxpool(x, 4, 4)
        assert out.shape == (3, 3, 20)
        out, _ = T.maxpool(x, 12, 12)
        assert out.shape == (1, 1, 20)

    def test_unit_window_is_identity(self):
        x = np.random.default_rng(1).random((5, 5, 3))
        out, _ = T.maxpool(x, 1, 1)
        assert np.array_equal(out, x)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            h = int(rng.integers(2, 9))
            c = int(rng.integers(1, 4))
            window = int(rng.choice([w for w in (1, 2, 3, 4) if h >= w and (h - w) % w == 0]))
            x = rng.standard_normal((h, h, c))
            out, _ = T.maxpool(x, window)
            assert np.array_equal(out, naive_maxpool(x, window))

    def test_bad_geometry_raises(self):
        with pytest.raises(T.ShapeError, match="window 5"):
            T.maxpool(np.zeros((12, 12, 1)), 5, 5)

    @settings(max_examples=30, deadline=None, derandomize=True)
    @given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]), st.sampled_from([2, 4, 6]))
    def test_backward_routes_every_gradient_once(self, seed, c, window):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((12, 12, c))
        tape = T.Tape()
        out, _ = T.maxpool(x, window, window, tape)
        g = rng.standard_normal(out.shape)
        dx = tape.entries[-1].backward_fn(g)[0]
        assert np.isclose(dx.sum(), g.sum())
        assert np.count_nonzero(dx) <= g.size


class TestFullyConnected:
    def test_fan_in_180_to_62_weight_elements(self):
        rng = np.random.default_rng(0)
        params = rand_params("fc", (180, 62), (62,), rng)
        assert params.weights.size == 11160
        out = T.fully_connected(rng.random((3, 3, 20)), params)
        assert out.shape == (62,)

    def test_identity_weights(self):
        params = T.LayerParams("fc", np.eye(7), np.zeros(7))
        x = np.random.default_rng(1).random(7)
        assert np.array_equal(T.fully_connected(x, params), x)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        params = rand_params("fc", (5, 3), (3,), rng, scale=1.0)
        x = rng.standard_normal(5)
        assert np.array_equal(T.fully_connected(x, params), naive_fully_connected(x, params.weights, params.biases))

    def test_dimension_mismatch(self):
        params = T.LayerParams("fc", np.zeros((6, 2)), np.zeros(2))
        with pytest.raises(T.ShapeError, match="expect 6"):
            T.fully_connected(np.zeros(5), params)
        with pytest.raises(T.ShapeError, match="fan-in 6"):
            T.fully_connected(np.zeros((5, 1)), params)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_62_classes(self):
        loss, probs = T.softmax_cross_entropy(np.zeros(62), 17)
        assert loss == pytest.approx(math.log(62), abs=1e-12)
        assert abs(probs.sum() - 1.0) < 1e-9

    def test_saturated_case(self):
        loss, _ = T.softmax_cross_entropy(np.array([10.0, -10.0]), 0)
        assert loss < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label 5"):
            T.softmax_cross_entropy(np.zeros(3), 5)

    def test_needs_two_classes_and_finite_logits(self):
        with pytest.raises(T.ShapeError):
            T.softmax_cross_entropy(np.zeros(1), 0)
        with pytest.raises(ValueError, match="non-finite"):
            T.softmax_cross_entropy(np.array([np.inf, 0.0]), 0)

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(9)
        tape = T.Tape()
        T.softmax_cross_entropy(logits, 4, tape)
        dl = tape.entries[-1].backward_fn(1.0)[0]
        num = central_diff(lambda: T.softmax_cross_entropy(logits, 4)[0], logits)
        assert max_rel_err(dl, num) < 1e-6

    @settings(max_examples=25, deadline=None, derandomize=True)
    @given(st.integers(0, 10_000))
    def test_probabilities_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        _, probs = T.softmax_cross_entropy(rng.standard_normal(12) * 5, 0)
        assert abs(probs.sum() - 1.0) < 1e-9


class TestBackward:
    def test_single_fc_weight_gradient_is_outer_product(self):
        rng = np.random.default_rng(0)
        params = rand_params("fc", (6, 4), (4,), rng)
        x = rng.standard_normal(6)
        tape = T.Tape()
        T.fully_connected(x, params, tape)
        g = rng.standard_normal(4)
        res = T.backward(tape, g)
        assert np.allclose(res.grads["fc"].weights, np.outer(x, g))
        assert np.allclose(res.grads["fc"].biases, g)

    def test_frozen_layer_absent_from_gradient_set(self):
        rng = np.random.default_rng(1)
        conv = rand_params("conv", (3, 3, 1, 2), (2,), rng, frozen=True)
        fc = rand_params("fc", (8, 3), (3,), rng)
        tape = T.Tape()
        h = T.conv2d(rng.random((4, 4, 1)), conv, 1, tape)
        logits = T.fully_connected(h, fc, tape)
        T.softmax_cross_entropy(logits, 1, tape)
        res = T.backward(tape)
        assert set(res.grads) == {"fc"}

    def test_backward_without_forward_raises(self):
        with pytest.raises(RuntimeError, match="forward"):
            T.backward(T.Tape())

    def test_le_stack_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        fc = rand_params("fc", (20, 5), (5,), rng)
        x = rng.standard_normal((4, 4, 5))

        def run(tape=None):
            pooled, _ = T.maxpool(x, 2, 2, tape)
            logits = T.fully_connected(pooled, fc, tape)
            return T.softmax_cross_entropy(logits, 3, tape)[0]

        tape = T.Tape()
        run(tape)
        res = T.backward(tape)
        for arr, grad in ((fc.weights, res.grads["fc"].weights), (fc.biases, res.grads["fc"].biases)):
            assert max_rel_err(grad, central_diff(lambda: run(), arr)) < 1e-4
        assert max_rel_err(res.wrt_input, central_diff(lambda: run(), x)) < 1e-4

    @pytest.mark.parametrize("kind", ["conv", "fc", "relu", "pool"])
    def test_every_layer_kind_checks_against_finite_differences(self, kind):
        rng = np.random.default_rng(abs(hash(kind)) % 2**32)
        x = rng.standard_normal((6, 6, 2))
        x[np.abs(x) < 0.05] += 0.1  # keep relu/pool away from their kinks
        conv = rand_params("conv", (3, 3, 2, 3), (3,), rng)
        fc = rand_params("fc", (72, 4), (4,), rng, scale=0.2)
        mid_size = {"conv": 4 * 4 * 3, "relu": 72, "pool": 3 * 3 * 2}.get(kind, 0)
        head = rand_params("head", (mid_size, 3), (3,), rng, scale=0.2) if mid_size else None

        def run(tape=None):
            if kind == "conv":
                h = T.conv2d(x, conv, 1, tape)
            elif kind == "relu":
                h = T.relu(x, tape)
            elif kind == "pool":
                h, _ = T.maxpool(x, 2, 2, tape)
            else:
                h = None
            logits = T.fully_connected(x, fc, tape) if kind == "fc" else T.fully_connected(h, head, tape)
            return T.softmax_cross_entropy(logits, 1, tape)[0]

        tape = T.Tape()
        run(tape)
        res = T.backward(tape)
        targets = [(x, res.wrt_input)]
        if kind == "conv":
            targets += [(conv.weights, res.grads["conv"].weights), (conv.biases, res.grads["conv"].biases)]
        if kind == "fc":
            targets += [(fc.weights, res.grads["fc"].weights), (fc.biases, res.grads["fc"].biases)]
        for arr, grad in targets:
            assert max_rel_err(grad, central_diff(lambda: run(), arr)) < 1e-4


class TestSgd:
    def test_unit_rate_zero_momentum_zeroes_weights(self):
        params = T.LayerParams("p", np.array([[2.0, -3.0]]), np.array([1.0]))
        grads = T.ParamGrads(params.weights.copy(), params.biases.copy())
        T.sgd_step(params, grads, learning_rate=1.0, momentum=0.0)
        assert np.array_equal(params.weights, np.zeros((1, 2)))
        assert np.array_equal(params.biases, np.zeros(1))

    def test_zero_momentum_steps_compose_linearly(self):
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal((3, 3))
        g1, g2 = rng.standard_normal((2, 3, 3))
        a = T.LayerParams("a", w0.copy(), np.zeros(3))
        T.sgd_step(a, T.ParamGrads(g1, np.zeros(3)), 0.1, 0.0)
        T.sgd_step(a, T.ParamGrads(g2, np.zeros(3)), 0.1, 0.0)
        b = T.LayerParams("b", w0.copy(), np.zeros(3))
        T.sgd_step(b, T.ParamGrads(g1 + g2, np.zeros(3)), 0.1, 0.0)
        assert np.allclose(a.weights, b.weights)

    def test_quadratic_loss_decreases_monotonically(self):
        params = T.LayerParams("q", np.array([[3.0, -2.0]]), np.zeros(1))
        losses = []
        state = {}
        for _ in range(25):
            losses.append(float((params.weights**2).sum()))
            state = T.sgd_step(params, T.ParamGrads(2 * params.weights, np.zeros(1)), 0.05, 0.0, state)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_frozen_target_rejected(self):
        params = T.LayerParams("f", np.ones((2, 2)), np.zeros(2), frozen=True)
        with pytest.raises(T.FrozenParamsError, match="'f'"):
            T.sgd_step(params, T.ParamGrads(np.ones((2, 2)), np.zeros(2)), 0.1)

    def test_shape_mismatch_rejected(self):
        params = T.LayerParams("p", np.ones((2, 2)), np.zeros(2))
        with pytest.raises(T.ShapeError):
            T.sgd_step(params, T.ParamGrads(np.ones((3, 2)), np.zeros(2)), 0.1)


class TestInvariants:
    @settings(max_examples=20, deadline=None, derandomize=True)
    @given(st.integers(0, 10_000))
    def test_finite_inputs_give_finite_outputs(self, seed):
        rng = np.random.default_rng(seed)
        conv = rand_params("c", (3, 3, 1, 4), (4,), rng)
        fc = rand_params("f", (4 * 2 * 2, 5), (5,), rng)
        x = rng.standard_normal((6, 6, 1)) * 10
        h = T.conv2d(x, conv)
        h = T.relu(h)
        h, _ = T.maxpool(h, 2, 2)
        out = T.fully_connected(h, fc)
        assert np.isfinite(out).all()

    def test_frozen_weights_bit_identical_through_training(self):
        rng = np.random.default_rng(9)
        frozen = rand_params("frozen", (3, 3, 1, 2), (2,), rng, frozen=True)
        head = rand_params("head", (2 * 2 * 2, 3), (3,), rng)
        before_w = frozen.weights.tobytes()
        before_b = frozen.biases.tobytes()
        opt = T.Sgd(0.05, 0.9)
        for step in range(10):
            tape = T.Tape()
            h = T.conv2d(rng.random((4, 4, 1)), frozen, 1, tape)
            h, _ = T.maxpool(h, 1, 1, tape)
            logits = T.fully_connected(h, head, tape)
            T.softmax_cross_entropy(logits, step % 3, tape)
            res = T.backward(tape)
            assert "frozen" not in res.grads
            opt.step(head, res.grads["head"])
        assert frozen.weights.tobytes() == before_w
        assert frozen.biases.tobytes() == before_b
