import math
import numpy as np
import pytest
from models import nnprims as nn
from models.layers import Conv2d
from models.nnprims import ParamStore, Tensor, count_params, grad_check, init_random
from utils.errors import (InvalidParameterError, MissingGradientError, NonDeterministicComputationError,
                          NonFiniteError, ShapeError)
from utils.rng import RngStream


def _store(**shapes) -> ParamStore:
    """float64 store with one fan-in initialized entry per keyword"""
    store = ParamStore(dtype=np.float64)
    for name, shape in shapes.items():
        store.add(name, shape, fan_in=max(1, int(np.prod(shape[1:]))) if len(shape) > 1 else 4)
    init_random(store, RngStream(99))
    return store


def _direction(shape, seed=0):
    return np.random.default_rng(seed).uniform(0.5, 1.5, size=shape)


class TestConvolution:
    """Test suite for conv2d forward values and parameter counting"""

    def test_identity_kernel(self):
        """Test a 1x1 identity kernel with zero bias returns the input"""
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = nn.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_kernel(self):
        """Test 3x3 ones over 4x4 ones with padding 1: center 9, corner 4"""
        x = Tensor(np.ones((1, 1, 4, 4)))
        out = nn.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        assert out.shape == (4, 4)
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4
        assert out[0, 1] == 6

    def test_output_size_with_stride(self):
        """Test floor((H + 2p - k)/s) + 1 spatial dims"""
        out = nn.conv2d(Tensor(np.zeros((2, 3, 9, 7))), Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 5, 4)

    def test_incompatible_channels(self):
        """Test mismatched input channels raise a shape error"""
        with pytest.raises(ShapeError):
            nn.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_param_count(self):
        """Test a k=3, 1->8 convolution with bias has 80 parameters"""
        store = ParamStore()
        Conv2d(store, "conv", 1, 8)
        assert count_params(store) == 80
        assert count_params(ParamStore()) == 0

    def test_inputs_not_mutated(self):
        """Test ops leave their inputs untouched"""
        data = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
        x = Tensor(data.copy())
        nn.conv2d(x, Tensor(np.ones((2, 2, 3, 3))), padding=1)
        nn.relu(x)
        nn.max_pool2d(x)
        np.testing.assert_array_equal(x.data, data)


class TestInitialization:
    """Test suite for fan-in scaled random initialization"""

    def test_weight_bound(self):
        """Test |w| <= sqrt(6/144) for a 3x3 conv with 16 inputs and zero biases"""
        store = ParamStore()
        Conv2d(store, "conv", 16, 8)
        init_random(store, RngStream(3))
        weights = store["conv.weight"].value
        assert np.max(np.abs(weights)) <= math.sqrt(6.0 / 144.0) + 1e-7
        assert np.max(np.abs(weights)) > 0.15
        assert np.all(store["conv.bias"].value == 0)

    def test_same_stream_same_values(self):
        """Test identical streams produce bit-identical stores"""
        first, second = ParamStore(), ParamStore()
        for store in (first, second):
            Conv2d(store, "a", 2, 4)
            Conv2d(store, "b", 4, 4)
            init_random(store, RngStream(5, [1]))
        for name in first.names():
            np.testing.assert_array_equal(first[name].value, second[name].value)

    def test_different_streams_differ(self):
        """Test other split indices give other weights"""
        first, second = ParamStore(), ParamStore()
        for store, path in ((first, [1]), (second, [2])):
            Conv2d(store, "a", 2, 4)
            init_random(store, RngStream(5, path))
        assert not np.array_equal(first["a.weight"].value, second["a.weight"].value)

    def test_duplicate_name(self):
        """Test adding the same name twice fails"""
        store = ParamStore()
        store.add("w", (2,))
        with pytest.raises(ValueError):
            store.add("w", (2,))


class TestGradCheck:
    """Test suite for finite-difference verification of every primitive"""

    def test_linear_function_exact(self):
        """Test w.x has analytic gradient equal to finite differences"""
        store = _store(w=(1, 1, 3, 3))
        direction = _direction((1, 1, 3, 3))
        report = grad_check(lambda s: nn.project(s.leaf("w"), direction), store, eps=1e-3, tol=1e-10)
        assert report.passed, report.errors

    def test_sigmoid_derivative_at_zero(self):
        """Test d sigmoid / dx at 0 is 0.25"""
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        nn.sigmoid(x).backward()
        assert x.grad[0, 0, 0, 0] == pytest.approx(0.25)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d(self, stride, padding):
        store = _store(x=(2, 2, 6, 6), w=(3, 2, 3, 3), b=(3,))
        out_shape = nn.conv2d(store.leaf("x"), store.leaf("w"), store.leaf("b"), stride, padding).shape

        def f(s):
            return nn.project(nn.conv2d(s.leaf("x"), s.leaf("w"), s.leaf("b"), stride, padding),
                              _direction(out_shape))
        assert grad_check(f, store).passed

    def test_depthwise_conv2d(self):
        store = _store(x=(1, 3, 6, 6), w=(3, 1, 3, 3))

        def f(s):
            out = nn.depthwise_conv2d(s.leaf("x"), s.leaf("w"), stride=2, padding=1)
            return nn.project(out, _direction(out.shape))
        assert grad_check(f, store).passed

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, training):
        store = _store(x=(3, 2, 4, 4), gamma=(2,), beta=(2,))
        running_mean, running_var = np.zeros(2), np.ones(2)

        def f(s):
            out = nn.batch_norm(s.leaf("x"), s.leaf("gamma"), s.leaf("beta"), running_mean.copy(),
                                running_var.copy(), training)
            return nn.project(out, _direction(out.shape))
        assert grad_check(f, store).passed

    def test_relu_and_max_pool_frozen(self):
        """Test piecewise ops check cleanly under a frozen activation pattern"""
        store = _store(x=(2, 2, 8, 8))

        def loss(s, pattern):
            out = nn.max_pool2d(nn.relu(s.leaf("x"), pattern), pattern)
            return nn.project(out, _direction(out.shape))
        assert grad_check(nn.freeze_activations(loss), store).passed

    @pytest.mark.parametrize("op,size", [(nn.avg_pool2d, (3, 3)), (nn.avg_pool2d, (1, 1)),
                                         (nn.bilinear_resize, (8, 8)), (nn.bilinear_resize, (3, 5))])
    def test_resampling(self, op, size):
        store = _store(x=(1, 2, 6, 6))

        def f(s):
            out = op(s.leaf("x"), size)
            return nn.project(out, _direction(out.shape))
        assert grad_check(f, store).passed

    def test_upsample_sigmoid_add_concat(self):
        store = _store(a=(1, 2, 4, 4), b=(1, 2, 4, 4))

        def f(s):
            merged = nn.channel_concat([nn.add(s.leaf("a"), s.leaf("b")), nn.sigmoid(s.leaf("a"))])
            out = nn.upsample_nearest2x(merged)
            return nn.project(out, _direction(out.shape))
        assert grad_check(f, store).passed

    def test_dropout_with_fixed_mask(self):
        store = _store(x=(1, 2, 4, 4))

        def f(s):
            out = nn.dropout(s.leaf("x"), 0.2, np.random.default_rng(4))
            return nn.project(out, _direction(out.shape))
        assert grad_check(f, store).passed

    def test_requires_wide_precision(self):
        store = ParamStore(dtype=np.float32)
        store.add("w", (2,))
        with pytest.raises(InvalidParameterError):
            grad_check(lambda s: nn.project(s.leaf("w"), np.ones(2)), store)

    def test_detects_nondeterminism(self):
        store = _store(w=(1, 4))
        sampler = np.random.default_rng()
        with pytest.raises(NonDeterministicComputationError):
            grad_check(lambda s: nn.project(s.leaf("w"), sampler.random((1, 4))), store)

    def test_report_names_worst_tensor(self):
        """Test a deliberately wrong backward fails on the right tensor"""
        store = _store(good=(1, 3), bad=(1, 3))

        def f(s):
            bad = s.leaf("bad")
            doubled = nn.make_op(bad.data * 2.0, (bad,), lambda g: (g,), "wrong_double")
            return nn.add(nn.project(s.leaf("good"), np.ones((1, 3))), nn.project(doubled, np.ones((1, 3))))
        report = grad_check(f, store)
        assert not report.passed
        assert report.worst() == "bad"
        assert report.errors["good"] < 1e-8

    def test_small_wrong_gradient_reported_unfloored(self):
        """Test a gradient off by 2x at magnitude 1e-9 shows in raw_errors and fails without the floor"""
        store = _store(w=(1, 3))
        scale = np.full((1, 3), 1e-9)

        def f(s):
            w = s.leaf("w")
            return nn.project(nn.make_op(w.data * 2.0, (w,), lambda g: (g,), "wrong_double"), scale)
        floored = grad_check(f, store)
        assert floored.passed
        assert floored.raw_errors["w"] == pytest.approx(0.5, rel=1e-3)
        assert floored.max_raw_error > floored.tol
        assert not grad_check(f, store, scale_floor=0.0).passed

    def test_correct_gradient_small_raw_error(self):
        store = _store(w=(1, 1, 3, 3))
        report = grad_check(lambda s: nn.project(s.leaf("w"), _direction((1, 1, 3, 3))), store, eps=1e-3)
        assert report.max_raw_error < 1e-8


class TestPrimitiveProperties:
    """Test suite for forward-mode properties of the primitives"""

    def test_batch_norm_training_statistics(self):
        """Test train-mode output has per-channel mean 0 and variance 1"""
        x = Tensor(np.random.default_rng(2).normal(3.0, 2.5, size=(4, 3, 5, 5)))
        running_mean, running_var = np.zeros(3), np.ones(3)
        out = nn.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), running_mean, running_var, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
        assert np.all(running_mean != 0)

    def test_batch_norm_eval_is_affine(self):
        """Test eval mode uses running statistics and leaves them unchanged"""
        x = Tensor(np.random.default_rng(2).normal(size=(2, 2, 3, 3)))
        running_mean, running_var = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = nn.batch_norm(x, Tensor(np.full(2, 2.0)), Tensor(np.full(2, 0.5)), running_mean, running_var,
                            False, eps=0.0).data
        expected = 2.0 * (x.data - running_mean[None, :, None, None]) / np.sqrt(running_var)[None, :, None, None] + 0.5
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_array_equal(running_mean, [1.0, -1.0])

    def test_upsample_inverts_pool_on_constants(self):
        x = Tensor(np.full((1, 2, 8, 8), 3.5))
        np.testing.assert_array_equal(nn.upsample_nearest2x(nn.max_pool2d(x)).data, x.data)

    def test_max_pool_needs_even_dims(self):
        with pytest.raises(ShapeError):
            nn.max_pool2d(Tensor(np.zeros((1, 1, 5, 4))))

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        assert nn.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_keeps_expectation(self):
        """Test inverted scaling keeps the mean near the input"""
        out = nn.dropout(Tensor(np.ones((1, 1, 200, 200))), 0.2, np.random.default_rng(0)).data
        assert out.mean() == pytest.approx(1.0, abs=0.02)
        assert np.all(np.isclose(out, 0.0) | np.isclose(out, 1.25))

    def test_adaptive_pool_matrix_rows_average(self):
        matrix = nn.adaptive_pool_matrix(7, 3)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)

    def test_bilinear_matrix_constant(self):
        """Test bilinear resampling keeps constants"""
        np.testing.assert_allclose(nn.bilinear_matrix(5, 12) @ np.full(5, 2.0), 2.0)

    def test_debug_mode_flags_non_finite(self):
        nn.set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                nn.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))
        finally:
            nn.set_debug(False)

    def test_missing_gradients(self):
        store = ParamStore()
        store.add("w", (2,))
        with pytest.raises(MissingGradientError):
            nn.require_gradients(store)

    def test_state_round_trip(self):
        store = _store(w=(2, 3))
        state = store.state()
        store["w"].value[...] = 0
        store.load_state(state)
        np.testing.assert_array_equal(store["w"].value, state["w"])
