"""Network core: forward arithmetic, analytic gradients vs finite differences,
flat layout, and the double-backprop input gradient used by condensation."""

import numpy as np
import pytest

from permweld.errors import ValidationError
from permweld.nnet import (
    GradBundle,
    MlpParams,
    MlpSpec,
    cross_entropy,
    flatten,
    forward,
    grad_of_grad_distance,
    init_params,
    loss_and_grad,
    predict_accuracy,
    unflatten,
)

from conftest import draw_smooth_case, random_batch, random_params


def fd_param_grad(params, x, y, step=1e-3):
    """Central finite differences of the loss over every parameter entry.

    Runs entirely on a float64 shadow copy of the parameters; independent of
    the analytic backward pass.
    """
    flat = flatten(params).astype(np.float64)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        lu = _loss_f64(params.spec, up, x, y)
        ld = _loss_f64(params.spec, dn, x, y)
        grad[i] = (lu - ld) / (2 * step)
    return grad


def _loss_f64(spec, flat64, x, y):
    a = np.asarray(x, dtype=np.float64)
    pos = 0
    n_layers = spec.num_layers
    for k in range(n_layers):
        d_in, d_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
        w = flat64[pos: pos + d_out * d_in].reshape(d_out, d_in)
        pos += d_out * d_in
        z = a @ w.T
        if spec.use_bias:
            z = z + flat64[pos: pos + d_out]
            pos += d_out
        a = np.maximum(z, 0.0) if k < n_layers - 1 else z
    return cross_entropy(a, y)


def grad_to_flat(spec, bundle):
    parts = []
    for k in range(spec.num_layers):
        parts.append(np.asarray(bundle.d_weights[k], dtype=np.float64).ravel())
        if spec.use_bias:
            parts.append(np.asarray(bundle.d_biases[k], dtype=np.float64).ravel())
    return np.concatenate(parts)


class TestSpecAndInit:
    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            MlpSpec((5,))
        with pytest.raises(ValidationError):
            MlpSpec((5, 0, 2))
        with pytest.raises(ValidationError):
            MlpSpec((5, 3, 2), activation="tanh")

    def test_init_deterministic(self):
        spec = MlpSpec((6, 5, 3))
        a = init_params(spec, seed=123)
        b = init_params(spec, seed=123)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_init_seed_changes_weights(self):
        spec = MlpSpec((6, 5, 3))
        a = init_params(spec, seed=0)
        b = init_params(spec, seed=1)
        assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))

    def test_init_zero_bias(self):
        p = init_params(MlpSpec((2, 3, 2)), seed=5)
        assert np.array_equal(p.biases[0], np.zeros(3, dtype=np.float32))
        assert np.array_equal(p.biases[1], np.zeros(2, dtype=np.float32))

    def test_init_scale_tracks_fan_in(self):
        p = init_params(MlpSpec((100, 4, 2)), seed=9)
        assert np.abs(p.weights[0]).max() <= 1.0 / np.sqrt(100) + 1e-7

    def test_params_reject_bad_shapes(self):
        spec = MlpSpec((3, 2, 2))
        with pytest.raises(ValidationError):
            MlpParams(spec, (np.zeros((2, 3), np.float32),), ())
        with pytest.raises(ValidationError):
            MlpParams(
                spec,
                (np.zeros((2, 3), np.float32), np.full((2, 2), np.nan, np.float32)),
                (np.zeros(2, np.float32), np.zeros(2, np.float32)),
            )

    def test_params_arrays_immutable(self, small_params):
        with pytest.raises(ValueError):
            small_params.weights[0][0, 0] = 1.0


class TestForward:
    def test_zero_params_zero_logits(self):
        spec = MlpSpec((3, 4, 2))
        p = MlpParams(
            spec,
            tuple(np.zeros((spec.layer_sizes[k + 1], spec.layer_sizes[k]), np.float32)
                  for k in range(2)),
            tuple(np.zeros(spec.layer_sizes[k + 1], np.float32) for k in range(2)),
        )
        x = np.random.default_rng(0).uniform(size=(5, 3)).astype(np.float32)
        assert np.array_equal(forward(p, x), np.zeros((5, 2), np.float32))

    def test_hand_arithmetic_1d(self):
        spec = MlpSpec((1, 1, 1))
        p = MlpParams(
            spec,
            (np.array([[2.0]], np.float32), np.array([[3.0]], np.float32)),
            (np.array([1.0], np.float32), np.array([0.0], np.float32)),
        )
        assert forward(p, np.array([[1.0]], np.float32))[0, 0] == pytest.approx(9.0)
        # relu clips 2*(-1)+1 = -1 to 0
        assert forward(p, np.array([[-1.0]], np.float32))[0, 0] == pytest.approx(0.0)

    def test_shape_mismatch(self, small_params):
        with pytest.raises(ValidationError):
            forward(small_params, np.zeros((3, 5), np.float32))

    def test_deterministic(self, small_spec):
        p = random_params(small_spec, 3)
        x, _ = random_batch(small_spec, 16, 4)
        assert np.array_equal(forward(p, x), forward(p, x))


class TestLossAndGrad:
    def test_zero_params_loss_is_log_c(self):
        for c in (2, 5, 10):
            spec = MlpSpec((3, c))
            p = MlpParams(spec, (np.zeros((c, 3), np.float32),),
                          (np.zeros(c, np.float32),))
            x, y = random_batch(spec, 11, 1)
            g = loss_and_grad(p, x, y)
            assert g.loss == pytest.approx(np.log(c), abs=1e-6)

    def test_label_out_of_range(self, small_params):
        x, _ = random_batch(small_params.spec, 4, 0)
        with pytest.raises(ValidationError):
            loss_and_grad(small_params, x, np.array([0, 1, 2, 0]))

    def test_duplicated_rows_same_loss_and_grad(self, small_spec):
        p = random_params(small_spec, 11)
        x, y = random_batch(small_spec, 6, 12)
        g1 = loss_and_grad(p, x, y, dtype=np.float64)
        g2 = loss_and_grad(p, np.vstack([x, x]), np.concatenate([y, y]),
                           dtype=np.float64)
        assert g1.loss == pytest.approx(g2.loss, rel=1e-12)
        for a, b in zip(g1.d_weights, g2.d_weights):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec, p, x, y = draw_smooth_case(rng)
        analytic = grad_to_flat(spec, loss_and_grad(p, x, y, dtype=np.float64))
        fd = fd_param_grad(p, x, y)
        denom = max(float(np.abs(fd).max()), 1e-12)
        assert float(np.abs(analytic - fd).max()) / denom <= 1e-4

    def test_float32_path_close_to_float64(self, small_spec):
        p = random_params(small_spec, 21)
        x, y = random_batch(small_spec, 32, 22)
        g32 = grad_to_flat(small_spec, loss_and_grad(p, x, y))
        g64 = grad_to_flat(small_spec, loss_and_grad(p, x, y, dtype=np.float64))
        denom = max(float(np.abs(g64).max()), 1e-12)
        assert float(np.abs(g32 - g64).max()) / denom <= 1e-4


class TestFlatten:
    def test_round_trip_bit_exact(self, small_spec):
        p = random_params(small_spec, 31)
        q = unflatten(small_spec, flatten(p))
        for a, b in zip(p.weights, q.weights):
            assert np.array_equal(a, b)
        for a, b in zip(p.biases, q.biases):
            assert np.array_equal(a, b)

    def test_flat_length_formula(self):
        spec = MlpSpec((784, 512, 512, 512, 10))
        assert spec.flat_size == 932362
        assert flatten(init_params(spec, 0)).shape == (932362,)

    def test_unflatten_length_mismatch(self, small_spec):
        with pytest.raises(ValidationError):
            unflatten(small_spec, np.zeros(small_spec.flat_size + 1, np.float32))

    def test_l2_on_flats_equals_layer_frobenius_sum(self, small_spec):
        a = random_params(small_spec, 41)
        b = random_params(small_spec, 42)
        flat_sq = float(np.sum((flatten(a).astype(np.float64)
                                - flatten(b).astype(np.float64)) ** 2))
        layer_sq = sum(
            float(np.sum((wa.astype(np.float64) - wb.astype(np.float64)) ** 2))
            for wa, wb in zip(a.weights + a.biases, b.weights + b.biases)
        )
        assert flat_sq == pytest.approx(layer_sq, rel=1e-12)


class TestPredictAccuracy:
    def test_zero_params_balanced_ties_to_class_zero(self):
        from permweld.data import Dataset

        rng = np.random.default_rng(0)
        feats = rng.uniform(size=(100, 4)).astype(np.float32)
        labels = np.repeat(np.arange(10), 10)
        ds = Dataset("balanced", feats, labels, 10)
        spec = MlpSpec((4, 10))
        p = MlpParams(spec, (np.zeros((10, 4), np.float32),),
                      (np.zeros(10, np.float32),))
        assert predict_accuracy(p, ds) == pytest.approx(0.1)

    def test_empty_dataset_rejected(self, small_params):
        class Empty:
            features = np.zeros((0, 4), np.float32)
            labels = np.zeros(0, np.int64)
            num_classes = 2

        with pytest.raises(ValidationError):
            predict_accuracy(small_params, Empty())


class TestGradOfGradDistance:
    def _real_grad(self, spec, seed):
        p = random_params(spec, seed)
        x, y = random_batch(spec, 5, seed + 1)
        return loss_and_grad(p, x, y, dtype=np.float64)

    def test_zero_at_matching_gradients(self):
        spec = MlpSpec((4, 3, 2))
        p = random_params(spec, 50)
        x, y = random_batch(spec, 4, 51)
        real = loss_and_grad(p, x, y, dtype=np.float64)
        g = grad_of_grad_distance(p, x, y, real, dtype=np.float64)
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_scale_invariance_of_reference(self):
        spec = MlpSpec((4, 3, 2))
        p = random_params(spec, 60)
        x, y = random_batch(spec, 3, 61)
        real = self._real_grad(spec, 62)
        doubled = GradBundle(
            tuple(2.0 * w for w in real.d_weights),
            tuple(2.0 * b for b in real.d_biases),
            real.loss,
        )
        g1 = grad_of_grad_distance(p, x, y, real, dtype=np.float64)
        g2 = grad_of_grad_distance(p, x, y, doubled, dtype=np.float64)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed + 3000)
        spec, p, x, y = draw_smooth_case(rng, batch_max=4)
        real = self._real_grad(spec, seed + 90)

        analytic = grad_of_grad_distance(p, x, y, real, dtype=np.float64)
        fd = self._fd_pixel_grad(p, x, y, real)
        denom = max(float(np.abs(fd).max()), 1e-12)
        assert float(np.abs(analytic - fd).max()) / denom <= 1e-3

    def _fd_pixel_grad(self, params, x, y, real, step=1e-4):
        from permweld.condense import gradient_distance

        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            up, dn = x.copy(), x.copy()
            up[idx] += step
            dn[idx] -= step
            du = gradient_distance(loss_and_grad(params, up, y, dtype=np.float64), real)
            dd = gradient_distance(loss_and_grad(params, dn, y, dtype=np.float64), real)
            out[idx] = (du - dd) / (2 * step)
        return out

    def test_nan_batch_rejected(self, small_params):
        x, y = random_batch(small_params.spec, 3, 0)
        x = x.copy()
        x[0, 0] = np.nan
        real = loss_and_grad(small_params, np.abs(x[1:]), y[1:])
        with pytest.raises(ValidationError):
            grad_of_grad_distance(small_params, x, y, real)


class TestGradientCorrectnessSweep:
    def test_many_random_small_nets(self):
        """Analytic vs central differences across 100 random draws."""
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            spec, p, x, y = draw_smooth_case(rng)
            analytic = grad_to_flat(spec, loss_and_grad(p, x, y, dtype=np.float64))
            fd = fd_param_grad(p, x, y)
            denom = max(float(np.abs(fd).max()), 1e-12)
            worst = max(worst, float(np.abs(analytic - fd).max()) / denom)
        assert worst <= 1e-4
