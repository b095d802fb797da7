import numpy as np
from django.test import SimpleTestCase

from lab.exceptions import DataFormatError, NonFiniteParamsError, PreconditionError, ShapeError
from networks.checkpoint import decode_params, encode_params
from networks.gradcheck import central_difference, max_relative_error
from networks.mlp import (
    HeadKind,
    MlpSpec,
    ParamVector,
    backward,
    forward,
    init_params,
    num_params,
)


def _well_conditioned(spec, rng, batch):
    """Random params and inputs whose hidden pre-activations stay away from the ReLU kink."""
    while True:
        params = init_params(spec, rng)
        params = params.with_values(params.values + 0.1 * rng.standard_normal(len(params)))
        x = rng.standard_normal((batch, spec.input_width))
        _, trace = forward(spec, params, x)
        hidden = trace.pre_activations[:-1]
        if all(np.min(np.abs(z)) > 1e-3 for z in hidden):
            return params, x


class ParamCountTests(SimpleTestCase):
    """Parameter counts with and without biases"""

    def test_counts(self):
        """Test parameter counts with biases"""
        self.assertEqual(num_params(MlpSpec((2, 10, 2))), 52)
        self.assertEqual(num_params(MlpSpec((2, 10, 10, 2))), 152)
        self.assertEqual(num_params(MlpSpec((1, 1), HeadKind.MEAN_ONLY)), 2)

    def test_weights_only_counts(self):
        """Test parameter counts without biases"""
        self.assertEqual(num_params(MlpSpec((2, 10, 2)), include_biases=False), 40)
        self.assertEqual(num_params(MlpSpec((2, 10, 10, 2)), include_biases=False), 140)
        self.assertEqual(num_params(MlpSpec((2, 100, 2)), include_biases=False), 400)

    def test_invalid_specs_rejected(self):
        """Test that malformed layer specs are rejected"""
        with self.assertRaises(ShapeError):
            MlpSpec((3,))
        with self.assertRaises(ShapeError):
            MlpSpec((1, 10, 2), HeadKind.MEAN_ONLY)
        with self.assertRaises(ShapeError):
            MlpSpec((1, 10, 1), HeadKind.MEAN_LOGVAR)
        with self.assertRaises(ShapeError):
            MlpSpec((2, 0, 2))


class InitParamsTests(SimpleTestCase):
    """Test parameter initialisation"""

    def test_zero_scale_rejected(self):
        """Test that a zero initialisation scale is rejected"""
        with self.assertRaises(PreconditionError):
            init_params(MlpSpec((2, 10, 2)), np.random.default_rng(0), scale=0.0)

    def test_layout_and_zero_biases(self):
        """Test the flat layout and zero initial biases"""
        params = init_params(MlpSpec((2, 10, 2)), np.random.default_rng(3))
        self.assertEqual(len(params), 52)
        for _, bias in params.layers():
            self.assertTrue(np.all(bias == 0.0))

    def test_deterministic_given_seed(self):
        """Test that initialisation is fixed by the seed"""
        spec = MlpSpec((2, 10, 2))
        first = init_params(spec, np.random.default_rng(11))
        second = init_params(spec, np.random.default_rng(11))
        self.assertEqual(first.values.tobytes(), second.values.tobytes())

    def test_weight_variance_follows_fan_in(self):
        """Test that weight variance is scale^2 / fan_in"""
        spec = MlpSpec((400, 300, 1), HeadKind.MEAN_ONLY)
        weights, _ = init_params(spec, np.random.default_rng(0), scale=1.0).layers()[0]
        self.assertAlmostEqual(weights.var(), 1.0 / 400, delta=0.05 / 400)


class ForwardTests(SimpleTestCase):
    """Test the forward pass"""

    def test_zero_network_outputs_zero(self):
        """Test that an all-zero network outputs zero"""
        spec = MlpSpec((3, 5, 4))
        outputs, _ = forward(spec, ParamVector.zeros(spec), np.random.default_rng(0).normal(size=(6, 3)))
        self.assertTrue(np.all(outputs == 0.0))

    def test_single_linear_layer_identity(self):
        """Test an identity linear layer"""
        spec = MlpSpec((2, 2))
        params = ParamVector.from_layers(spec, [(np.eye(2), np.zeros(2))])
        x = np.array([[1.5, -2.0], [0.0, 3.0]])
        outputs, _ = forward(spec, params, x)
        np.testing.assert_array_equal(outputs, x)

    def test_hand_computed_relu_network(self):
        """Test a small ReLU network against hand arithmetic"""
        spec = MlpSpec((1, 2, 1), HeadKind.MEAN_ONLY)
        params = ParamVector.from_layers(spec, [
            (np.array([[1.0, -2.0]]), np.array([0.5, 1.0])),
            (np.array([[3.0], [4.0]]), np.array([-1.0])),
        ])
        # x=2: hidden = relu([2.5, -3]) = [2.5, 0]; out = 7.5 - 1
        # x=-1: hidden = relu([-0.5, 3]) = [0, 3]; out = 12 - 1
        outputs, _ = forward(spec, params, np.array([[2.0], [-1.0]]))
        np.testing.assert_array_equal(outputs, np.array([[6.5], [11.0]]))

    def test_shape_mismatch(self):
        """Test that inputs of the wrong width are rejected"""
        spec = MlpSpec((2, 4, 2))
        with self.assertRaises(ShapeError):
            forward(spec, ParamVector.zeros(spec), np.zeros((5, 3)))

    def test_positive_homogeneity_of_hidden_layer(self):
        """Test that scaling inputs scales a bias-free ReLU network"""
        spec = MlpSpec((3, 6, 6, 2))
        rng = np.random.default_rng(5)
        layers = [(weights.copy(), np.zeros_like(bias)) for weights, bias in init_params(spec, rng).layers()]
        x = rng.normal(size=(4, 3))
        _, base = forward(spec, ParamVector.from_layers(spec, layers), x)

        layers[1] = (layers[1][0] * 2.5, layers[1][1])
        _, scaled = forward(spec, ParamVector.from_layers(spec, layers), x)
        np.testing.assert_allclose(scaled.activations[2], 2.5 * base.activations[2], rtol=1e-12, atol=1e-14)


class BackwardTests(SimpleTestCase):
    """Test reverse-mode gradients"""

    def test_zero_output_grad_gives_zero_gradient(self):
        """Test that a zero output gradient gives a zero parameter gradient"""
        spec = MlpSpec((2, 10, 2))
        params = init_params(spec, np.random.default_rng(1))
        outputs, trace = forward(spec, params, np.ones((3, 2)))
        grad = backward(spec, params, trace, np.zeros_like(outputs))
        self.assertTrue(np.all(grad.values == 0.0))

    def test_output_grad_shape_checked(self):
        """Test that the output gradient shape is checked"""
        spec = MlpSpec((2, 3, 2))
        params = init_params(spec, np.random.default_rng(1))
        _, trace = forward(spec, params, np.ones((3, 2)))
        with self.assertRaises(ShapeError):
            backward(spec, params, trace, np.zeros((3, 1)))

    def test_matches_finite_differences_for_all_heads(self):
        """Test backprop against central differences for every head"""
        rng = np.random.default_rng(2024)
        specs = [
            MlpSpec((2, 5, 3)),
            MlpSpec((3, 4, 4, 2)),
            MlpSpec((1, 6, 1), HeadKind.MEAN_ONLY),
            MlpSpec((2, 5, 1), HeadKind.MEAN_ONLY),
            MlpSpec((1, 4, 3, 2), HeadKind.MEAN_LOGVAR),
        ]
        for trial in range(50):
            spec = specs[trial % len(specs)]
            params, x = _well_conditioned(spec, rng, batch=3)
            seed = rng.normal(size=(3, spec.output_width))

            def loss(values):
                outputs, _ = forward(spec, params.with_values(values), x)
                return float(np.sum(outputs * seed))

            _, trace = forward(spec, params, x)
            analytic = backward(spec, params, trace, seed).values
            numeric = central_difference(loss, params.values)
            self.assertLessEqual(max_relative_error(analytic, numeric), 1e-6, msg=f"{spec} trial {trial}")

    def test_batch_gradient_is_sum_of_per_example_gradients(self):
        """Test that the batch gradient sums per-example gradients"""
        spec = MlpSpec((2, 7, 3))
        rng = np.random.default_rng(9)
        params = init_params(spec, rng)
        x = rng.normal(size=(2, 2))
        seed = rng.normal(size=(2, 3))

        _, trace = forward(spec, params, x)
        together = backward(spec, params, trace, seed).values
        separate = np.zeros_like(together)
        for row in range(2):
            _, row_trace = forward(spec, params, x[row:row + 1])
            separate += backward(spec, params, row_trace, seed[row:row + 1]).values
        np.testing.assert_allclose(together, separate, rtol=1e-12, atol=1e-14)


class ParamVectorTests(SimpleTestCase):
    """Test the flat parameter vector"""

    def test_layer_views_round_trip_bit_exact(self):
        """Test that rebuilding from layer views is bit exact"""
        spec = MlpSpec((4, 8, 3))
        params = init_params(spec, np.random.default_rng(4))
        rebuilt = ParamVector.from_layers(spec, params.layers())
        self.assertEqual(rebuilt.values.tobytes(), params.values.tobytes())

    def test_wrong_length_rejected(self):
        """Test that a vector of the wrong length is rejected"""
        with self.assertRaises(ShapeError):
            ParamVector(MlpSpec((2, 10, 2)), np.zeros(40))

    def test_non_finite_values_rejected(self):
        """NaN or infinite entries fail the same way a wrong length does."""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        for bad in (np.nan, np.inf, -np.inf):
            with self.assertRaises(ShapeError):
                ParamVector(spec, [0.0, bad])
        with self.assertRaises(NonFiniteParamsError):
            ParamVector.zeros(spec).with_values([1.0, np.nan])

    def test_bias_mask(self):
        """Test that the bias mask covers every bias"""
        params = ParamVector.zeros(MlpSpec((2, 10, 2)))
        self.assertEqual(int(params.bias_mask().sum()), 12)


class CheckpointTests(SimpleTestCase):
    """Test the binary parameter checkpoint"""

    def test_encode_decode_preserves_spec_and_values(self):
        """Test that a checkpoint keeps spec and values"""
        spec = MlpSpec((1, 10, 2), HeadKind.MEAN_LOGVAR)
        params = init_params(spec, np.random.default_rng(8))
        payload = encode_params(params)
        self.assertEqual(payload[:4], b"BDK1")

        decoded, end = decode_params(payload)
        self.assertEqual(end, len(payload))
        self.assertEqual(decoded.spec, spec)
        self.assertEqual(decoded.values.tobytes(), params.values.tobytes())

    def test_bad_magic_rejected(self):
        """Test that a wrong checkpoint magic is rejected"""
        payload = b"XXXX" + encode_params(ParamVector.zeros(MlpSpec((2, 2))))[4:]
        with self.assertRaises(DataFormatError):
            decode_params(payload)

    def test_truncated_payload_rejected(self):
        """Test that a truncated checkpoint is rejected"""
        payload = encode_params(ParamVector.zeros(MlpSpec((2, 3, 2))))
        with self.assertRaises(DataFormatError):
            decode_params(payload[:-5])

    def test_non_finite_payload_is_a_format_error(self):
        """A NaN written into the payload is reported against the file, not as a shape error."""
        payload = encode_params(ParamVector.zeros(MlpSpec((2, 2))))
        payload = payload[:-8] + np.array([np.nan], dtype="<f8").tobytes()
        with self.assertRaises(DataFormatError):
            decode_params(payload)
