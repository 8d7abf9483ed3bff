import numpy as np
import pytest

from ctd2gan import gradcheck
from ctd2gan.tensor import ops
from ctd2gan.tensor.autograd import Tensor


def test_numeric_gradient_of_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = gradcheck.numeric_gradient(lambda: float(np.sum(x ** 2)), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-9)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])  # restored


def test_relative_error_uses_floor_for_tiny_values():
    assert gradcheck.relative_error([1e-9], [0.0]) == pytest.approx(1e-3)
    assert gradcheck.relative_error([2.0], [1.0]) == 0.5
    assert gradcheck.relative_error([], []) == 0.0


def test_a_wrong_gradient_is_caught():
    # detaching the input gives a zero analytic gradient while the function still depends on x
    detached = lambda t: Tensor(t[0].data) * 3.0 + t[0] * 0.0
    err = gradcheck.check_function(detached, [np.ones(4)], np.random.default_rng(0))
    assert err == pytest.approx(1.0)


def test_correct_gradient_passes():
    err = gradcheck.check_function(lambda t: ops.exp(t[0]) * t[1], [np.ones(3), np.arange(3.0)],
                                   np.random.default_rng(0))
    assert err < 1e-8


def test_op_suite_covers_every_layer_family():
    names = set(gradcheck.op_cases())
    for required in ("conv2d_same", "conv2d_transpose", "conv3d", "conv_input_grad", "conv_weight_grad",
                     "batch_norm", "spectral_normalize", "softmax", "selu", "cosine_similarity",
                     "gradient_penalty_double_backward"):
        assert required in names


def test_single_instance_suite_passes():
    results = gradcheck.run_op_suite(seed=1, instances=1)
    assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results if not r.passed]
