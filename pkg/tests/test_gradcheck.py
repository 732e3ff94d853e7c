import numpy as np

from dabdunet import tensor as T
from dabdunet.gradcheck import check, numeric_grad, rel_error, run_suite
from dabdunet.tensor import Tensor


def test_rel_error_definition():
    np.testing.assert_allclose(rel_error([0.5, 10.0], [0.4, 11.0]), [0.1, 1 / 11])


def test_numeric_grad_of_known_function():
    x = Tensor([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x.data ** 3)), x)
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-9)
    np.testing.assert_array_equal(x.data, [1.0, -2.0, 0.5])  # perturbations are undone


def test_check_catches_a_wrong_backward_rule():
    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)

    def bad_square(t):
        return T.record(t.data ** 2, (t,), lambda g: (t.data * g,))  # missing the factor 2

    assert not check("bad", lambda: T.sum(bad_square(x)), [x]).passed
    assert check("good", lambda: T.sum(x * x), [x]).passed


def test_suite_passes_on_another_seed():
    results = run_suite(seed=11, repeats=1)
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]
