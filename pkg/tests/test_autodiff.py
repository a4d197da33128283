import numpy as np
import pytest

from latentdyn import autodiff as ad
from latentdyn.errors import ContractViolationError, NonFiniteError

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_diff(f, x, step=FD_STEP):
    """Independent oracle: central finite differences, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        hi, lo = xf.copy(), xf.copy()
        hi[i] += step
        lo[i] -= step
        flat[i] = (f(hi.reshape(x.shape)) - f(lo.reshape(x.shape))) / (2 * step)
    return out


def check_against_fd(build, x0):
    """build(param_node) -> scalar node; compares engine grads with the oracle."""
    p = ad.parameter("x", x0)
    root = build(p)
    got = ad.gradient(root, {"x": p})["x"]

    def f(x):
        return float(ad.evaluate(build(ad.parameter("x", x))))

    want = finite_diff(f, x0)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-6)
    assert np.max(np.abs(got - want) / denom) <= FD_RTOL, f"{got} vs {want}"


def test_constant_leaf_value():
    assert float(ad.evaluate(ad.constant(3.0))) == 3.0


def test_square_forward():
    assert float(ad.evaluate(ad.square(ad.constant(3.0)))) == 9.0


def test_matmul_identity_forward():
    v = np.array([[3.0], [1.0]])
    out = ad.evaluate(ad.matmul(ad.constant(np.eye(2)), ad.constant(v)))
    np.testing.assert_array_equal(out, v)


def test_gradient_of_square_at_3_is_6():
    p = ad.parameter("x", 3.0)
    g = ad.gradient(ad.square(p), {"x": p})["x"]
    np.testing.assert_allclose(g, 6.0)


def test_gradient_of_sum_exp_at_zero_is_ones():
    p = ad.parameter("x", np.zeros(2))
    g = ad.gradient(ad.asum(ad.exp(p)), {"x": p})["x"]
    np.testing.assert_allclose(g, np.ones(2))


@pytest.mark.parametrize(
    "name,build,x0",
    [
        ("add", lambda p: ad.asum(ad.add(p, np.array([1.0, -2.0]))), np.array([0.3, 1.2])),
        ("multiply", lambda p: ad.asum(ad.multiply(p, p)), np.array([0.5, -1.5, 2.0])),
        ("matmul", lambda p: ad.asum(ad.matmul(ad.constant([[1.0, 2.0], [0.5, -1.0]]), p)),
         np.array([[0.3], [0.7]])),
        ("exp", lambda p: ad.asum(ad.exp(p)), np.array([-0.5, 0.0, 0.8])),
        ("log", lambda p: ad.asum(ad.log(p)), np.array([0.4, 1.3, 2.2])),
        ("tanh", lambda p: ad.asum(ad.tanh(p)), np.array([-1.0, 0.2, 0.9])),
        ("reciprocal", lambda p: ad.asum(ad.reciprocal(p)), np.array([0.7, -1.4, 2.5])),
        ("square", lambda p: ad.asum(ad.square(p)), np.array([1.1, -0.3])),
        ("sum_axis", lambda p: ad.asum(ad.square(ad.asum(p, axis=1))),
         np.array([[0.2, 0.4], [1.0, -0.6]])),
        ("concat", lambda p: ad.asum(ad.square(ad.concat([p, ad.multiply(p, 2.0)], axis=0))),
         np.array([[0.5, 1.0]])),
        ("slice", lambda p: ad.asum(ad.square(p[0:1, :])), np.array([[0.5, 1.0], [2.0, 3.0]])),
        ("broadcast", lambda p: ad.asum(ad.multiply(ad.broadcast_to(p, (2, 3)), ad.constant(np.arange(6.0).reshape(2, 3)))),
         np.array([[0.4], [0.9]])),
        ("mixed_deep",
         lambda p: ad.asum(ad.log(ad.add(ad.square(ad.tanh(ad.matmul(ad.constant([[0.6, -0.2], [0.3, 0.9]]), p))), 0.5))),
         np.array([[0.7], [-0.4]])),
    ],
)
def test_primitive_gradients_match_finite_differences(name, build, x0):
    check_against_fd(build, x0)


def test_gradient_linearity_on_random_compositions():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x0 = rng.normal(size=(3,))
        a, b = rng.uniform(0.5, 2.0, size=2)

        def f(p):
            return ad.asum(ad.square(ad.tanh(p)))

        def g(p):
            return ad.asum(ad.exp(ad.multiply(p, 0.3)))

        p1 = ad.parameter("x", x0)
        combined = ad.add(ad.multiply(f(p1), a), ad.multiply(g(p1), b))
        got = ad.gradient(combined, {"x": p1})["x"]

        p2 = ad.parameter("x", x0)
        p3 = ad.parameter("x", x0)
        want = a * ad.gradient(f(p2), {"x": p2})["x"] + b * ad.gradient(g(p3), {"x": p3})["x"]
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gradient_of_constant_expression_is_zero():
    p = ad.parameter("x", np.array([1.0, 2.0]))
    root = ad.asum(ad.square(ad.constant(np.array([5.0, 6.0]))))
    np.testing.assert_array_equal(ad.gradient(root, {"x": p})["x"], np.zeros(2))


def test_repeated_backward_is_deterministic():
    rng = np.random.default_rng(9)
    p = ad.parameter("w", rng.normal(size=(4, 4)))
    x = ad.constant(rng.normal(size=(4, 1)))
    root = ad.asum(ad.square(ad.tanh(ad.matmul(p, x))))
    g1 = ad.gradient(root, {"w": p})["w"]
    g2 = ad.gradient(root, {"w": p})["w"]
    np.testing.assert_array_equal(g1, g2)


def test_shared_subexpression_accumulates():
    p = ad.parameter("x", 2.0)
    root = ad.add(ad.multiply(p, p), p)  # x^2 + x -> 2x + 1 = 5
    np.testing.assert_allclose(ad.gradient(root, {"x": p})["x"], 5.0)


def test_non_scalar_root_rejected():
    p = ad.parameter("x", np.array([1.0, 2.0]))
    with pytest.raises(ContractViolationError):
        ad.gradient(ad.exp(p), {"x": p})


def test_non_finite_forward_names_primitive():
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(ad.constant(-1.0))
    with pytest.raises(NonFiniteError, match="reciprocal"):
        ad.reciprocal(ad.constant(0.0))
    with pytest.raises(NonFiniteError, match="exp"):
        ad.exp(ad.constant(1e4))


def test_operator_sugar_matches_primitives():
    p = ad.parameter("x", np.array([1.0, 4.0]))
    root = ad.asum((p * 2.0 - 1.0) / ad.constant(np.array([1.0, 2.0])) + 3.0)
    # (2*1-1)/1 + 3 + (2*4-1)/2 + 3 = 4 + 6.5
    np.testing.assert_allclose(float(root.value), 10.5)
    np.testing.assert_allclose(ad.gradient(root, {"x": p})["x"], np.array([2.0, 1.0]))
