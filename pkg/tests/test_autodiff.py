import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointdg.autodiff import (
    DeterminismError,
    RankError,
    ShapeError,
    Tensor,
    UnsupportedPrimitiveError,
    apply_primitive as P,
    backward,
    finite_difference_check,
    no_grad,
)
from pointdg.gradcheck import PRIMITIVE_TOL, check_primitives


def test_mul_example():
    out = P("mul", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert out.data.tolist() == [3.0, 8.0]


def test_softmax_symmetric():
    assert P("softmax", Tensor([0.0, 0.0]), axis=-1).data.tolist() == [0.5, 0.5]


def test_gather_example():
    out = P("gather", Tensor([10.0, 20.0, 30.0]), indices=[2, 0, 1], axis=0)
    assert out.data.tolist() == [30.0, 10.0, 20.0]


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 6.0


def test_gather_sum_grad_is_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    backward(P("sum", P("gather", x, indices=[3, 1, 4, 0, 2], axis=0)))
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_softmax_nll_uniform_grad():
    logits = Tensor(np.zeros(5), requires_grad=True)
    p = P("softmax", logits, axis=-1)
    loss = -P("log", P("gather", p, indices=[2], axis=0)).sum()
    backward(loss)
    expected = np.full(5, 0.2)
    expected[2] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-15)
    assert finite_difference_check(
        lambda t: -P("log", P("gather", P("softmax", t, axis=-1), indices=[2], axis=0)).sum(), Tensor(np.zeros(5))
    ) < 1e-6


def test_fd_exp_and_linear():
    assert finite_difference_check(lambda t: P("sum", P("exp", t)), Tensor([0.0, 1.0])) < 1e-6
    assert finite_difference_check(lambda t: P("sum", t), Tensor(np.random.default_rng(0).normal(size=7))) < 1e-10


def test_fd_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        finite_difference_check(lambda t: P("sum", t) + float(rng.normal()), Tensor([1.0]))


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: P("sum", t), Tensor([1.0]), eps=0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_matches_finite_differences(seed):
    for r in check_primitives(seed):
        assert r.error < PRIMITIVE_TOL, (r.name, r.error)
        assert r.compared == r.probed


def test_non_scalar_loss_is_rank_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RankError):
        backward(x * 2.0)


def test_unknown_primitive():
    with pytest.raises(UnsupportedPrimitiveError):
        P("fft", Tensor([1.0]))


def test_shape_errors_are_descriptive():
    with pytest.raises(ShapeError, match="matmul"):
        P("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        P("add", Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        P("conv1d", Tensor(np.ones((1, 4, 3))), Tensor(np.ones((2, 3, 3))), Tensor(np.ones(3)))


def test_fan_out_accumulates():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)

    def grad_of(build):
        x = Tensor(x0.copy(), requires_grad=True)
        backward(build(x))
        return x.grad

    f = lambda x: P("sum", P("exp", x))
    g = lambda x: P("sum", x * x)
    np.testing.assert_allclose(grad_of(lambda x: f(x) + g(x)), grad_of(f) + grad_of(g), rtol=1e-14)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(P("sum", x))
    backward(P("sum", x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_every_reachable_leaf_gets_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    backward(P("sum", a * 0.0 + b * c))
    assert a.grad is not None and b.grad is not None and c.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_scalar_reductions_are_rank_zero():
    s = P("sum", Tensor(np.ones((2, 3))))
    assert s.shape == ()
    assert (s * 2.0).shape == ()


def test_relu_max_at_safe_points():
    x = Tensor(np.array([[-1.0, 0.5, 2.0], [0.2, -0.3, 1.5]]))
    assert finite_difference_check(lambda t: P("sum", P("relu", t)), x) < 1e-9
    assert finite_difference_check(lambda t: P("sum", P("max", t, axis=1)), x) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_gather_then_scatter_is_identity(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, n, 3))
    sigma = rng.permutation(n)
    y = P("scatter", P("gather", Tensor(x), indices=sigma, axis=1), indices=sigma, axis=1, size=n)
    np.testing.assert_array_equal(y.data, x)


def test_gather_batched_indices():
    x = np.arange(12.0).reshape(2, 3, 2)
    idx = np.array([[2, 0], [1, 1]])
    out = P("gather", Tensor(x), indices=idx, axis=1).data
    np.testing.assert_array_equal(out[0], x[0, [2, 0]])
    np.testing.assert_array_equal(out[1], x[1, [1, 1]])
