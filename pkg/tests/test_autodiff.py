import numpy as np
import pytest

from detrack import autodiff as ad
from detrack.autodiff import (
    MLP,
    DiffArray,
    GradientCheckError,
    LayerNorm,
    Linear,
    Parameter,
    ShapeError,
    adamw_step,
    count_macs,
    grad_check,
    no_grad,
)


def test_softmax_symmetry():
    np.testing.assert_allclose(ad.softmax(DiffArray([0.0, 0.0])).value, [0.5, 0.5])


def test_sum_of_squares_gradient():
    x = Parameter(np.array([1.0, 2.0]))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_gradient_accumulates_over_every_use():
    x = Parameter(np.array([3.0]))
    (x * 2.0 + x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0 + 6.0 + 1.0])


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_allclose(ad.layer_norm(DiffArray(np.full((2, 5), 3.0))).value, 0.0)


def test_reflected_ops_with_ndarray():
    x = Parameter(np.array([1.0, 2.0]))
    out = np.array([2.0, 2.0]) * x - np.ones(2)
    assert isinstance(out, DiffArray)
    out.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match="add"):
        DiffArray(np.zeros(3)) + DiffArray(np.zeros(4))


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        (Parameter(np.ones(3)) * 2.0).backward()


@pytest.mark.parametrize(
    "f",
    [
        lambda x: (x * x).sum(),
        lambda x: ad.sigmoid(x).sum(),
        lambda x: ad.exp(ad.sin(x) * ad.cos(x)).mean(),
        lambda x: ad.gelu(x).sum(),
        lambda x: (ad.softmax(x.reshape(2, 3), axis=-1) * np.arange(6.0).reshape(2, 3)).sum(),
        lambda x: (ad.layer_norm(x.reshape(2, 3)) * np.arange(6.0).reshape(2, 3)).sum(),
        lambda x: ad.log(ad.abs_(x) + 1.0).sum(),
        lambda x: (ad.matmul(x.reshape(2, 3), x.reshape(3, 2)) ** 2).sum(),
        lambda x: ad.concat([x[:2], x[3:] * 2.0], axis=0).sum(),
        lambda x: (x[np.array([0, 0, 4])] ** 3).sum(),
        lambda x: ad.where(np.array([1, 0, 1, 0, 1, 0], bool), x * 2.0, x ** 2).sum(),
        lambda x: (x.reshape(2, 3).transpose() * np.arange(6.0).reshape(3, 2)).sum(),
    ],
)
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(f, seed):
    x = Parameter(np.random.default_rng(seed).normal(size=6))
    assert grad_check(f, x, eps=1e-6) < 1e-4


def test_sum_of_squares_grad_check_tolerance():
    x = Parameter(np.random.default_rng(1).normal(size=10))
    assert grad_check(lambda v: (v * v).sum(), x, eps=1e-5) < 1e-9


def test_grad_check_reports_non_finite_output():
    x = Parameter(np.array([1e-6, 1.0]))
    with pytest.raises(GradientCheckError, match="flat index 0"):
        grad_check(lambda v: ad.log(v).sum(), x, eps=1e-3)


def test_gather_and_scatter_rows():
    a = Parameter(np.arange(12.0).reshape(1, 4, 3))
    picked = ad.gather_rows(a, np.array([[2, 0, 2]]))
    np.testing.assert_allclose(picked.value[0], [[6, 7, 8], [0, 1, 2], [6, 7, 8]])
    picked.sum().backward()
    np.testing.assert_allclose(a.grad[0, :, 0], [1, 0, 2, 0])
    scattered = ad.scatter_rows(DiffArray(np.ones((1, 2, 3))), np.array([[3, 1]]), 5)
    np.testing.assert_allclose(scattered.value[0, :, 0], [0, 1, 0, 1, 0])


def test_masked_fill_blocks_gradient():
    x = Parameter(np.array([1.0, 2.0, 3.0]))
    ad.masked_fill(x, np.array([False, True, False]), -1e30).sum().backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 1.0])


def test_count_macs_and_no_grad():
    x = DiffArray(np.ones((5, 7)))
    layer = Linear(7, 3, np.random.default_rng(0))
    with count_macs() as counter:
        layer(x)
    assert counter.total == 5 * 7 * 3
    with no_grad():
        assert not layer(x).requires_grad
    assert layer(x).requires_grad


def test_adamw_zero_gradient():
    param = Parameter(np.array([1.0, -2.0]))
    assert adamw_step([param], [np.zeros(2)], lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(param.value, [1.0, -2.0])
    param = Parameter(np.array([1.0, -2.0]))
    adamw_step([param], [None], lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(param.value, [0.95, -1.9])


def test_adamw_first_step_moves_by_lr():
    param = Parameter(np.array([0.0, 0.0]))
    adamw_step([param], [np.array([3.0, -0.5])], lr=0.01, weight_decay=0.0)
    np.testing.assert_allclose(param.value, [-0.01, 0.01], rtol=1e-6)


def test_adamw_skips_non_finite_gradient():
    param = Parameter(np.array([1.0]))
    assert not adamw_step([param], [np.array([np.nan])], lr=0.1)
    np.testing.assert_allclose(param.value, [1.0])
    assert param.step == 0


def test_module_parameters_and_state_dict():
    rng = np.random.default_rng(0)
    mlp = MLP([4, 8, 2], rng)
    names = [name for name, _ in mlp.named_parameters()]
    assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
    other = MLP([4, 8, 2], np.random.default_rng(1))
    other.load_state_dict(mlp.state_dict())
    x = DiffArray(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(other(x).value, mlp(x).value)
    with pytest.raises(ShapeError):
        MLP([4, 9, 2], rng).load_state_dict(mlp.state_dict())


def test_layer_norm_module_gradients():
    norm = LayerNorm(4)
    x = Parameter(np.random.default_rng(2).normal(size=(3, 4)))
    weights = np.random.default_rng(3).normal(size=(3, 4))
    assert grad_check(lambda v: (norm(v) * weights).sum(), x) < 1e-5
