"""
Minimal reverse-mode differentiation over dense numpy arrays.

Every operation records its inputs and a closure mapping the output gradient to input
gradients. `DiffArray.backward` walks the recorded graph in reverse topological order,
sums gradients over every use of a value, and frees the graph afterwards. Graphs are
per forward pass and owned by the calling context; the only context-level state is the
MAC counter and the no-grad switch, both held in ContextVars.
"""

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
import numpy as np
from scipy import special  # type: ignore

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    pass


class GradientCheckError(FloatingPointError):
    pass


@dataclass
class MacCounter:
    total: int = 0


_MAC_COUNTER: ContextVar[MacCounter | None] = ContextVar("mac_counter", default=None)
_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count the multiply-accumulates executed by `matmul` inside the block."""
    counter = MacCounter()
    token = _MAC_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTER.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class DiffArray:
    """A dense array that records how it was computed so gradients can flow back."""

    __array_ufunc__ = None

    def __init__(
        self,
        value: np.ndarray | float,
        requires_grad: bool = False,
        parents: tuple["DiffArray", ...] = (),
        backward: BackwardFn | None = None,
    ):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        return f"DiffArray({self.value!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "DiffArray":
        return DiffArray(self.value)

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """
        Accumulate d(self)/d(node) into `.grad` of every node reachable through
        requires_grad inputs, then release the recorded graph.
        """
        if gradient is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward without a gradient needs a scalar, got shape {self.shape}"
                )
            gradient = np.ones_like(self.value)
        order = self._topological_order()
        pending: dict[int, np.ndarray] = {id(self): np.asarray(gradient, self.dtype)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = (
                    parent_grad if key not in pending else pending[key] + parent_grad
                )
        for node in order:
            node._parents, node._backward = (), None

    def _topological_order(self) -> list["DiffArray"]:
        order: list[DiffArray] = []
        visited: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes: int):
        return transpose(self, axes or None)


class Parameter(DiffArray):
    """A trainable array plus its AdamW moment accumulators."""

    def __init__(self, value: np.ndarray, name: str = ""):
        super().__init__(np.array(value), requires_grad=True)
        self.name = name
        self.first_moment = np.zeros_like(self.value)
        self.second_moment = np.zeros_like(self.value)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = None


def as_diff(x: "DiffArray | np.ndarray | float") -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(value: np.ndarray, parents: tuple[DiffArray, ...], backward: BackwardFn) -> DiffArray:
    if _GRAD_ENABLED.get() and any(parent.requires_grad for parent in parents):
        return DiffArray(value, requires_grad=True, parents=parents, backward=backward)
    return DiffArray(value)


def _broadcast_shape(a: DiffArray, b: DiffArray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from e


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def power(a, exponent: float) -> DiffArray:
    a = as_diff(a)
    return _result(
        a.value**exponent,
        (a,),
        lambda g: (g * exponent * a.value ** (exponent - 1),),
    )


def abs_(a) -> DiffArray:
    a = as_diff(a)
    return _result(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> DiffArray:
    a = as_diff(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def sin(a) -> DiffArray:
    a = as_diff(a)
    return _result(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a) -> DiffArray:
    a = as_diff(a)
    return _result(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    out = special.expit(a.value)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> DiffArray:
    a = as_diff(a)
    return _result(np.maximum(a.value, 0), (a,), lambda g: (g * (a.value > 0),))


def gelu(a) -> DiffArray:
    """Exact (erf) GELU."""
    a = as_diff(a)
    cdf = 0.5 * (1 + special.erf(a.value / np.sqrt(2)))
    pdf = np.exp(-0.5 * a.value**2) / np.sqrt(2 * np.pi)
    return _result(a.value * cdf, (a,), lambda g: (g * (cdf + a.value * pdf),))


def clip(a, lower: float | np.ndarray, upper: float | np.ndarray) -> DiffArray:
    a = as_diff(a)
    inside = (a.value >= lower) & (a.value <= upper)
    return _result(np.clip(a.value, lower, upper), (a,), lambda g: (g * inside,))


def maximum(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.value >= b.value
    return _result(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def minimum(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.value <= b.value
    return _result(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def where(condition: np.ndarray, a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    condition = np.asarray(condition, dtype=bool)
    return _result(
        np.where(condition, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(condition, g, 0), a.shape),
            _unbroadcast(np.where(condition, 0, g), b.shape),
        ),
    )


def masked_fill(a, mask: np.ndarray, fill_value: float) -> DiffArray:
    """Replace entries where `mask` is set; those entries get exactly zero gradient."""
    a = as_diff(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result(
        np.where(mask, fill_value, a.value).astype(a.dtype),
        (a,),
        lambda g: (np.where(mask, 0, g),),
    )


def matmul(a, b) -> DiffArray:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e
    counter = _MAC_COUNTER.get()
    if counter is not None:
        counter.total += int(np.prod(out.shape)) * a.shape[-1]
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape),
        ),
    )


def reshape(a, shape: tuple[int, ...]) -> DiffArray:
    a = as_diff(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...] | None = None) -> DiffArray:
    a = as_diff(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    try:
        out = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat: incompatible shapes {[x.shape for x in arrays]} on axis {axis}"
        ) from e
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _result(out, tuple(arrays), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    expanded = [
        reshape(x, x.shape[: axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1) :])
        for x in arrays
    ]
    return concat(expanded, axis=axis)


def take(a, index) -> DiffArray:
    """Slice or fancy-index; the gradient scatters back with repeated indices summed."""
    a = as_diff(a)
    out = a.value[index]
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(part, (np.ndarray, list)) for part in parts)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(np.array(out), (a,), backward)


def gather_rows(a, index: np.ndarray) -> DiffArray:
    """Per batch element, pick rows along axis 1: (B, N, C), (B, Q) -> (B, Q, C)."""
    a = as_diff(a)
    index = np.asarray(index, dtype=int)
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: incompatible shapes {a.shape} and {index.shape}")
    batch = np.arange(a.shape[0])[:, None]
    return take(a, (batch, index))


def scatter_rows(a, index: np.ndarray, n_rows: int) -> DiffArray:
    """
    Place rows of (B, N, C) at distinct positions `index` (B, N) of a zero-filled
    (B, n_rows, C) array.
    """
    a = as_diff(a)
    index = np.asarray(index, dtype=int)
    if a.ndim != 3 or index.shape != a.shape[:2]:
        raise ShapeError(f"scatter_rows: incompatible shapes {a.shape} and {index.shape}")
    batch = np.arange(a.shape[0])[:, None]
    out = np.zeros((a.shape[0], n_rows, a.shape[2]), dtype=a.dtype)
    out[batch, index] = a.value
    return _result(out, (a,), lambda g: (g[batch, index],))


def sum_(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    count = a.size if axis is None else int(np.prod(np.array(a.shape)[np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) / count


def softmax(a, axis: int = -1) -> DiffArray:
    a = as_diff(a)
    shifted = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _result(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis, then apply the optional affine (gamma, beta)."""
    a = as_diff(a)
    centered = a.value - a.value.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    parents: tuple[DiffArray, ...] = (a,)
    scale = np.ones(a.shape[-1], dtype=a.dtype)
    out = normed
    if gamma is not None:
        gamma = as_diff(gamma)
        scale = gamma.value
        out = out * scale
        parents += (gamma,)
    if beta is not None:
        beta = as_diff(beta)
        out = out + beta.value
        parents += (beta,)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        g_normed = g * scale
        grad_a = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads: tuple[np.ndarray, ...] = (grad_a,)
        if gamma is not None:
            grads += (_unbroadcast(g * normed, gamma.shape),)
        if beta is not None:
            grads += (_unbroadcast(g, beta.shape),)
        return grads

    return _result(out, parents, backward)


def grad_check(
    f: Callable[[DiffArray], DiffArray],
    x: DiffArray,
    eps: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> float:
    """
    Compare the backward-pass gradient of scalar `f` at `x` with central finite
    differences. Returns the max over checked entries of
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    assert x.requires_grad, "grad_check needs a requires_grad input"
    x.grad = None
    out = f(x)
    if out.size != 1 or not np.isfinite(out.value).all():
        raise GradientCheckError(f"f must return a finite scalar, got {out.value}")
    out.backward()
    analytic = (np.zeros_like(x.value) if x.grad is None else x.grad).reshape(-1)
    flat = x.value.reshape(-1)
    assert np.shares_memory(flat, x.value), "grad_check needs a contiguous input"
    checked = range(flat.size) if indices is None else indices
    errors = []
    with no_grad():
        for index in checked:
            original = flat[index]
            flat[index] = original + eps
            plus = f(x).item()
            flat[index] = original - eps
            minus = f(x).item()
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradientCheckError(f"non-finite output perturbing flat index {index}")
            numeric = (plus - minus) / (2 * eps)
            errors.append(
                abs(analytic[index] - numeric)
                / (abs(analytic[index]) + abs(numeric) + 1e-8)
            )
    x.grad = None
    return float(max(errors, default=0.0))


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    lr: float,
    betas: tuple[float, ...] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> bool:
    """
    One AdamW update with bias-corrected moments and decoupled weight decay.
    Returns False, leaving every parameter untouched, if any gradient is non-finite.
    """
    beta1, beta2 = betas
    grads = [
        np.zeros_like(param.value) if grad is None else np.asarray(grad)
        for param, grad in zip(params, grads)
    ]
    if not all(np.isfinite(grad).all() for grad in grads):
        return False
    for param, grad in zip(params, grads):
        param.step += 1
        param.first_moment = beta1 * param.first_moment + (1 - beta1) * grad
        param.second_moment = beta2 * param.second_moment + (1 - beta2) * grad**2
        first_hat = param.first_moment / (1 - beta1**param.step)
        second_hat = param.second_moment / (1 - beta2**param.step)
        param.value *= 1 - lr * weight_decay
        param.value -= lr * first_hat / (np.sqrt(second_hat) + eps)
    return True


class Module:
    """Holds Parameters and child Modules as attributes; names are dotted paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, param in self._walk(prefix):
            if id(param) not in seen:
                seen.add(id(param))
                yield name, param

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.value.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        assert not missing, f"missing parameters in state: {sorted(missing)}"
        for name, param in params.items():
            if param.shape != np.shape(state[name]):
                raise ShapeError(
                    f"parameter {name}: expected shape {param.shape}, got {np.shape(state[name])}"
                )
            param.value[...] = state[name]


def xavier_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, dtype: str = "float64"
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(
        self, d_in: int, d_out: int, rng: np.random.Generator, dtype: str = "float64"
    ):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> DiffArray:
        return matmul(x, self.weight) + self.bias

    def zero_(self) -> "Linear":
        self.weight.value[...] = 0
        self.bias.value[...] = 0
        return self


class MLP(Module):
    """Linear layers with ReLU between them."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, dtype: str = "float64"):
        self.layers = [
            Linear(d_in, d_out, rng, dtype) for d_in, d_out in zip(dims[:-1], dims[1:])
        ]

    def __call__(self, x) -> DiffArray:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype: str = "float64"):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x) -> DiffArray:
        return layer_norm(x, self.gamma, self.beta)
