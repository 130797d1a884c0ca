"""
Dense float64 tensors with reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are recorded on
the tape in execution order, and :meth:`GradTape.backward` replays them
in reverse. Outside of a tape nothing is recorded, which is how frozen
inference passes run.
"""

__all__ = [
    'AllocationLog',
    'GradTape',
    'Tensor',
    'TapeNode',
    'add',
    'backward',
    'concat',
    'cross_entropy',
    'emit',
    'gelu',
    'layernorm',
    'linear',
    'matmul',
    'mean',
    'mul',
    'nan_guard',
    'reshape',
    'softmax',
    'sub',
    'sum_',
    'take_rows',
    'track_allocations',
    'transpose',
    'zero_grad'
]

from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar, Token
from dataclasses import dataclass
from math import pi, sqrt
from types import TracebackType
from typing import Any, Literal, Union, TYPE_CHECKING

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, NonFiniteError

if TYPE_CHECKING:
    from typing_extensions import Self
else:
    try:
        from typing import Self  # Python 3.11+
    except ImportError:
        from typing_extensions import Self  # Python 3.10 fallback

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
Backward = Callable[[np.ndarray], tuple[Union[np.ndarray, None], ...]]

_INV_SQRT_2PI = 1.0 / sqrt(2.0 * pi)

_ACTIVE_TAPE: ContextVar[Union['GradTape', None]] = ContextVar(
    'fixformer_active_tape', default=None
)
_NAN_GUARD: ContextVar[bool] = ContextVar('fixformer_nan_guard', default=True)
_ALLOCATIONS: ContextVar[Union['AllocationLog', None]] = ContextVar(
    'fixformer_allocations', default=None
)


# GUARDS AND ACCOUNTING ================================================


@contextmanager
def nan_guard(enabled: bool = True) -> Iterator[None]:
    """Enable or disable the NaN/Inf check on op outputs and gradients."""
    token = _NAN_GUARD.set(enabled)
    try:
        yield
    finally:
        _NAN_GUARD.reset(token)


@dataclass(slots=True)
class AllocationLog:
    # Number of tensors created while the log was active.
    n_tensors: int = 0
    # Number of float64 values held by those tensors.
    n_values: int = 0

    def add(self, array: np.ndarray) -> None:
        self.n_tensors += 1
        self.n_values += int(array.size)


@contextmanager
def track_allocations() -> Iterator[AllocationLog]:
    log = AllocationLog()
    token = _ALLOCATIONS.set(log)
    try:
        yield log
    finally:
        _ALLOCATIONS.reset(token)


def _check_finite(array: np.ndarray, where: str) -> None:
    if _NAN_GUARD.get() and not np.isfinite(array).all():
        raise NonFiniteError(where)


# TENSOR ===============================================================


class Tensor:
    """
    Contiguous row-major array of 64-bit floats.

    Parameters
    ----------
    data : array_like
        Values, copied into a fresh C-contiguous float64 buffer.
    requires_grad : bool
        Whether :func:`backward` populates ``grad`` for this tensor.
    """

    __slots__ = ('data', 'requires_grad', 'grad', '_tape')

    if TYPE_CHECKING:
        data: np.ndarray
        requires_grad: bool
        grad: Union[np.ndarray, None]
        _tape: Union['GradTape', None]

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=np.float64, order='C')
        self._init(array, requires_grad)

    def _init(self, array: np.ndarray, requires_grad: bool) -> None:
        if 0 in array.shape:
            raise ContractError(
                f'tensor extents must be positive, got {array.shape}'
            )
        _check_finite(array, 'tensor construction')
        self.data = array
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        if (log := _ALLOCATIONS.get()) is not None:
            log.add(array)

    @classmethod
    def _from_op(cls, array: np.ndarray, requires_grad: bool) -> Self:
        out = cls.__new__(cls)
        out._init(np.ascontiguousarray(array, dtype=np.float64), requires_grad)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f'item() needs a single value, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    def __add__(self, other: Union['Tensor', float]) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: float) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Union['Tensor', float]) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: float) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Union['Tensor', float]) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: float) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> 'Tensor':
        if isinstance(other, Tensor):
            raise ContractError('division is only defined by a constant')
        return mul(self, 1.0 / other)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, key: Any) -> 'Tensor':
        return _slice(self, key)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


# TAPE =================================================================


@dataclass(frozen=True, slots=True, eq=False)
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class GradTape:
    """
    Ordered record of the operations of one forward pass.

    A tape is owned by a single forward/backward pass. It becomes the
    recording target while used as a context manager; tensors created
    outside of any tape are constants as far as differentiation goes.
    """

    __slots__ = ('_nodes', '_token', 'replays')

    if TYPE_CHECKING:
        _nodes: list[TapeNode]
        _token: Union[Token, None]
        replays: int

    def __init__(self) -> None:
        self._nodes = []
        self._token = None
        self.replays = 0

    def __enter__(self) -> Self:
        if self._token is not None:
            raise ContractError('tape is already recording')
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(
        self,
        exception_type: Union[type[BaseException], None],
        exception_value: Union[BaseException, None],
        traceback: Union[TracebackType, None],
    ) -> Literal[False]:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> tuple[str, ...]:
        return tuple(node.op for node in self._nodes)

    def record(self, node: TapeNode) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f'loss must be a scalar, got shape {loss.shape}')
        if loss._tape is not self:
            raise ContractError('loss was not produced on this tape')

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            self.replays += 1
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            for tensor, tensor_grad in zip(node.inputs, node.backward(grad)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                _check_finite(tensor_grad, f'{node.op} backward')
                if tensor.is_leaf:
                    if tensor.grad is None:
                        tensor.grad = np.array(tensor_grad, dtype=np.float64)
                    else:
                        tensor.grad = tensor.grad + tensor_grad
                else:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + tensor_grad
                    else:
                        pending[key] = tensor_grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from a scalar loss."""
    if loss._tape is None:
        raise ContractError('loss is not on a gradient tape')
    loss._tape.backward(loss)


def emit(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward_fn: Backward
) -> Tensor:
    """Wrap an op result and record it on the active tape if needed."""
    _check_finite(data, op)
    tape = _ACTIVE_TAPE.get()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, requires_grad)
    if requires_grad:
        out._tape = tape
        tape.record(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


# ELEMENTWISE ==========================================================


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError(f'{op} of {a.shape} with {b.shape}') from err


def add(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('add', a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit('add', (a, b), a.data + b.data, _backward)


def sub(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('sub', a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return emit('sub', (a, b), a.data - b.data, _backward)


def mul(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('mul', a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape)
        )

    return emit('mul', (a, b), a.data * b.data, _backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    cdf = ndtr(x.data)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return emit('gelu', (x,), x.data * cdf, _backward)


# LINEAR ALGEBRA =======================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f'matmul of {a.shape} by {b.shape}')

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            g @ np.swapaxes(b.data, -1, -2),
            np.swapaxes(a.data, -1, -2) @ g
        )

    return emit('matmul', (a, b), a.data @ b.data, _backward)


def linear(x: Tensor, weight: Tensor, bias: Union[Tensor, None] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out x in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f'linear input {x.shape} against weight {weight.shape}')
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f'linear bias {bias.shape} against weight {weight.shape}')

    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        flat_g = g.reshape(-1, g.shape[-1])
        flat_x = x.data.reshape(-1, x.shape[-1])
        grads = (g @ weight.data, flat_g.T @ flat_x)
        if bias is None:
            return grads
        return grads + (flat_g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit('linear', inputs, data, _backward)


# SHAPE ================================================================


def transpose(x: Tensor, axes: Union[Sequence[int], None] = None) -> Tensor:
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return emit('transpose', (x,), np.transpose(x.data, perm), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape)).copy()
    except ValueError as err:
        raise DimensionError(f'reshape of {x.shape} to {tuple(shape)}') from err

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return emit('reshape', (x,), data, _backward)


def _is_basic_index(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(part, (int, slice)) for part in parts)


def _slice(x: Tensor, key: Any) -> Tensor:
    if not _is_basic_index(key):
        raise ContractError('only integer and slice indexing is supported')
    data = np.array(x.data[key])

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[key] = g
        return (grad,)

    return emit('slice', (x,), data, _backward)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a matrix; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1 or idx.size == 0:
        raise DimensionError(f'take_rows of {x.shape} with indices {idx.shape}')
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ContractError(f'row index out of range for {x.shape[0]} rows')

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return emit('take_rows', (x,), x.data[idx], _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError('concat needs at least one tensor')
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = ', '.join(str(t.shape) for t in tensors)
        raise DimensionError(f'concat of {shapes} along axis {axis}') from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return emit('concat', tuple(tensors), data, _backward)


# REDUCTIONS ===========================================================


def _expand(g: np.ndarray, x: Tensor, axis: Union[int, None], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape).copy()


def sum_(x: Tensor, axis: Union[int, None] = None, keepdims: bool = False) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand(g, x, axis, keepdims),)

    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return emit('sum', (x,), data, _backward)


def mean(x: Tensor, axis: Union[int, None] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand(g, x, axis, keepdims) / count,)

    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    return emit('mean', (x,), data, _backward)


# NORMALIZATION ========================================================


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return emit('softmax', (x,), y, _backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale."""
    if eps <= 0:
        raise ContractError(f'layernorm eps must be positive, got {eps}')
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f'layernorm of {x.shape} with gain {gain.shape} and bias {bias.shape}'
        )

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_normed = g * gain.data
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        rows = tuple(range(g.ndim - 1))
        return gx, (g * normed).sum(axis=rows), g.sum(axis=rows)

    return emit('layernorm', (x, gain, bias), normed * gain.data + bias.data, _backward)


# LOSSES ===============================================================


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits."""
    targets = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f'cross_entropy of {logits.shape} with labels {targets.shape}')
    n_rows, n_classes = logits.shape
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ContractError(f'labels must lie in [0, {n_classes})')

    rows = np.arange(n_rows)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[rows, targets].mean()

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / n_rows),)

    return emit('cross_entropy', (logits,), np.asarray(loss), _backward)
