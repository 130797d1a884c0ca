"""Parameter containers and the dense sublayers built from them."""

__all__ = [
    'AttentionParams',
    'LayerNormParams',
    'Linear',
    'MLPParams',
    'Projection',
    'init_attention',
    'init_layernorm',
    'init_linear',
    'init_mlp',
    'named_tensors',
    'trainable',
    'trunc_normal'
]

from collections.abc import Iterator
from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Union, TYPE_CHECKING

import numpy as np
from scipy.stats import truncnorm

from .errors import ContractError
from .tensor import Tensor, gelu, layernorm, linear

if TYPE_CHECKING:
    from .lora import LoRAAdapter

INIT_STD = 0.02


def trunc_normal(
    shape: tuple[int, ...], rng: np.random.Generator, std: float = INIT_STD
) -> Tensor:
    """Normal values truncated at two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return Tensor(values, requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass(slots=True)
class Linear:
    # Stored as [out x in]; applied as x @ weight.T + bias.
    weight: Tensor
    bias: Union[Tensor, None] = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass(slots=True)
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


@dataclass(slots=True)
class MLPParams:
    fc1: Linear
    fc2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


Projection = Union[Linear, 'LoRAAdapter']


@dataclass(slots=True)
class AttentionParams:
    q: Projection
    k: Projection
    v: Projection
    out: Linear
    n_heads: int

    def __post_init__(self) -> None:
        d_model = self.out.weight.shape[0]
        if self.n_heads < 1 or d_model % self.n_heads:
            raise ContractError(
                f'd_model {d_model} is not divisible by {self.n_heads} heads'
            )

    @property
    def d_model(self) -> int:
        return self.out.weight.shape[0]


def init_linear(
    d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True
) -> Linear:
    return Linear(
        weight=trunc_normal((d_out, d_in), rng),
        bias=_zeros(d_out) if bias else None
    )


def init_layernorm(d_model: int, eps: float = 1e-6) -> LayerNormParams:
    return LayerNormParams(gain=_ones(d_model), bias=_zeros(d_model), eps=eps)


def init_mlp(d_model: int, mlp_ratio: int, rng: np.random.Generator) -> MLPParams:
    hidden = d_model * mlp_ratio
    return MLPParams(
        fc1=init_linear(d_model, hidden, rng),
        fc2=init_linear(hidden, d_model, rng)
    )


def init_attention(
    d_model: int, n_heads: int, rng: np.random.Generator
) -> AttentionParams:
    return AttentionParams(
        q=init_linear(d_model, d_model, rng),
        k=init_linear(d_model, d_model, rng),
        v=init_linear(d_model, d_model, rng),
        out=init_linear(d_model, d_model, rng),
        n_heads=n_heads
    )


# PARAMETER TREES ======================================================


def named_tensors(tree: Any, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses and lists depth-first, yielding dotted names."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif is_dataclass(tree) and not isinstance(tree, type):
        for field_ in fields(tree):
            value = getattr(tree, field_.name)
            if value is not None:
                name = f'{prefix}.{field_.name}' if prefix else field_.name
                yield from named_tensors(value, name)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_tensors(item, f'{prefix}.{i}' if prefix else str(i))


def trainable(tree: Any) -> list[tuple[str, Tensor]]:
    return [(name, t) for name, t in named_tensors(tree) if t.requires_grad]
