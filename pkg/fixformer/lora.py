"""Low-rank adaptation of frozen projections."""

__all__ = ['LoRAAdapter', 'apply_lora', 'lora_forward', 'make_lora', 'merge_lora_state']

from collections.abc import Mapping
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ContractError, DimensionError
from .layers import Linear, named_tensors, trunc_normal
from .tensor import Tensor, linear

if TYPE_CHECKING:
    from .image import ImageEncoderParams


@dataclass(slots=True)
class LoRAAdapter:
    # Frozen base projection; never receives gradient.
    base: Linear
    # [rank x d_in], small random init.
    a: Tensor
    # [d_out x rank], zero init so the adapter starts as a no-op.
    b: Tensor
    scale: float

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(x, self)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + self.scale * (self.b.data @ self.a.data)


def lora_forward(x: Tensor, adapter: LoRAAdapter) -> Tensor:
    """``x @ W.T + scale * (x @ A.T) @ B.T`` with ``W`` frozen."""
    if x.shape[-1] != adapter.a.shape[1]:
        raise DimensionError(
            f'LoRA input {x.shape} against adapter A {adapter.a.shape}'
        )
    update = linear(linear(x, adapter.a), adapter.b)
    return adapter.base(x) + update * adapter.scale


def make_lora(
    base: Linear, rank: int, alpha: float, rng: np.random.Generator
) -> LoRAAdapter:
    d_out, d_in = base.weight.shape
    if rank < 1 or rank > min(d_in, d_out):
        raise ContractError(f'LoRA rank {rank} outside [1, {min(d_in, d_out)}]')
    base.weight.requires_grad = False
    if base.bias is not None:
        base.bias.requires_grad = False
    return LoRAAdapter(
        base=base,
        a=trunc_normal((rank, d_in), rng),
        b=Tensor(np.zeros((d_out, rank)), requires_grad=True),
        scale=alpha / rank
    )


def apply_lora(
    encoder: 'ImageEncoderParams',
    rank: int,
    alpha: float,
    rng: np.random.Generator
) -> None:
    """Freeze the whole encoder and adapt its query and value projections."""
    for _, tensor in named_tensors(encoder):
        tensor.requires_grad = False
    for layer in encoder.layers:
        attn = layer.attn
        if isinstance(attn.q, LoRAAdapter) or isinstance(attn.v, LoRAAdapter):
            raise ContractError('encoder already carries LoRA adapters')
        attn.q = make_lora(attn.q, rank, alpha, rng)
        attn.v = make_lora(attn.v, rank, alpha, rng)


def merge_lora_state(state: Mapping[str, np.ndarray], scale: float) -> dict[str, np.ndarray]:
    """
    Fold ``<p>.base.*``, ``<p>.a`` and ``<p>.b`` entries back into plain
    ``<p>.weight`` / ``<p>.bias`` entries. Other entries pass through.
    """
    merged: dict[str, np.ndarray] = {}
    for name, value in state.items():
        if name.endswith(('.a', '.b')) and name[:-2] + '.base.weight' in state:
            continue
        if '.base.' in name:
            prefix, _, leaf = name.rpartition('.base.')
            if leaf == 'weight':
                value = value + scale * (state[f'{prefix}.b'] @ state[f'{prefix}.a'])
            merged[f'{prefix}.{leaf}'] = np.asarray(value, dtype=np.float64)
        else:
            merged[name] = value
    return merged
