"""
Padding-free batches of variable-length token sequences.

A :class:`RaggedBatch` stores ``B`` sequences back to back in one
``(sum T_i) x d`` tensor and delimits them with ``B + 1`` offsets. Row-wise
layers (projections, norms, MLPs) run on the flat buffer directly; only
attention needs the offsets, and it never lets a query see a key of
another batch element.
"""

__all__ = [
    'RaggedBatch',
    'WeightsHook',
    'build',
    'get_num_threads',
    'ragged_attention',
    'ragged_cross_attention',
    'set_num_threads'
]

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import sqrt
from typing import Union

import numpy as np

from .errors import ContractError, DimensionError
from .layers import AttentionParams
from .tensor import Tensor, concat, emit, take_rows

# Receives (batch element, weights[heads x T_q x T_k]) after a forward pass.
WeightsHook = Callable[[int, np.ndarray], None]

_num_threads = 1


def set_num_threads(n_threads: int) -> None:
    global _num_threads
    if n_threads < 1:
        raise ContractError(f'thread count must be positive, got {n_threads}')
    _num_threads = n_threads


def get_num_threads() -> int:
    return _num_threads


def _for_each(n_items: int, fn: Callable[[int], None]) -> None:
    # Elements write disjoint slices, so the result does not depend on
    # execution order.
    workers = min(_num_threads, n_items)
    if workers <= 1:
        for i in range(n_items):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as executor:
        list(executor.map(fn, range(n_items)))


@dataclass(frozen=True, slots=True)
class RaggedBatch:
    values: Tensor
    offsets: tuple[int, ...]

    def __post_init__(self) -> None:
        offsets = self.offsets
        if self.values.ndim != 2:
            raise DimensionError(f'ragged values must be 2-D, got {self.values.shape}')
        if len(offsets) < 2 or offsets[0] != 0:
            raise ContractError(f'offsets must start at 0 and delimit >= 1 element: {offsets}')
        if offsets[-1] != self.values.shape[0]:
            raise ContractError(
                f'last offset {offsets[-1]} != row count {self.values.shape[0]}'
            )
        if any(hi <= lo for lo, hi in zip(offsets[:-1], offsets[1:])):
            raise ContractError(f'every sequence needs at least one row: {offsets}')

    @property
    def batch_size(self) -> int:
        return len(self.offsets) - 1

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in zip(self.offsets[:-1], self.offsets[1:]))

    @property
    def max_length(self) -> int:
        return max(self.lengths)

    def element(self, i: int) -> Tensor:
        return self.values[self.offsets[i]:self.offsets[i + 1]]

    def split(self) -> list[Tensor]:
        return [self.element(i) for i in range(self.batch_size)]

    def first_rows(self) -> Tensor:
        """Row 0 of every element, e.g. the [CLS] tokens."""
        return take_rows(self.values, self.offsets[:-1])

    def with_values(self, values: Tensor) -> 'RaggedBatch':
        return RaggedBatch(values, self.offsets)


def build(seqs: Sequence[Tensor]) -> RaggedBatch:
    if not seqs:
        raise ContractError('cannot build a ragged batch from zero sequences')
    width = seqs[0].shape[-1]
    for seq in seqs:
        if seq.ndim != 2:
            raise DimensionError(f'sequences must be 2-D, got {seq.shape}')
        if seq.shape[1] != width:
            raise DimensionError(f'sequence width {seq.shape[1]} != {width}')
    offsets = (0, *np.cumsum([seq.shape[0] for seq in seqs]).tolist())
    return RaggedBatch(concat(seqs, axis=0), tuple(int(o) for o in offsets))


# ATTENTION ============================================================


def _split_heads(block: np.ndarray, n_heads: int) -> np.ndarray:
    n_rows, width = block.shape
    return block.reshape(n_rows, n_heads, width // n_heads).transpose(1, 0, 2)


def _merge_heads(block: np.ndarray) -> np.ndarray:
    n_heads, n_rows, head_dim = block.shape
    return block.transpose(1, 0, 2).reshape(n_rows, n_heads * head_dim)


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    q_offsets: tuple[int, ...],
    kv_offsets: tuple[int, ...],
    n_heads: int,
    on_weights: Union[WeightsHook, None]
) -> Tensor:
    scale = 1.0 / sqrt(q.shape[1] // n_heads)
    n_elements = len(q_offsets) - 1
    out = np.empty_like(q.data)
    weights: list[np.ndarray] = [np.empty(0)] * n_elements

    def _rows(i: int) -> tuple[slice, slice]:
        return (
            slice(q_offsets[i], q_offsets[i + 1]),
            slice(kv_offsets[i], kv_offsets[i + 1])
        )

    def _forward_element(i: int) -> None:
        q_rows, kv_rows = _rows(i)
        qh = _split_heads(q.data[q_rows], n_heads)
        kh = _split_heads(k.data[kv_rows], n_heads)
        vh = _split_heads(v.data[kv_rows], n_heads)
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        weights[i] = probs
        out[q_rows] = _merge_heads(probs @ vh)

    _for_each(n_elements, _forward_element)
    if on_weights is not None:
        for i, probs in enumerate(weights):
            on_weights(i, probs.copy())

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)

        def _backward_element(i: int) -> None:
            q_rows, kv_rows = _rows(i)
            qh = _split_heads(q.data[q_rows], n_heads)
            kh = _split_heads(k.data[kv_rows], n_heads)
            vh = _split_heads(v.data[kv_rows], n_heads)
            probs = weights[i]
            g_out = _split_heads(g[q_rows], n_heads)
            g_probs = g_out @ vh.transpose(0, 2, 1)
            g_scores = probs * (g_probs - (g_probs * probs).sum(axis=-1, keepdims=True))
            gq[q_rows] = _merge_heads(g_scores @ kh) * scale
            gk[kv_rows] = _merge_heads(g_scores.transpose(0, 2, 1) @ qh) * scale
            gv[kv_rows] = _merge_heads(probs.transpose(0, 2, 1) @ g_out)

        _for_each(n_elements, _backward_element)
        return gq, gk, gv

    return emit('ragged_attention', (q, k, v), out, _backward)


def ragged_attention(
    queries: RaggedBatch,
    keys: RaggedBatch,
    values: RaggedBatch,
    params: AttentionParams,
    on_weights: Union[WeightsHook, None] = None
) -> RaggedBatch:
    """
    Unmasked multi-head attention of every element's queries over the
    same element's keys and values.

    Parameters
    ----------
    queries, keys, values : RaggedBatch
        Inputs to the query, key and value projections. ``keys`` and
        ``values`` must share offsets; all three share the batch count.
    params : AttentionParams
        Projections and head count.
    on_weights : callable, optional
        Called with each element's attention weights.

    Returns
    -------
    RaggedBatch
        Projected attention output with the offsets of ``queries``.
    """
    if queries.batch_size != keys.batch_size:
        raise ContractError(
            f'batch count {queries.batch_size} != {keys.batch_size}'
        )
    if keys.offsets != values.offsets:
        raise ContractError('keys and values must share offsets')
    d_model = params.d_model
    for name, batch in (('queries', queries), ('keys', keys), ('values', values)):
        if batch.width != d_model:
            raise DimensionError(f'{name} width {batch.width} != d_model {d_model}')

    context = _attend(
        params.q(queries.values),
        params.k(keys.values),
        params.v(values.values),
        queries.offsets,
        keys.offsets,
        params.n_heads,
        on_weights
    )
    return queries.with_values(params.out(context))


def ragged_cross_attention(
    q: RaggedBatch,
    kv: RaggedBatch,
    proj: AttentionParams,
    on_weights: Union[WeightsHook, None] = None
) -> RaggedBatch:
    return ragged_attention(q, kv, kv, proj, on_weights)
