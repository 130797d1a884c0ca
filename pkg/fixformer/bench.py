"""
Ragged against padded attention: buffer accounting and throughput.

The padded baseline stores ``B x max(T) x d`` values and masks padded keys
with ``-inf`` before the softmax; the ragged path stores ``sum(T) x d``
and needs no mask.
"""

__all__ = ['BENCH_PROFILES', 'BenchConfig', 'BenchResult', 'padded_attention', 'profile_lengths', 'run_bench']

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from math import sqrt
from time import perf_counter

import numpy as np

from .errors import ContractError
from .layers import AttentionParams, Projection, init_attention
from .ragged import build, ragged_attention
from .tensor import Tensor, nan_guard, track_allocations

logger = logging.getLogger(__name__)

BENCH_PROFILES = ('equal', 'mixed', 'skewed')


@dataclass(frozen=True, slots=True)
class BenchConfig:
    profile: str = 'skewed'
    batch_size: int = 20
    d_model: int = 64
    n_heads: int = 4
    repeats: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.profile not in BENCH_PROFILES:
            raise ContractError(f'profile must be one of {BENCH_PROFILES}, got {self.profile!r}')
        if min(self.batch_size, self.d_model, self.n_heads, self.repeats) < 1:
            raise ContractError('batch_size, d_model, n_heads and repeats must be positive')
        if self.d_model % self.n_heads:
            raise ContractError(f'd_model {self.d_model} is not divisible by {self.n_heads} heads')


def profile_lengths(profile: str, batch_size: int) -> list[int]:
    """
    ``equal``: every sequence has length 16. ``mixed``: lengths alternate
    between 1 and 32. ``skewed``: 90% have length 4, the rest 64.
    """
    if profile == 'equal':
        return [16] * batch_size
    if profile == 'mixed':
        return [1 if i % 2 == 0 else 32 for i in range(batch_size)]
    if profile == 'skewed':
        n_long = max(1, round(0.1 * batch_size))
        return [4] * (batch_size - n_long) + [64] * n_long
    raise ContractError(f'unknown length profile {profile!r}')


def padded_attention(
    padded: np.ndarray, lengths: Sequence[int], params: AttentionParams
) -> np.ndarray:
    """Masked multi-head self-attention over a ``B x T_max x d`` array."""
    batch, t_max, d_model = padded.shape
    n_heads = params.n_heads
    head_dim = d_model // n_heads

    def _project(proj: Projection) -> np.ndarray:
        flat = proj(Tensor(padded.reshape(-1, d_model))).data
        return flat.reshape(batch, t_max, n_heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = _project(params.q), _project(params.k), _project(params.v)
    scores = q @ k.transpose(0, 1, 3, 2) / sqrt(head_dim)
    key_mask = np.arange(t_max)[None, :] >= np.asarray(lengths)[:, None]
    scores = np.where(key_mask[:, None, None, :], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(-1, d_model)
    return params.out(Tensor(context)).data.reshape(batch, t_max, d_model)


@dataclass(frozen=True, slots=True)
class BenchResult:
    profile: str
    lengths: tuple[int, ...]
    d_model: int
    # Values held by the ragged buffer, measured by the allocation hook.
    ragged_values: int
    # Values held by the padded buffer, measured by the allocation hook.
    padded_values: int
    ratio: float
    # sum(T) / (B * max(T)).
    closed_form_ratio: float
    ragged_seconds: float
    padded_seconds: float

    @property
    def n_tokens(self) -> int:
        return sum(self.lengths)

    @property
    def ragged_tokens_per_second(self) -> float:
        return self.n_tokens / self.ragged_seconds if self.ragged_seconds > 0 else float('inf')

    @property
    def padded_tokens_per_second(self) -> float:
        return self.n_tokens / self.padded_seconds if self.padded_seconds > 0 else float('inf')


def run_bench(cfg: BenchConfig) -> BenchResult:
    rng = np.random.default_rng(cfg.seed)
    lengths = profile_lengths(cfg.profile, cfg.batch_size)
    d_model = cfg.d_model
    seqs = [Tensor(rng.standard_normal((t, d_model))) for t in lengths]
    params = init_attention(d_model, cfg.n_heads, rng)
    t_max = max(lengths)

    with track_allocations() as ragged_log:
        batch = build(seqs)
    padded_array = np.zeros((len(lengths), t_max, d_model))
    for i, seq in enumerate(seqs):
        padded_array[i, :seq.shape[0]] = seq.data
    with track_allocations() as padded_log:
        padded = Tensor(padded_array)

    with nan_guard(False):
        start = perf_counter()
        for _ in range(cfg.repeats):
            ragged_attention(batch, batch, batch, params)
        ragged_seconds = (perf_counter() - start) / cfg.repeats

        start = perf_counter()
        for _ in range(cfg.repeats):
            padded_attention(padded.data, lengths, params)
        padded_seconds = (perf_counter() - start) / cfg.repeats

    result = BenchResult(
        profile=cfg.profile,
        lengths=tuple(lengths),
        d_model=d_model,
        ragged_values=ragged_log.n_values,
        padded_values=padded_log.n_values,
        ratio=ragged_log.n_values / padded_log.n_values,
        closed_form_ratio=sum(lengths) / (len(lengths) * t_max),
        ragged_seconds=ragged_seconds,
        padded_seconds=padded_seconds
    )
    logger.info(
        f'{cfg.profile}: ragged {result.ragged_values} values, '
        f'padded {result.padded_values} values, ratio {result.ratio:.4f}'
    )
    return result
