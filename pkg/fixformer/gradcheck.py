"""Central finite-difference verification of analytic gradients."""

__all__ = ['GradcheckConfig', 'GroupResult', 'check_gradients', 'parameter_group']

import logging
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np

from .data import Example
from .errors import ContractError
from .model import FixationFormer
from .tensor import GradTape, cross_entropy, zero_grad

logger = logging.getLogger(__name__)

# Receives (parameter name, analytic gradient) and returns the gradient to check.
GradientHook = Callable[[str, np.ndarray], np.ndarray]

_NORM_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class GradcheckConfig:
    step: float = 1e-5
    tolerance: float = 1e-4
    # Entries sampled per tensor; 0 checks every entry.
    max_entries: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.step <= 0 or self.tolerance <= 0 or self.max_entries < 0:
            raise ContractError('step and tolerance must be positive, max_entries >= 0')


@dataclass(frozen=True, slots=True)
class GroupResult:
    group: str
    n_tensors: int
    n_entries: int
    max_abs_error: float
    rel_error: float
    passed: bool


def parameter_group(name: str) -> str:
    """Name prefix up to the first layer index, e.g. ``image.layers.0``."""
    parts = name.split('.')
    for i, part in enumerate(parts):
        if part.isdigit():
            return '.'.join(parts[:i + 1])
    return parts[0] if len(parts) > 1 else name


def check_gradients(
    model: FixationFormer,
    examples: Sequence[Example],
    cfg: GradcheckConfig,
    corrupt: Union[GradientHook, None] = None
) -> list[GroupResult]:
    """
    Compare backward gradients of the batch cross-entropy with central
    differences, per parameter group.

    Trainable tensors that are exactly zero (biases, LoRA ``B``, [CLS]) are
    first filled with small random values so that every path carries
    signal. The model is modified in place.
    """
    if not examples:
        raise ContractError('gradient check needs at least one example')
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable()
    for _, tensor in params:
        if not tensor.data.any():
            tensor.data = 0.02 * rng.standard_normal(tensor.shape)

    variant = model.variant
    images = [ex.image for ex in examples] if variant.uses_image else None
    gazes = [ex.gaze for ex in examples] if variant.uses_gaze else None
    labels = [ex.label for ex in examples]

    def _loss() -> float:
        return cross_entropy(model.logits(images, gazes), labels).item()

    zero_grad(t for _, t in params)
    with GradTape() as tape:
        loss = cross_entropy(model.logits(images, gazes), labels)
    tape.backward(loss)

    analytic: dict[str, list[np.ndarray]] = defaultdict(list)
    numeric: dict[str, list[np.ndarray]] = defaultdict(list)
    counts: dict[str, int] = defaultdict(int)
    for name, tensor in params:
        grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        if corrupt is not None:
            grad = corrupt(name, grad)
        flat = tensor.data.reshape(-1)
        if cfg.max_entries and flat.size > cfg.max_entries:
            picked = np.sort(rng.choice(flat.size, cfg.max_entries, replace=False))
        else:
            picked = np.arange(flat.size)

        estimates = np.empty(picked.size)
        for k, index in enumerate(picked):
            original = flat[index]
            flat[index] = original + cfg.step
            upper = _loss()
            flat[index] = original - cfg.step
            lower = _loss()
            flat[index] = original
            estimates[k] = (upper - lower) / (2.0 * cfg.step)

        group = parameter_group(name)
        analytic[group].append(grad.reshape(-1)[picked])
        numeric[group].append(estimates)
        counts[group] += 1

    results = []
    for group in analytic:
        a = np.concatenate(analytic[group])
        n = np.concatenate(numeric[group])
        rel = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), _NORM_FLOOR))
        results.append(GroupResult(
            group=group,
            n_tensors=counts[group],
            n_entries=int(a.size),
            max_abs_error=float(np.abs(a - n).max()),
            rel_error=rel,
            passed=rel < cfg.tolerance
        ))
        logger.debug(f'{group}: rel={rel:.3e}')
    return results
