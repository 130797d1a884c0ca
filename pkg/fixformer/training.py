"""
Optimization and evaluation.

Training minimizes cross-entropy with AdamW under a cosine learning-rate
schedule. The image encoder stays frozen behind LoRA adapters; after
every epoch the model is scored on the early-stopping split and the best
state (ties go to the earliest epoch) is restored before the final test
evaluation.
"""

__all__ = [
    'AblationResult',
    'AdamWState',
    'EpochRecord',
    'TrainConfig',
    'TrainResult',
    'VariantSummary',
    'adamw_step',
    'cosine_lr',
    'decays',
    'evaluate',
    'run_ablation',
    'train'
]

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from math import cos, isfinite, pi
from typing import Union

import numpy as np

from .data import DatasetSplits, Example, batches
from .errors import ContractError, DivergenceError, NonFiniteError
from .image import ModelConfig
from .integration import IntegrationVariant
from .metrics import MetricsReport, compute_metrics
from .model import FixationFormer
from .tensor import GradTape, Tensor, cross_entropy, zero_grad

logger = logging.getLogger(__name__)

STOPPING_METRICS = ('accuracy', 'macro_f1', 'auc')
STOPPING_SPLITS = ('val', 'test')
# Parameter names never subject to weight decay, besides 1-D tensors.
_NO_DECAY_NAMES = ('pos_embed', 'cls_token', 'gaze_cls')


@dataclass(frozen=True, slots=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0
    early_stopping_metric: str = 'accuracy'
    # 'test' reproduces selection on the test set; 'val' is the sound protocol.
    early_stopping_split: str = 'val'
    # Seeds per variant in an ablation run.
    repeats: int = 1
    variants: tuple[str, ...] = ('image_only', 'gaze_only', 'cross_attention', 'two_way')

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ContractError(f'epochs must be >= 0, got {self.epochs}')
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError(f'lr and weight_decay must be >= 0: {self.lr}, {self.weight_decay}')
        if self.batch_size < 1 or self.repeats < 1:
            raise ContractError('batch_size and repeats must be >= 1')
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ContractError(f'betas must be two values in [0, 1), got {self.betas}')
        if self.eps <= 0 or self.lora_rank < 1 or self.lora_alpha <= 0:
            raise ContractError('eps, lora_rank and lora_alpha must be positive')
        if self.early_stopping_metric not in STOPPING_METRICS:
            raise ContractError(f'early_stopping_metric must be one of {STOPPING_METRICS}')
        if self.early_stopping_split not in STOPPING_SPLITS:
            raise ContractError(f'early_stopping_split must be one of {STOPPING_SPLITS}')
        for variant in self.variants:
            try:
                IntegrationVariant(variant)
            except ValueError as err:
                raise ContractError(f'unknown variant {variant!r} in variants') from err


# OPTIMIZER ============================================================


@dataclass(slots=True)
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, tensor: Tensor) -> bool:
    """Weight decay applies to matrices only, minus embeddings and [CLS] tokens."""
    return tensor.ndim >= 2 and name.rsplit('.', 1)[-1] not in _NO_DECAY_NAMES


def adamw_step(
    params: Sequence[tuple[str, Tensor]],
    grads: Mapping[str, Union[np.ndarray, None]],
    state: AdamWState,
    t: int,
    lr_t: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8
) -> None:
    """
    One AdamW update, in place.

    Decay is decoupled: ``p <- p - lr_t * wd * p`` first, then the
    bias-corrected Adam step. A missing gradient counts as zero.
    """
    if t < 1:
        raise ContractError(f'step index must be >= 1, got {t}')
    beta1, beta2 = betas
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params:
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        elif grad.shape != param.shape:
            raise ContractError(f'{name}: gradient {grad.shape} against parameter {param.shape}')

        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * grad if m is None else beta1 * m + (1.0 - beta1) * grad
        v = (1.0 - beta2) * grad * grad if v is None else beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v

        data = param.data
        if weight_decay and decays(name, param):
            data = data - lr_t * weight_decay * data
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = data - lr_t * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """``lr_max * (1 + cos(pi * step / total_steps)) / 2``, never below 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f'step {step} outside [0, {total_steps}]')
    if total_steps == 0:
        return lr_max
    return max(0.0, lr_max * (1.0 + cos(pi * step / total_steps)) / 2.0)


# EVALUATION ===========================================================


def _inputs(model: FixationFormer, batch: Sequence[Example]) -> tuple:
    variant = model.variant
    images = [ex.image for ex in batch] if variant.uses_image else None
    gazes = [ex.gaze for ex in batch] if variant.uses_gaze else None
    return images, gazes


def evaluate(
    model: FixationFormer, examples: Sequence[Example], batch_size: int = 64
) -> MetricsReport:
    if not examples:
        raise ContractError('cannot evaluate on an empty split')
    probs = [
        model.predict_proba(*_inputs(model, batch)) for batch in batches(examples, batch_size)
    ]
    return compute_metrics([ex.label for ex in examples], np.concatenate(probs, axis=0))


# TRAINING =============================================================


@dataclass(frozen=True, slots=True)
class EpochRecord:
    epoch: int
    # Mean training loss; NaN for the untrained epoch 0.
    train_loss: float
    stopping_metric: float
    lr: float


@dataclass(frozen=True, slots=True)
class TrainResult:
    best_epoch: int
    history: tuple[EpochRecord, ...]
    test_report: MetricsReport
    stopping_report: MetricsReport
    best_state: dict[str, np.ndarray]


def _train_step(
    model: FixationFormer,
    params: list[tuple[str, Tensor]],
    batch: Sequence[Example],
    epoch: int,
    step: int
) -> float:
    zero_grad(t for _, t in params)
    try:
        with GradTape() as tape:
            logits = model.logits(*_inputs(model, batch))
            loss = cross_entropy(logits, [ex.label for ex in batch])
        value = loss.item()
        if not isfinite(value):
            raise DivergenceError(f'loss {value} at epoch {epoch}, step {step}')
        tape.backward(loss)
    except NonFiniteError as err:
        raise DivergenceError(f'epoch {epoch}, step {step}: {err}') from err
    return value


def train(
    model: FixationFormer,
    splits: DatasetSplits,
    cfg: TrainConfig,
    on_epoch: Union[Callable[[EpochRecord], None], None] = None
) -> TrainResult:
    """
    Train ``model`` in place and leave it at its best epoch.

    Epoch 0 is the untrained model, so ``epochs=0`` yields a valid run
    reporting the initial state.
    """
    splits.require_nonempty()
    stopping_split = splits.by_name(cfg.early_stopping_split)
    metric = cfg.early_stopping_metric
    params = model.trainable()
    state = AdamWState()
    rng = np.random.default_rng([cfg.seed, 2])
    n_batches = -(-len(splits.train) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    report = evaluate(model, stopping_split, cfg.batch_size)
    best_value = getattr(report, metric)
    best_epoch, best_report, best_state = 0, report, model.state_dict()
    history = [EpochRecord(0, float('nan'), best_value, cfg.lr)]
    logger.info(f'Epoch 0: {cfg.early_stopping_split} {metric}={best_value:.4f}')

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(splits.train))
        losses = []
        lr_t = cfg.lr
        for batch in batches(splits.train, cfg.batch_size, order):
            losses.append(_train_step(model, params, batch, epoch, step))
            lr_t = cosine_lr(step, total_steps, cfg.lr)
            step += 1
            adamw_step(
                params, {name: t.grad for name, t in params}, state, step, lr_t,
                cfg.weight_decay, cfg.betas, cfg.eps
            )

        report = evaluate(model, stopping_split, cfg.batch_size)
        value = getattr(report, metric)
        record = EpochRecord(epoch, float(np.mean(losses)), value, lr_t)
        history.append(record)
        logger.info(
            f'Epoch {epoch}/{cfg.epochs}: loss={record.train_loss:.4f} '
            f'{cfg.early_stopping_split} {metric}={value:.4f} lr={lr_t:.3e}'
        )
        if on_epoch is not None:
            on_epoch(record)
        if value > best_value:
            best_value, best_epoch, best_report = value, epoch, report
            best_state = model.state_dict()

    model.load_state_dict(best_state)
    logger.info(f'Best epoch {best_epoch} with {metric}={best_value:.4f}')
    return TrainResult(
        best_epoch=best_epoch,
        history=tuple(history),
        test_report=evaluate(model, splits.test, cfg.batch_size),
        stopping_report=best_report,
        best_state=best_state
    )


# ABLATION =============================================================


@dataclass(frozen=True, slots=True)
class VariantSummary:
    variant: str
    seeds: tuple[int, ...]
    accuracy: tuple[float, ...]
    macro_f1: tuple[float, ...]
    auc: tuple[float, ...]

    def mean_std(self, metric: str) -> tuple[float, float]:
        values = np.asarray(getattr(self, metric))
        return float(values.mean()), float(values.std())


@dataclass(frozen=True, slots=True)
class AblationResult:
    summaries: tuple[VariantSummary, ...]

    def by_variant(self, variant: str) -> VariantSummary:
        for summary in self.summaries:
            if summary.variant == IntegrationVariant(variant).value:
                return summary
        raise ContractError(f'variant {variant} was not part of this ablation')


def run_ablation(
    splits: DatasetSplits,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    image_weights: Union[Mapping[str, np.ndarray], None] = None
) -> AblationResult:
    """Train every variant in ``cfg.variants`` for ``cfg.repeats`` consecutive seeds."""
    summaries = []
    for name in cfg.variants:
        variant = IntegrationVariant(name)
        seeds = tuple(cfg.seed + r for r in range(cfg.repeats))
        reports = []
        for seed in seeds:
            logger.info(f'--- {variant.value}, seed {seed} ---')
            model = FixationFormer.create(
                model_cfg, variant, seed, cfg.lora_rank, cfg.lora_alpha, image_weights
            )
            reports.append(train(model, splits, replace(cfg, seed=seed)).test_report)
        summaries.append(VariantSummary(
            variant=variant.value,
            seeds=seeds,
            accuracy=tuple(r.accuracy for r in reports),
            macro_f1=tuple(r.macro_f1 for r in reports),
            auc=tuple(r.auc for r in reports)
        ))
    return AblationResult(tuple(summaries))
