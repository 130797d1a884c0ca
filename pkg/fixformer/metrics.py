"""Classification metrics: accuracy, macro F1 and exact pairwise ROC-AUC."""

__all__ = ['MetricsReport', 'compute_metrics', 'pairwise_auc']

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any, Union

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

# Reported when no class has both positives and negatives.
CHANCE_AUC = 0.5


@dataclass(frozen=True, slots=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    auc: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    # confusion[true][predicted]
    confusion: tuple[tuple[int, ...], ...]
    # Classes left out of the AUC average for lack of positives or negatives.
    auc_skipped: tuple[int, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ('precision', 'recall', 'f1', 'support', 'auc_skipped'):
            data[key] = list(data[key])
        data['confusion'] = [list(row) for row in self.confusion]
        return data


def pairwise_auc(positive: np.ndarray, negative: np.ndarray) -> float:
    """Share of (positive, negative) pairs ranked correctly; ties count one half."""
    diff = positive[:, None] - negative[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (positive.size * negative.size))


def _macro_auc(labels: np.ndarray, scores: np.ndarray) -> tuple[float, tuple[int, ...]]:
    n_classes = scores.shape[1]
    # Binary tasks are scored on the positive class only.
    classes = (1,) if n_classes == 2 else tuple(range(n_classes))
    aucs: list[float] = []
    skipped: list[int] = []
    for c in classes:
        is_pos = labels == c
        if is_pos.all() or not is_pos.any():
            skipped.append(c)
            continue
        aucs.append(pairwise_auc(scores[is_pos, c], scores[~is_pos, c]))
    if skipped:
        logger.warning(f'AUC skipped {len(skipped)} class(es) without positives or negatives: {skipped}')
    if not aucs:
        return CHANCE_AUC, tuple(skipped)
    return sum(aucs) / len(aucs), tuple(skipped)


def compute_metrics(
    labels: Sequence[int],
    scores: Union[np.ndarray, Sequence[Sequence[float]]]
) -> MetricsReport:
    """
    Metrics of class-probability rows against integer labels.

    Predictions are row-wise argmaxes. Macro F1 averages the per-class F1
    over every class, counting undefined ones as 0. AUC is one-vs-rest and
    macro averaged for three or more classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or labels.ndim != 1:
        raise DimensionError(f'labels {labels.shape} and scores {scores.shape}')
    if labels.shape[0] != scores.shape[0]:
        raise ContractError(f'{labels.shape[0]} labels against {scores.shape[0]} score rows')
    if labels.size == 0:
        raise ContractError('metrics need at least one sample')
    n_classes = scores.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f'labels must lie in [0, {n_classes})')

    predicted = scores.argmax(axis=1)
    class_ids = list(range(n_classes))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, predicted, labels=class_ids, zero_division=0
    )
    auc, skipped = _macro_auc(labels, scores)
    return MetricsReport(
        accuracy=float(np.mean(predicted == labels)),
        macro_f1=float(np.mean(f1)),
        auc=auc,
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        support=tuple(int(v) for v in support),
        confusion=tuple(
            tuple(int(v) for v in row)
            for row in confusion_matrix(labels, predicted, labels=class_ids)
        ),
        auc_skipped=skipped
    )
