"""Labelled examples and their train/val/test splits."""

__all__ = [
    'DatasetSplits',
    'Example',
    'batches',
    'load_dataset_files',
    'splits_from_synthetic'
]

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from .errors import ContractError, DatasetIOError, FormatError
from .formats import gaze_file_kind, load_fixations, load_image, load_raw_gaze
from .gaze import DetectionConfig, FixationSequence, RawGazeSample, detect_or_centroid
from .image import ImageSample
from .synthetic import MANIFEST_HEADER, MANIFEST_NAME, SPLITS, SyntheticDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Example:
    id: str
    image: ImageSample
    gaze: FixationSequence
    label: int


@dataclass(frozen=True, slots=True)
class DatasetSplits:
    train: tuple[Example, ...]
    val: tuple[Example, ...]
    test: tuple[Example, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for name in SPLITS:
            ids = {example.id for example in getattr(self, name)}
            if seen & ids:
                raise ContractError(f'split {name} shares sample ids with another split')
            seen |= ids

    def require_nonempty(self) -> None:
        for name in SPLITS:
            if not getattr(self, name):
                raise ContractError(f'split {name} is empty')

    @property
    def sizes(self) -> dict[str, int]:
        return {name: len(getattr(self, name)) for name in SPLITS}

    def by_name(self, name: str) -> tuple[Example, ...]:
        if name not in SPLITS:
            raise ContractError(f'unknown split {name!r}')
        return getattr(self, name)


def batches(
    examples: Sequence[Example],
    batch_size: int,
    order: Union[np.ndarray, None] = None
) -> Iterator[list[Example]]:
    indices = np.arange(len(examples)) if order is None else order
    for lo in range(0, len(indices), batch_size):
        yield [examples[i] for i in indices[lo:lo + batch_size]]


def _fixations(
    samples: Sequence[RawGazeSample], detection: DetectionConfig, counter: list[int]
) -> FixationSequence:
    seq, fell_back = detect_or_centroid(samples, detection)
    if fell_back:
        counter[0] += 1
    return seq


def _label(value: object, where: str) -> int:
    try:
        number = float(value)
    except (TypeError, ValueError):
        number = float('nan')
    if not number.is_integer() or number < 0:
        raise FormatError(f'{where}: label {value!r} is not a non-negative integer')
    return int(number)


def _warn_fallbacks(n_fallback: int, n_total: int) -> None:
    if n_fallback:
        logger.warning(
            f'{n_fallback} of {n_total} samples had no qualifying fixation window; '
            'used a single centroid fixation instead'
        )


def splits_from_synthetic(
    dataset: SyntheticDataset, detection: DetectionConfig
) -> DatasetSplits:
    """Detect fixations on every generated recording and group by split."""
    counter = [0]
    grouped: dict[str, list[Example]] = {name: [] for name in SPLITS}
    for sample in dataset.samples:
        grouped[sample.split].append(Example(
            id=sample.id,
            image=ImageSample(sample.pixels),
            gaze=_fixations(sample.gaze, detection, counter),
            label=sample.label
        ))
    _warn_fallbacks(counter[0], len(dataset.samples))
    return DatasetSplits(**{name: tuple(examples) for name, examples in grouped.items()})


def load_dataset_files(
    directory: Union[str, Path],
    detection: DetectionConfig,
    image_extent: Union[tuple[float, float], None] = None
) -> DatasetSplits:
    """
    Read a dataset directory described by ``manifest.csv``.

    Gaze files may hold raw samples (fixations are detected) or fixations
    (used as given); the header tells them apart. Images may be PGM or
    ``.fxt`` files.
    """
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetIOError(f'{manifest}: manifest not found')
    try:
        frame = pd.read_csv(
            manifest, dtype={'id': str, 'image_path': str, 'gaze_path': str, 'split': str}
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as err:
        raise FormatError(f'{manifest}: {err}') from err
    if tuple(frame.columns) != MANIFEST_HEADER:
        raise FormatError(f'{manifest}: expected header {",".join(MANIFEST_HEADER)}')

    counter = [0]
    grouped: dict[str, list[Example]] = {name: [] for name in SPLITS}
    for row in frame.itertuples(index=False):
        if row.split not in grouped:
            raise FormatError(f'{manifest}: unknown split {row.split!r} for {row.id}')
        gaze_path = root / row.gaze_path
        if gaze_file_kind(gaze_path) == 'raw':
            gaze = _fixations(load_raw_gaze(gaze_path, image_extent), detection, counter)
        else:
            gaze = load_fixations(gaze_path)
        grouped[row.split].append(Example(
            id=row.id,
            image=ImageSample(load_image(root / row.image_path)),
            gaze=gaze,
            label=_label(row.label, f'{manifest} ({row.id})')
        ))
    _warn_fallbacks(counter[0], len(frame))
    sizes = ', '.join(f'{name}={len(examples)}' for name, examples in grouped.items())
    logger.info(f'Loaded dataset from {root}: {sizes}')
    return DatasetSplits(**{name: tuple(examples) for name, examples in grouped.items()})
