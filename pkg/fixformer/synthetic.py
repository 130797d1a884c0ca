"""
Synthetic gaze-guided classification tasks.

Each class owns a region on a circle around the image center. The label
is carried by two channels whose balance is set by the gaze
informativeness ``lam``:

* the image shows a Gaussian blob at the class region with amplitude
  ``0.8 * (1 - lam)`` on a noisy background;
* each fixation lands on the class region with probability ``lam`` (and
  then dwells for a class-specific time), otherwise on a uniformly chosen
  region with a class-independent dwell.

At ``lam = 0`` gaze is label-independent; at ``lam = 1`` images are.
Every sample is a pure function of ``(spec, index)``.
"""

__all__ = [
    'PRESETS',
    'SyntheticDataset',
    'SyntheticSample',
    'SyntheticSpec',
    'class_centers',
    'emit_dataset_files',
    'generate',
    'spec_from_preset'
]

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import isclose, pi
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from .errors import ContractError, DatasetIOError
from .formats import save_image, save_raw_gaze
from .gaze import RawGazeSample

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
MANIFEST_NAME = 'manifest.csv'
MANIFEST_HEADER = ('id', 'image_path', 'gaze_path', 'label', 'split')

_REGION_RADIUS = 0.3
_BLOB_SIGMA = 0.08
_BLOB_AMPLITUDE = 0.8
_BACKGROUND = 0.2
_LOCATION_JITTER = 0.04
_TREMOR = 0.002
_SACCADE_SAMPLES = 3
_INVALID_RATE = 0.01

PRESETS: dict[str, dict[str, Any]] = {
    'standard': {'n_classes': 3, 'gaze_informativeness': 0.5},
    'gaze_heavy': {'n_classes': 3, 'gaze_informativeness': 0.8},
    'image_only_signal': {'n_classes': 3, 'gaze_informativeness': 0.0},
    'gaze_only_signal': {'n_classes': 3, 'gaze_informativeness': 1.0},
    'imbalanced': {'n_classes': 2, 'gaze_informativeness': 0.0, 'priors': (0.8, 0.2)}
}


@dataclass(frozen=True, slots=True)
class SyntheticSpec:
    n_classes: int = 3
    n_train: int = 120
    n_val: int = 40
    n_test: int = 40
    image_size: int = 64
    gaze_informativeness: float = 0.5
    # Standard deviation of the pixel noise.
    noise: float = 0.1
    # Class probabilities; uniform when empty.
    priors: tuple[float, ...] = ()
    seed: int = 0
    min_fixations: int = 4
    max_fixations: int = 24
    sample_rate_hz: float = 60.0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ContractError(f'n_classes must be >= 2, got {self.n_classes}')
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ContractError('every split needs at least one sample')
        if self.image_size < 1 or self.sample_rate_hz <= 0 or self.noise < 0:
            raise ContractError('image_size, sample_rate_hz and noise must be positive')
        if not 0.0 <= self.gaze_informativeness <= 1.0:
            raise ContractError(
                f'gaze_informativeness must lie in [0, 1], got {self.gaze_informativeness}'
            )
        if not 1 <= self.min_fixations <= self.max_fixations:
            raise ContractError(
                f'fixation counts {self.min_fixations}..{self.max_fixations} are invalid'
            )
        if self.priors:
            if len(self.priors) != self.n_classes:
                raise ContractError(f'{len(self.priors)} priors for {self.n_classes} classes')
            if min(self.priors) < 0 or not isclose(sum(self.priors), 1.0, abs_tol=1e-9):
                raise ContractError(f'priors must be non-negative and sum to 1: {self.priors}')

    @property
    def class_priors(self) -> np.ndarray:
        if self.priors:
            return np.asarray(self.priors, dtype=np.float64)
        return np.full(self.n_classes, 1.0 / self.n_classes)

    @property
    def n_samples(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of(self, index: int) -> str:
        if index < self.n_train:
            return 'train'
        if index < self.n_train + self.n_val:
            return 'val'
        return 'test'


def spec_from_preset(preset: str, **overrides: Any) -> SyntheticSpec:
    if preset not in PRESETS:
        raise ContractError(f'unknown preset {preset!r}; choose from {sorted(PRESETS)}')
    return SyntheticSpec(**{**PRESETS[preset], **overrides})


@dataclass(frozen=True, slots=True)
class SyntheticSample:
    id: str
    split: str
    label: int
    # Quantized to multiples of 1/255 so PGM files store them exactly.
    pixels: np.ndarray
    gaze: tuple[RawGazeSample, ...]


@dataclass(frozen=True, slots=True)
class SyntheticDataset:
    spec: SyntheticSpec
    samples: tuple[SyntheticSample, ...] = field(default_factory=tuple)

    def split(self, name: str) -> list[SyntheticSample]:
        return [s for s in self.samples if s.split == name]


def class_centers(n_classes: int) -> np.ndarray:
    """Region centers, evenly spaced on a circle, as ``(x, y)`` rows."""
    angles = 2.0 * pi * np.arange(n_classes) / n_classes
    return np.column_stack([
        0.5 + _REGION_RADIUS * np.cos(angles),
        0.5 + _REGION_RADIUS * np.sin(angles)
    ])


# GENERATION ===========================================================


def _image(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    axis = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(axis, axis, indexing='ij')
    cx, cy = class_centers(spec.n_classes)[label]
    amplitude = _BLOB_AMPLITUDE * (1.0 - spec.gaze_informativeness)
    blob = amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * _BLOB_SIGMA ** 2))
    pixels = _BACKGROUND + blob + spec.noise * rng.standard_normal((size, size))
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def _dwell_program(
    spec: SyntheticSpec, label: int, rng: np.random.Generator
) -> list[tuple[float, float, float]]:
    """``(x, y, duration)`` per fixation."""
    centers = class_centers(spec.n_classes)
    n_fixations = int(rng.integers(spec.min_fixations, spec.max_fixations + 1))
    program = []
    for _ in range(n_fixations):
        if rng.random() < spec.gaze_informativeness:
            region = label
            duration = 0.2 + 0.1 * label + rng.uniform(0.0, 0.05)
        else:
            region = int(rng.integers(spec.n_classes))
            duration = rng.uniform(0.15, 0.45)
        x, y = np.clip(
            centers[region] + _LOCATION_JITTER * rng.standard_normal(2), 0.02, 0.98
        )
        program.append((float(x), float(y), float(duration)))
    return program


def _raw_gaze(
    spec: SyntheticSpec,
    program: Sequence[tuple[float, float, float]],
    rng: np.random.Generator
) -> tuple[RawGazeSample, ...]:
    dt = 1.0 / spec.sample_rate_hz
    xs: list[float] = []
    ys: list[float] = []
    for k, (x, y, duration) in enumerate(program):
        n_dwell = max(2, int(round(duration * spec.sample_rate_hz)))
        xs.extend(x + _TREMOR * rng.standard_normal(n_dwell))
        ys.extend(y + _TREMOR * rng.standard_normal(n_dwell))
        if k + 1 < len(program):
            nx, ny, _ = program[k + 1]
            steps = np.arange(1, _SACCADE_SAMPLES + 1) / (_SACCADE_SAMPLES + 1)
            xs.extend(x + (nx - x) * steps)
            ys.extend(y + (ny - y) * steps)
    valid = rng.random(len(xs)) >= _INVALID_RATE
    return tuple(
        RawGazeSample(
            t=k * dt,
            x=float(min(max(xi, 0.0), 1.0)),
            y=float(min(max(yi, 0.0), 1.0)),
            valid=bool(ok)
        )
        for k, (xi, yi, ok) in enumerate(zip(xs, ys, valid))
    )


def _sample(spec: SyntheticSpec, index: int) -> SyntheticSample:
    rng = np.random.default_rng([spec.seed, index])
    label = int(rng.choice(spec.n_classes, p=spec.class_priors))
    pixels = _image(spec, label, rng)
    gaze = _raw_gaze(spec, _dwell_program(spec, label, rng), rng)
    split = spec.split_of(index)
    return SyntheticSample(
        id=f'{split}_{index:05d}', split=split, label=label, pixels=pixels, gaze=gaze
    )


def generate(spec: SyntheticSpec, n_threads: int = 1) -> SyntheticDataset:
    indices = range(spec.n_samples)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as executor:
            samples = tuple(executor.map(lambda i: _sample(spec, i), indices))
    else:
        samples = tuple(_sample(spec, i) for i in indices)
    return SyntheticDataset(spec=spec, samples=samples)


# FILES ================================================================


def emit_dataset_files(
    dataset: SyntheticDataset, directory: Union[str, Path], n_threads: int = 1
) -> Path:
    """
    Write ``images/<id>.pgm``, ``gaze/<id>.csv`` and ``manifest.csv``.

    Paths in the manifest are relative to ``directory``.
    """
    root = Path(directory)
    try:
        (root / 'images').mkdir(parents=True, exist_ok=True)
        (root / 'gaze').mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DatasetIOError(f'{root}: {err}') from err

    def _write(sample: SyntheticSample) -> tuple[str, str, str, int, str]:
        image_path = f'images/{sample.id}.pgm'
        gaze_path = f'gaze/{sample.id}.csv'
        save_image(sample.pixels, root / image_path)
        save_raw_gaze(sample.gaze, root / gaze_path)
        return sample.id, image_path, gaze_path, sample.label, sample.split

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as executor:
            rows = list(executor.map(_write, dataset.samples))
    else:
        rows = [_write(sample) for sample in dataset.samples]

    manifest = root / MANIFEST_NAME
    try:
        pd.DataFrame(rows, columns=list(MANIFEST_HEADER)).to_csv(
            manifest, index=False, lineterminator='\n', encoding='utf-8'
        )
    except OSError as err:
        raise DatasetIOError(f'{manifest}: {err}') from err
    logger.info(f'Wrote {len(rows)} samples to {root}')
    return manifest
