"""
Gaze recordings, fixation detection and gaze tokenization.

Raw samples are reduced to fixations with a dispersion-threshold (I-DT)
pass; each fixation then becomes one token that sums a sinusoidal encoding
of its start time with learned projections of its duration and location.
"""

__all__ = [
    'DetectionConfig',
    'Fixation',
    'FixationSequence',
    'GazeEncoderParams',
    'GazeTokens',
    'RawGazeSample',
    'clamp_samples',
    'detect_fixations',
    'detect_or_centroid',
    'encode_gaze',
    'init_gaze_encoder',
    'sinusoidal_pe',
    'spatial_pe'
]

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyGazeError,
    FixationOrderError,
    GazeDataError,
    NoFixationError
)
from .layers import trunc_normal
from .tensor import Tensor, matmul

logger = logging.getLogger(__name__)

DEFAULT_TIME_SCALE = 10000.0
DEFAULT_SPATIAL_SCALE = 0.01
# Slack for comparing sample clocks; 60 Hz timestamps rarely add up exactly.
_TIME_EPS = 1e-9


# SAMPLES AND FIXATIONS ================================================


@dataclass(frozen=True, slots=True)
class RawGazeSample:
    # Seconds from recording start.
    t: float
    # Normalized image coordinates in [0, 1].
    x: float
    y: float
    # Tracker confidence flag; invalid samples are dropped before detection.
    valid: bool = True


@dataclass(frozen=True, slots=True)
class Fixation:
    start: float
    duration: float
    x: float
    y: float

    def __post_init__(self) -> None:
        if self.start < 0 or self.duration < 0:
            raise GazeDataError(
                f'negative start or duration: start={self.start}, duration={self.duration}'
            )
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise GazeDataError(f'fixation at ({self.x}, {self.y}) is outside [0, 1]')

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True, slots=True)
class FixationSequence:
    """
    Non-empty list of fixations that do not overlap in time.

    Overlap is checked on the start-sorted order, so a sequence may be
    stored in any order; the start times carry the temporal information.
    """

    fixations: tuple[Fixation, ...]

    def __post_init__(self) -> None:
        if not self.fixations:
            raise GazeDataError('a fixation sequence needs at least one fixation')
        ordered = sorted(self.fixations, key=lambda f: f.start)
        for prev, nxt in zip(ordered[:-1], ordered[1:]):
            if prev.end > nxt.start + _TIME_EPS:
                raise FixationOrderError(
                    f'fixation ending at {prev.end:.6f}s overlaps one starting at {nxt.start:.6f}s'
                )

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> 'FixationSequence':
        """Build from ``(start, duration, x, y)`` rows."""
        return cls(tuple(Fixation(*map(float, row)) for row in rows))

    def __len__(self) -> int:
        return len(self.fixations)

    @property
    def starts(self) -> np.ndarray:
        return np.array([f.start for f in self.fixations])

    @property
    def durations(self) -> np.ndarray:
        return np.array([f.duration for f in self.fixations])

    @property
    def coords(self) -> np.ndarray:
        return np.array([[f.x, f.y] for f in self.fixations]).reshape(-1, 2)

    def as_array(self) -> np.ndarray:
        """The ``T x 4`` matrix of start, duration, x, y."""
        return np.column_stack([self.starts, self.durations, self.coords])

    def reordered(self, order: Sequence[int]) -> 'FixationSequence':
        return FixationSequence(tuple(self.fixations[i] for i in order))


def clamp_samples(samples: Sequence[RawGazeSample]) -> list[RawGazeSample]:
    """Clamp coordinates into the unit square, warning with a count."""
    clamped = []
    n_clamped = 0
    for sample in samples:
        x = min(max(sample.x, 0.0), 1.0)
        y = min(max(sample.y, 0.0), 1.0)
        if x != sample.x or y != sample.y:
            n_clamped += 1
            sample = replace(sample, x=x, y=y)
        clamped.append(sample)
    if n_clamped:
        logger.warning(f'Clamped {n_clamped} of {len(samples)} gaze samples into [0, 1]')
    return clamped


# DETECTION ============================================================


@dataclass(frozen=True, slots=True)
class DetectionConfig:
    # Bounding-box dispersion (dx + dy) limit in normalized units.
    max_dispersion: float = 0.03
    # Seconds a window must span to count as a fixation.
    min_duration: float = 0.1

    def __post_init__(self) -> None:
        if self.max_dispersion <= 0 or self.min_duration <= 0:
            raise ContractError(
                f'detection thresholds must be positive: {self.max_dispersion}, {self.min_duration}'
            )


def _valid_arrays(samples: Sequence[RawGazeSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    valid = [s for s in samples if s.valid]
    if len(valid) < 2:
        raise EmptyGazeError(f'{len(valid)} valid of {len(samples)} samples')
    t = np.array([s.t for s in valid])
    if t[0] < 0 or np.any(np.diff(t) <= 0):
        raise GazeDataError('sample times must be non-negative and strictly increasing')
    return t, np.array([s.x for s in valid]), np.array([s.y for s in valid])


def detect_fixations(
    samples: Sequence[RawGazeSample],
    max_dispersion: float = 0.03,
    min_duration: float = 0.1
) -> FixationSequence:
    """
    Dispersion-threshold fixation identification.

    A window starting at sample ``i`` is first grown to span at least
    ``min_duration``. If its dispersion ``(max x - min x) + (max y - min y)``
    is within ``max_dispersion`` it is extended sample by sample while that
    still holds, emitted as one fixation and skipped past; otherwise the
    window start advances by one sample.

    Raises
    ------
    EmptyGazeError
        Fewer than two valid samples.
    NoFixationError
        No window satisfied both thresholds.
    """
    DetectionConfig(max_dispersion, min_duration)
    t, x, y = _valid_arrays(samples)
    n = len(t)
    fixations: list[Fixation] = []

    i = 0
    while i < n:
        j = i
        while j < n and t[j] - t[i] < min_duration - _TIME_EPS:
            j += 1
        if j >= n:
            break

        x_lo, x_hi = x[i:j + 1].min(), x[i:j + 1].max()
        y_lo, y_hi = y[i:j + 1].min(), y[i:j + 1].max()
        if (x_hi - x_lo) + (y_hi - y_lo) > max_dispersion:
            i += 1
            continue

        while j + 1 < n:
            nx_lo, nx_hi = min(x_lo, x[j + 1]), max(x_hi, x[j + 1])
            ny_lo, ny_hi = min(y_lo, y[j + 1]), max(y_hi, y[j + 1])
            if (nx_hi - nx_lo) + (ny_hi - ny_lo) > max_dispersion:
                break
            x_lo, x_hi, y_lo, y_hi = nx_lo, nx_hi, ny_lo, ny_hi
            j += 1

        fixations.append(Fixation(
            start=float(t[i]),
            duration=float(t[j] - t[i]),
            x=float(x[i:j + 1].mean()),
            y=float(y[i:j + 1].mean())
        ))
        i = j + 1

    if not fixations:
        raise NoFixationError(f'{n} valid samples over {t[-1] - t[0]:.3f}s')
    return FixationSequence(tuple(fixations))


def detect_or_centroid(
    samples: Sequence[RawGazeSample], config: DetectionConfig
) -> tuple[FixationSequence, bool]:
    """
    Detect fixations, falling back to one fixation over the whole valid
    recording at its centroid when no window qualifies.

    The flag in the result is ``True`` when the fallback was taken.
    """
    try:
        return detect_fixations(samples, config.max_dispersion, config.min_duration), False
    except NoFixationError:
        t, x, y = _valid_arrays(samples)
        fallback = Fixation(
            start=float(t[0]),
            duration=float(t[-1] - t[0]),
            x=float(x.mean()),
            y=float(y.mean())
        )
        return FixationSequence((fallback,)), True


# POSITIONAL ENCODINGS =================================================


def _sinusoid_table(positions: np.ndarray, width: int, scale: float) -> np.ndarray:
    exponents = 2.0 * np.arange(width // 2) / width
    angles = positions[:, None] / np.power(scale, exponents)[None, :]
    table = np.empty((positions.shape[0], width))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def sinusoidal_pe(
    times: Sequence[float], d_model: int, time_scale: float = DEFAULT_TIME_SCALE
) -> Tensor:
    """``pe[t, 2i] = sin(t / s^(2i/d))`` and ``pe[t, 2i+1] = cos(t / s^(2i/d))``."""
    if d_model <= 0 or d_model % 2:
        raise ContractError(f'd_model must be even and positive, got {d_model}')
    positions = np.asarray(times, dtype=np.float64).reshape(-1)
    return Tensor(_sinusoid_table(positions, d_model, time_scale))


def spatial_pe(
    coords: np.ndarray, d_model: int, spatial_scale: float = DEFAULT_SPATIAL_SCALE
) -> Tensor:
    """Sinusoidal encoding of x in the first half of each row and y in the second."""
    if d_model <= 0 or d_model % 4:
        raise ContractError(f'd_model must be divisible by 4, got {d_model}')
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f'coordinates must be N x 2, got {coords.shape}')
    if coords.min() < 0.0 or coords.max() > 1.0:
        raise ContractError('coordinates must lie in [0, 1]')
    half = d_model // 2
    return Tensor(np.concatenate([
        _sinusoid_table(coords[:, 0], half, spatial_scale),
        _sinusoid_table(coords[:, 1], half, spatial_scale)
    ], axis=1))


# TOKENS ===============================================================


@dataclass(frozen=True, slots=True)
class GazeTokens:
    values: Tensor
    # Fixation locations, row-aligned with ``values``.
    coords: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape[0] != self.coords.shape[0]:
            raise DimensionError(
                f'{self.values.shape[0]} tokens against {self.coords.shape[0]} coordinates'
            )


@dataclass(slots=True)
class GazeEncoderParams:
    # Duration projection [1 x d_model].
    l_d: Tensor
    # Location projection [2 x d_model].
    l_c: Tensor
    b_d: Tensor
    b_c: Tensor

    @property
    def d_model(self) -> int:
        return self.l_d.shape[1]


def init_gaze_encoder(d_model: int, rng: np.random.Generator) -> GazeEncoderParams:
    return GazeEncoderParams(
        l_d=trunc_normal((1, d_model), rng),
        l_c=trunc_normal((2, d_model), rng),
        b_d=Tensor(np.zeros(d_model), requires_grad=True),
        b_c=Tensor(np.zeros(d_model), requires_grad=True)
    )


def encode_gaze(
    seq: FixationSequence,
    params: GazeEncoderParams,
    time_scale: float = DEFAULT_TIME_SCALE
) -> GazeTokens:
    """One token per fixation: ``PE(start) + D L_D + b_D + C L_C + b_C``."""
    d_model = params.d_model
    if (
        params.l_d.shape != (1, d_model)
        or params.l_c.shape != (2, d_model)
        or params.b_d.shape != (d_model,)
        or params.b_c.shape != (d_model,)
    ):
        raise DimensionError(
            f'gaze encoder L_D {params.l_d.shape}, L_C {params.l_c.shape}, '
            f'biases {params.b_d.shape} {params.b_c.shape}'
        )

    coords = seq.coords
    pe = sinusoidal_pe(seq.starts, d_model, time_scale)
    duration_term = matmul(Tensor(seq.durations.reshape(-1, 1)), params.l_d) + params.b_d
    location_term = matmul(Tensor(coords), params.l_c) + params.b_c
    return GazeTokens(values=pe + duration_term + location_term, coords=coords)
