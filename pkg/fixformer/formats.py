"""
Readers and writers for every on-disk format the package touches.

Byte layouts are documented in ``docs/FORMATS.md``. Every I/O failure is
re-raised as :class:`DatasetIOError` naming the path, and every content
problem as :class:`FormatError`.
"""

__all__ = [
    'ATTENTION_SUFFIX',
    'FIXATION_HEADER',
    'RAW_GAZE_HEADER',
    'TENSOR_MAGIC',
    'gaze_file_kind',
    'load_attention_map',
    'load_fixations',
    'load_image',
    'load_raw_gaze',
    'load_tensor_file',
    'save_attention_map',
    'save_fixations',
    'save_image',
    'save_raw_gaze',
    'save_tensor_file'
]

import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .errors import DatasetIOError, FormatError, GazeDataError
from .gaze import Fixation, FixationSequence, RawGazeSample, clamp_samples

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RAW_GAZE_HEADER = ('t_s', 'x', 'y', 'valid')
FIXATION_HEADER = ('start_s', 'duration_s', 'x', 'y')
TENSOR_MAGIC = b'FXTENSOR'
ATTENTION_SUFFIX = '.attn.txt'


@contextmanager
def _io_context(path: PathLike) -> Iterator[None]:
    try:
        yield
    except FileNotFoundError as err:
        raise DatasetIOError(f'{path}: file not found') from err
    except OSError as err:
        raise DatasetIOError(f'{path}: {err}') from err


def _read_csv(path: PathLike, header: tuple[str, ...]) -> pd.DataFrame:
    with _io_context(path):
        try:
            frame = pd.read_csv(path, float_precision='round_trip')
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
            raise FormatError(f'{path}: {err}') from err
    if tuple(frame.columns) != header:
        raise FormatError(f'{path}: expected header {",".join(header)}, got {",".join(frame.columns)}')
    if frame.empty:
        raise FormatError(f'{path}: no data rows')
    try:
        return frame.astype(np.float64)
    except ValueError as err:
        raise FormatError(f'{path}: non-numeric value ({err})') from err


def _write_csv(frame: pd.DataFrame, path: PathLike) -> None:
    with _io_context(path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')


# GAZE FILES ===========================================================


def gaze_file_kind(path: PathLike) -> Literal['raw', 'fixations']:
    """Tell raw gaze and fixation CSVs apart by their header line."""
    with _io_context(path):
        with open(path, encoding='utf-8') as stream:
            header = tuple(stream.readline().strip().split(','))
    if header == RAW_GAZE_HEADER:
        return 'raw'
    if header == FIXATION_HEADER:
        return 'fixations'
    raise FormatError(f'{path}: unrecognized gaze header {",".join(header)}')


def load_raw_gaze(
    path: PathLike, image_extent: Union[tuple[float, float], None] = None
) -> list[RawGazeSample]:
    """
    Read a raw gaze CSV.

    ``image_extent`` is ``(width, height)`` in pixels when the file stores
    pixel coordinates; they are divided through to normalized units.
    Coordinates outside the unit square are clamped.
    """
    frame = _read_csv(path, RAW_GAZE_HEADER)
    x = frame['x'].to_numpy()
    y = frame['y'].to_numpy()
    if image_extent is not None:
        width, height = image_extent
        x, y = x / width, y / height
    valid = frame['valid'].to_numpy()
    if not np.isin(valid, (0.0, 1.0)).all():
        raise FormatError(f'{path}: valid column must hold 0 or 1')
    samples = [
        RawGazeSample(t=float(t), x=float(xi), y=float(yi), valid=bool(v))
        for t, xi, yi, v in zip(frame['t_s'].to_numpy(), x, y, valid)
    ]
    return clamp_samples(samples)


def save_raw_gaze(samples: Sequence[RawGazeSample], path: PathLike) -> None:
    frame = pd.DataFrame({
        't_s': [s.t for s in samples],
        'x': [s.x for s in samples],
        'y': [s.y for s in samples],
        'valid': [int(s.valid) for s in samples]
    })
    _write_csv(frame, path)


def load_fixations(path: PathLike) -> FixationSequence:
    frame = _read_csv(path, FIXATION_HEADER)
    x = frame['x'].to_numpy()
    y = frame['y'].to_numpy()
    n_clamped = int(np.sum((x < 0) | (x > 1) | (y < 0) | (y > 1)))
    if n_clamped:
        logger.warning(f'Clamped {n_clamped} of {len(x)} fixations in {path} into [0, 1]')
    try:
        return FixationSequence(tuple(
            Fixation(float(s), float(d), float(xi), float(yi))
            for s, d, xi, yi in zip(
                frame['start_s'], frame['duration_s'], np.clip(x, 0, 1), np.clip(y, 0, 1)
            )
        ))
    except GazeDataError as err:
        raise FormatError(f'{path}: {err}') from err


def save_fixations(seq: FixationSequence, path: PathLike) -> None:
    frame = pd.DataFrame(seq.as_array(), columns=list(FIXATION_HEADER))
    _write_csv(frame, path)


# IMAGES ===============================================================


def save_tensor_file(array: np.ndarray, path: PathLike) -> None:
    array = np.ascontiguousarray(array, dtype='<f8')
    header = TENSOR_MAGIC + np.array([array.ndim, *array.shape], dtype='<u4').tobytes()
    with _io_context(path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(header + array.tobytes())


def load_tensor_file(path: PathLike) -> np.ndarray:
    with _io_context(path):
        blob = Path(path).read_bytes()
    magic_len = len(TENSOR_MAGIC)
    if blob[:magic_len] != TENSOR_MAGIC:
        raise FormatError(f'{path}: bad magic {blob[:magic_len]!r}')
    if len(blob) < magic_len + 4:
        raise FormatError(f'{path}: truncated header')
    ndim = int(np.frombuffer(blob, dtype='<u4', count=1, offset=magic_len)[0])
    body_offset = magic_len + 4 * (1 + ndim)
    if len(blob) < body_offset:
        raise FormatError(f'{path}: truncated header')
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype='<u4', count=ndim, offset=magic_len + 4))
    expected = body_offset + 8 * int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(f'{path}: expected {expected} bytes for dims {dims}, got {len(blob)}')
    return np.frombuffer(blob, dtype='<f8', offset=body_offset).reshape(dims).astype(np.float64)


def load_image(path: PathLike) -> np.ndarray:
    """Grayscale pixels in [0, 1] from an 8-bit PGM or a ``.fxt`` tensor file."""
    if Path(path).suffix == '.fxt':
        pixels = load_tensor_file(path)
    else:
        with _io_context(path):
            try:
                with Image.open(path) as image:
                    if image.mode != 'L':
                        raise FormatError(f'{path}: expected 8-bit grayscale, got mode {image.mode}')
                    pixels = np.asarray(image, dtype=np.float64) / 255.0
            except UnidentifiedImageError as err:
                raise FormatError(f'{path}: not a readable image') from err
    if pixels.ndim != 2:
        raise FormatError(f'{path}: expected a 2-D image, got shape {pixels.shape}')
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise FormatError(f'{path}: pixel values outside [0, 1]')
    return pixels


def save_image(pixels: np.ndarray, path: PathLike) -> None:
    """Write ``.fxt`` losslessly, anything else as 8-bit binary PGM."""
    if Path(path).suffix == '.fxt':
        save_tensor_file(pixels, path)
        return
    levels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with _io_context(path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(levels).save(path, format='PPM')


# ATTENTION DUMPS ======================================================


def save_attention_map(weights: np.ndarray, path: PathLike, **meta: Union[str, int]) -> None:
    """One matrix per file; the header line carries ``key=value`` metadata."""
    rows, cols = weights.shape
    header = ' '.join(f'{k}={v}' for k, v in {**meta, 'rows': rows, 'cols': cols}.items())
    with _io_context(path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, weights, fmt='%.17g', header=header, comments='# ', encoding='utf-8')


def load_attention_map(path: PathLike) -> tuple[dict[str, str], np.ndarray]:
    with _io_context(path):
        with open(path, encoding='utf-8') as stream:
            first = stream.readline()
        if not first.startswith('# '):
            raise FormatError(f'{path}: missing attention header')
        try:
            meta = dict(item.split('=', 1) for item in first[2:].split())
        except ValueError as err:
            raise FormatError(f'{path}: malformed header {first.strip()!r}') from err
        weights = np.loadtxt(path, comments='#', ndmin=2)
    if weights.shape != (int(meta.get('rows', -1)), int(meta.get('cols', -1))):
        raise FormatError(f'{path}: body shape {weights.shape} disagrees with header')
    return meta, weights
