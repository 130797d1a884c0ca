"""
Binary checkpoint files.

Layout (all integers little-endian ``uint32``)::

    b'FXFMCKPT' | version | config length | config (YAML, UTF-8)
    | tensor count | per tensor: name length | name (UTF-8) | ndim | dims | f64 payload
"""

__all__ = ['CHECKPOINT_MAGIC', 'CHECKPOINT_VERSION', 'Checkpoint', 'load_checkpoint', 'save_checkpoint']

import struct
from collections.abc import Mapping
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

from .errors import CheckpointError, DatasetIOError

CHECKPOINT_MAGIC = b'FXFMCKPT'
CHECKPOINT_VERSION = 1

_U32 = struct.Struct('<I')


@dataclass(frozen=True, slots=True)
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]


def _pack_str(buffer: BytesIO, text: str) -> None:
    raw = text.encode('utf-8')
    buffer.write(_U32.pack(len(raw)))
    buffer.write(raw)


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    config: Mapping[str, Any]
) -> None:
    buffer = BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(_U32.pack(CHECKPOINT_VERSION))
    _pack_str(buffer, yaml.safe_dump(dict(config), sort_keys=True))
    buffer.write(_U32.pack(len(tensors)))
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype='<f8')
        _pack_str(buffer, name)
        buffer.write(_U32.pack(array.ndim))
        for extent in array.shape:
            buffer.write(_U32.pack(extent))
        buffer.write(array.tobytes())
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buffer.getvalue())
    except OSError as err:
        raise DatasetIOError(f'{path}: {err}') from err


class _Reader:
    __slots__ = ('_blob', '_pos', '_path')

    def __init__(self, blob: bytes, path: Union[str, Path]) -> None:
        self._blob = blob
        self._pos = 0
        self._path = path

    def take(self, n_bytes: int) -> bytes:
        end = self._pos + n_bytes
        if end > len(self._blob):
            raise CheckpointError(f'{self._path}: truncated at byte {self._pos}')
        chunk = self._blob[self._pos:end]
        self._pos = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode('utf-8')
        except UnicodeDecodeError as err:
            raise CheckpointError(f'{self._path}: invalid UTF-8 string') from err

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._blob)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise DatasetIOError(f'{path}: {err}') from err

    reader = _Reader(blob, path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path}: not a checkpoint file')
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path}: unsupported version {version}')
    try:
        config = yaml.safe_load(reader.text()) or {}
    except yaml.YAMLError as err:
        raise CheckpointError(f'{path}: unreadable config echo') from err

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        dims = tuple(reader.u32() for _ in range(reader.u32()))
        payload = reader.take(8 * int(np.prod(dims, dtype=np.int64)))
        tensors[name] = np.frombuffer(payload, dtype='<f8').reshape(dims).astype(np.float64)
    if not reader.exhausted:
        raise CheckpointError(f'{path}: trailing bytes after the last tensor')
    return Checkpoint(config=config, tensors=tensors)
