"""
Report files.

Every report is written twice: ``<name>.json`` (sorted keys, two-space
indent) and ``<name>.txt`` with one ``dotted.key=value`` line per leaf.
Reports carry no timestamps, so identical runs give identical files.
"""

import json
import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from fixformer.errors import DatasetIOError
from modules.logger import get_logger

logger = get_logger(__name__)


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become ``None``."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def flatten(payload: Mapping[str, Any], prefix: str = '') -> list[tuple[str, Any]]:
    items: list[tuple[str, Any]] = []
    for key in sorted(payload):
        value = payload[key]
        name = f'{prefix}{key}'
        if isinstance(value, Mapping):
            items.extend(flatten(value, f'{name}.'))
        else:
            items.append((name, value))
    return items


def _text_value(value: Any) -> str:
    if value is None:
        return 'null'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, list):
        return '[' + ', '.join(_text_value(v) for v in value) + ']'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(
    directory: Union[str, Path], name: str, payload: Mapping[str, Any]
) -> tuple[Path, Path]:
    """Write ``<name>.json`` and ``<name>.txt`` under ``directory``."""
    root = Path(directory)
    data = to_jsonable(payload)
    json_path = root / f'{name}.json'
    text_path = root / f'{name}.txt'
    lines = [f'{key}={_text_value(value)}' for key, value in flatten(data)]
    try:
        root.mkdir(parents=True, exist_ok=True)
        json_path.write_text(
            json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + '\n', encoding='utf-8'
        )
        text_path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as err:
        raise DatasetIOError(f'{root}: {err}') from err
    logger.info(f'Report written to {json_path} and {text_path}')
    return json_path, text_path


def read_report(path: Union[str, Path]) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as err:
        raise DatasetIOError(f'{path}: {err}') from err


def format_table(rows: Sequence[Mapping[str, Any]], float_format: str = '{:.4f}') -> str:
    """Human-readable fixed-width table for standard output."""
    if not rows:
        return '(empty)'
    frame = pd.DataFrame(list(rows))
    return frame.to_string(
        index=False, float_format=lambda value: float_format.format(value)
    )
