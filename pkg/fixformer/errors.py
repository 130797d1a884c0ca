"""Exception hierarchy shared by every part of the package."""

__all__ = [
    'FixFormerError',
    'ContractError',
    'DimensionError',
    'NoAttentionError',
    'GazeDataError',
    'EmptyGazeError',
    'NoFixationError',
    'FixationOrderError',
    'DatasetError',
    'DatasetIOError',
    'FormatError',
    'CheckpointError',
    'ConfigError',
    'NumericalError',
    'NonFiniteError',
    'DivergenceError'
]


class FixFormerError(Exception):
    _MESSAGE = ''

    def __init__(self, message: str = '') -> None:
        if message:
            super().__init__(f'{self._MESSAGE} {message}'.strip())
        else:
            super().__init__(self._MESSAGE)


# CONTRACTS ============================================================


class ContractError(FixFormerError, ValueError):
    _MESSAGE = 'Contract violated:'


class DimensionError(ContractError):
    _MESSAGE = 'Dimension mismatch:'


class NoAttentionError(ContractError):
    _MESSAGE = 'no cross-attention in this variant.'


# GAZE =================================================================


class GazeDataError(FixFormerError):
    _MESSAGE = 'Invalid gaze data:'


class EmptyGazeError(GazeDataError):
    _MESSAGE = 'Fewer than 2 valid gaze samples.'


class NoFixationError(GazeDataError):
    _MESSAGE = 'No window met the minimum fixation duration.'


class FixationOrderError(GazeDataError):
    _MESSAGE = 'Fixations overlap in time.'


# DATA =================================================================


class DatasetError(FixFormerError):
    _MESSAGE = 'Dataset error:'


class DatasetIOError(DatasetError):
    _MESSAGE = 'I/O failure:'


class FormatError(DatasetError):
    _MESSAGE = 'Malformed file:'


class CheckpointError(DatasetError):
    _MESSAGE = 'Checkpoint error:'


# CONFIGURATION ========================================================


class ConfigError(FixFormerError):
    _MESSAGE = 'Invalid configuration:'


# NUMERICS =============================================================


class NumericalError(FixFormerError):
    _MESSAGE = 'Numerical failure:'


class NonFiniteError(NumericalError):
    _MESSAGE = 'Non-finite values produced by'


class DivergenceError(NumericalError):
    _MESSAGE = 'Training diverged:'
