"""Gaze-guided image classification with ragged-batch transformers."""

from .errors import (  # noqa
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    DatasetIOError,
    DimensionError,
    DivergenceError,
    EmptyGazeError,
    FixationOrderError,
    FixFormerError,
    FormatError,
    GazeDataError,
    NoAttentionError,
    NoFixationError,
    NonFiniteError,
    NumericalError
)
from .bench import BenchConfig, BenchResult, run_bench  # noqa
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa
from .data import DatasetSplits, Example, load_dataset_files, splits_from_synthetic  # noqa
from .gaze import (  # noqa
    DetectionConfig,
    Fixation,
    FixationSequence,
    RawGazeSample,
    detect_fixations,
    encode_gaze
)
from .gradcheck import GradcheckConfig, GroupResult, check_gradients  # noqa
from .image import ImageSample, ModelConfig, encode_image  # noqa
from .integration import AttentionMap, IntegrationVariant, classify  # noqa
from .metrics import MetricsReport, compute_metrics  # noqa
from .model import FixationFormer  # noqa
from .ragged import RaggedBatch, build, ragged_attention, set_num_threads  # noqa
from .synthetic import PRESETS, SyntheticSpec, emit_dataset_files, generate  # noqa
from .training import TrainConfig, TrainResult, evaluate, run_ablation, train  # noqa

__version__ = '0.1.0'
