import os

from fixformer.errors import ConfigError

# Parallelism cap for per-element attention and file writing; read by thread_count()
FIXFORMER_THREADS = os.getenv('FIXFORMER_THREADS', '1')

# Logging
FIXFORMER_LOG_DIR = os.getenv('FIXFORMER_LOG_DIR', 'logs')
LOG_LEVEL = os.getenv('FIXFORMER_LOG_LEVEL', 'INFO')

# Default locations
DEFAULT_DATA_DIR = 'data/synthetic'
DEFAULT_OUTPUT_DIR = 'runs/default'

# Report file names inside the output directory
CHECKPOINT_NAME = 'best.ckpt'
TRAIN_REPORT_NAME = 'train_report'
EVAL_REPORT_NAME = 'eval_report'
GRADCHECK_REPORT_NAME = 'gradcheck_report'
BENCH_REPORT_NAME = 'bench_report'
ABLATION_REPORT_NAME = 'ablation_report'
ATTENTION_REPORT_NAME = 'attention_report'

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def thread_count(raw: str = FIXFORMER_THREADS) -> int:
    try:
        count = int(raw)
    except ValueError as err:
        raise ConfigError(f'FIXFORMER_THREADS={raw!r} is not an integer') from err
    if count < 1:
        raise ConfigError(f'FIXFORMER_THREADS must be >= 1, got {count}')
    return count
