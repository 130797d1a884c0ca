"""Subcommand implementations; each returns a process exit code."""

import functools
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, Union

import numpy as np

from fixformer.bench import BENCH_PROFILES, run_bench
from fixformer.checkpoint import load_checkpoint, save_checkpoint
from fixformer.data import DatasetSplits, Example, load_dataset_files, splits_from_synthetic
from fixformer.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    DatasetIOError,
    FixFormerError,
    GazeDataError,
    NoAttentionError,
    NumericalError
)
from fixformer.formats import ATTENTION_SUFFIX, load_attention_map, save_attention_map
from fixformer.gradcheck import GradientHook, check_gradients
from fixformer.integration import IntegrationVariant
from fixformer.lora import merge_lora_state
from fixformer.model import IMAGE_PREFIX, FixationFormer
from fixformer.ragged import get_num_threads
from fixformer.synthetic import SPLITS, emit_dataset_files, generate
from fixformer.training import EpochRecord, evaluate, run_ablation, train
from modules.config import (
    ABLATION_REPORT_NAME,
    ATTENTION_REPORT_NAME,
    BENCH_REPORT_NAME,
    EVAL_REPORT_NAME,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    GRADCHECK_REPORT_NAME,
    TRAIN_REPORT_NAME
)
from modules.logger import get_logger, log_banner
from modules.reports import format_table, write_report
from modules.run_config import RunConfig, from_raw

logger = get_logger(__name__)

# Examples per gradient check; the loss is a batch mean over these.
GRADCHECK_EXAMPLES = 2
_ENTROPY_FLOOR = 1e-300


def exit_code_for(err: FixFormerError) -> int:
    if isinstance(err, (ConfigError, ContractError)):
        return EXIT_USAGE
    if isinstance(err, (GazeDataError, DatasetError)):
        return EXIT_DATA
    if isinstance(err, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_USAGE


def command(title: str) -> Callable[[Callable[..., int]], Callable[..., int]]:
    """Log a banner around the command and map package errors to exit codes."""
    def decorator(fn: Callable[..., int]) -> Callable[..., int]:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> int:
            log_banner(logger, title)
            try:
                return fn(*args, **kwargs)
            except FixFormerError as err:
                code = exit_code_for(err)
                logger.error(f"{title} failed ({type(err).__name__}, exit {code}): {err}")
                return code
        return wrapper
    return decorator


# HELPERS ==============================================================


def _load_splits(cfg: RunConfig) -> DatasetSplits:
    splits = load_dataset_files(cfg.paths.data_dir, cfg.gaze)
    labels = [ex.label for name in SPLITS for ex in splits.by_name(name)]
    if labels and max(labels) >= cfg.model.n_classes:
        raise ContractError(
            f'dataset has label {max(labels)} but model.n_classes is {cfg.model.n_classes}'
        )
    return splits


def _image_weights(cfg: RunConfig) -> Union[dict[str, np.ndarray], None]:
    if not cfg.paths.init_checkpoint:
        return None
    ckpt = load_checkpoint(cfg.paths.init_checkpoint)
    tensors = ckpt.tensors
    if any('.base.' in name for name in tensors):
        # Written by a LoRA-adapted run: fold the adapters into the weights.
        train_echo = ckpt.config.get('train', {})
        try:
            scale = float(train_echo['lora_alpha']) / int(train_echo['lora_rank'])
        except (KeyError, TypeError, ValueError, ZeroDivisionError) as err:
            raise CheckpointError(
                f'{cfg.paths.init_checkpoint}: LoRA tensors without a usable train echo'
            ) from err
        tensors = merge_lora_state(tensors, scale)
    weights = {name: value for name, value in tensors.items() if name.startswith(IMAGE_PREFIX)}
    logger.info(
        f"Initializing image encoder from {cfg.paths.init_checkpoint} ({len(weights)} tensors)"
    )
    return weights


def _new_model(cfg: RunConfig) -> FixationFormer:
    return FixationFormer.create(
        cfg.model,
        cfg.variant,
        cfg.train.seed,
        cfg.train.lora_rank,
        cfg.train.lora_alpha,
        _image_weights(cfg)
    )


def _restore(path: Path) -> tuple[FixationFormer, RunConfig]:
    """Rebuild the trained model from a checkpoint and its config echo."""
    ckpt = load_checkpoint(path)
    try:
        trained = from_raw(ckpt.config)
    except ConfigError as err:
        raise CheckpointError(f'{path}: config echo is not a valid configuration ({err})') from err
    model = FixationFormer.create(
        trained.model, trained.variant, trained.train.seed,
        trained.train.lora_rank, trained.train.lora_alpha
    )
    model.load_state_dict(ckpt.tensors)
    logger.info(f"Restored {trained.variant.value} model from {path}")
    return model, trained


def _find_example(splits: DatasetSplits, sample_id: str) -> Example:
    for name in SPLITS:
        for example in splits.by_name(name):
            if example.id == sample_id:
                return example
    raise DatasetError(f'sample {sample_id!r} is not in the dataset')


def _metric_row(label: str, report: Any) -> dict[str, Any]:
    return {
        'run': label,
        'accuracy': report.accuracy,
        'macro_f1': report.macro_f1,
        'auc': report.auc
    }


# COMMANDS =============================================================


@command("GENERATE")
def cmd_generate(cfg: RunConfig) -> int:
    spec = cfg.synthetic
    logger.info(
        f"Generating {spec.n_samples} samples (preset={cfg.preset or 'none'}, "
        f"lambda={spec.gaze_informativeness}, seed={spec.seed})"
    )
    dataset = generate(spec, get_num_threads())
    manifest = emit_dataset_files(dataset, cfg.paths.data_dir, get_num_threads())
    counts = np.bincount([s.label for s in dataset.samples], minlength=spec.n_classes)
    print(f"Wrote {len(dataset.samples)} samples to {manifest.parent}")
    print(f"Class counts: {counts.tolist()}")
    return EXIT_OK


@command("TRAINING")
def cmd_train(cfg: RunConfig) -> int:
    splits = _load_splits(cfg)
    splits.require_nonempty()
    model = _new_model(cfg)
    logger.info(
        f"Variant {cfg.variant.value}: {len(model.trainable())} trainable tensors, "
        f"splits {splits.sizes}"
    )

    def _on_epoch(record: EpochRecord) -> None:
        print(
            f"epoch {record.epoch:3d}  loss {record.train_loss:.4f}  "
            f"{cfg.train.early_stopping_split} {cfg.train.early_stopping_metric} "
            f"{record.stopping_metric:.4f}  lr {record.lr:.3e}"
        )

    result = train(model, splits, cfg.train, _on_epoch)
    echo = cfg.to_dict()
    checkpoint = cfg.paths.checkpoint_path
    save_checkpoint(checkpoint, result.best_state, echo)
    logger.info(f"Best checkpoint (epoch {result.best_epoch}) saved to {checkpoint}")

    log_banner(logger, "TEST METRICS")
    payload = {
        'config': echo,
        'variant': cfg.variant.value,
        'splits': splits.sizes,
        'best_epoch': result.best_epoch,
        'early_stopping': {
            'split': cfg.train.early_stopping_split,
            'metric': cfg.train.early_stopping_metric,
            'report': result.stopping_report.to_dict()
        },
        'test': result.test_report.to_dict(),
        'history': [
            {
                'epoch': r.epoch,
                'train_loss': r.train_loss,
                'stopping_metric': r.stopping_metric,
                'lr': r.lr
            }
            for r in result.history
        ]
    }
    write_report(cfg.paths.output_dir, TRAIN_REPORT_NAME, payload)
    print(format_table([
        _metric_row(f'{cfg.train.early_stopping_split} (best epoch {result.best_epoch})',
                    result.stopping_report),
        _metric_row('test', result.test_report)
    ]))
    return EXIT_OK


@command("EVALUATION")
def cmd_eval(cfg: RunConfig, split: str = 'test') -> int:
    model, trained = _restore(cfg.paths.checkpoint_path)
    if model.config.n_classes != cfg.model.n_classes:
        logger.warning(
            f"Checkpoint has {model.config.n_classes} classes, configuration "
            f"{cfg.model.n_classes}; using the checkpoint"
        )
    splits = load_dataset_files(cfg.paths.data_dir, cfg.gaze)
    examples = splits.by_name(split)
    report = evaluate(model, examples, cfg.train.batch_size)
    payload = {
        'config': cfg.to_dict(),
        'checkpoint': str(cfg.paths.checkpoint_path),
        'checkpoint_config': trained.to_dict(),
        'split': split,
        'n_examples': len(examples),
        'metrics': report.to_dict()
    }
    write_report(cfg.paths.output_dir, EVAL_REPORT_NAME, payload)
    print(format_table([_metric_row(split, report)]))
    return EXIT_OK


@command("GRADIENT CHECK")
def cmd_gradcheck(
    cfg: RunConfig,
    variants: Sequence[str] = (),
    corrupt: Union[GradientHook, None] = None
) -> int:
    spec = replace(cfg.synthetic, n_train=GRADCHECK_EXAMPLES, n_val=1, n_test=1)
    examples = splits_from_synthetic(generate(spec), cfg.gaze).train
    names = tuple(variants) or (cfg.variant.value,)
    choices = [v.value for v in IntegrationVariant]
    unknown = [name for name in names if name not in choices]
    if unknown:
        raise ConfigError(f'unknown variants {unknown}; choose from {choices}')

    rows = []
    for name in names:
        model = FixationFormer.create(
            cfg.model, IntegrationVariant(name), cfg.gradcheck.seed,
            cfg.train.lora_rank, cfg.train.lora_alpha
        )
        logger.info(f"Checking {len(model.trainable())} trainable tensors of {model.variant.value}")
        for group in check_gradients(model, examples, cfg.gradcheck, corrupt):
            rows.append({
                'variant': model.variant.value,
                'group': group.group,
                'tensors': group.n_tensors,
                'entries': group.n_entries,
                'max_abs_error': group.max_abs_error,
                'rel_error': group.rel_error,
                'passed': group.passed
            })

    failed = [row for row in rows if not row['passed']]
    write_report(cfg.paths.output_dir, GRADCHECK_REPORT_NAME, {
        'config': cfg.to_dict(),
        'variants': list(names),
        'groups': rows,
        'passed': not failed
    })
    print(format_table(rows, float_format='{:.3e}'))
    if failed:
        logger.error(f"{len(failed)} of {len(rows)} parameter groups failed the gradient check")
        return EXIT_NUMERICAL
    logger.info(f"All {len(rows)} parameter groups passed")
    return EXIT_OK


@command("BENCHMARK")
def cmd_bench(cfg: RunConfig, profiles: Sequence[str] = ()) -> int:
    selected = tuple(profiles) or (cfg.bench.profile,)
    if 'all' in selected:
        selected = BENCH_PROFILES

    rows = []
    for profile in selected:
        result = run_bench(replace(cfg.bench, profile=profile))
        rows.append({
            'profile': result.profile,
            'batch': len(result.lengths),
            'tokens': result.n_tokens,
            'max_len': max(result.lengths),
            'ragged_values': result.ragged_values,
            'padded_values': result.padded_values,
            'ratio': result.ratio,
            'closed_form_ratio': result.closed_form_ratio,
            'ragged_tok_per_s': result.ragged_tokens_per_second,
            'padded_tok_per_s': result.padded_tokens_per_second
        })
    write_report(cfg.paths.output_dir, BENCH_REPORT_NAME, {
        'config': cfg.to_dict(),
        'profiles': rows
    })
    print(format_table(rows))
    return EXIT_OK


@command("ATTENTION EXPORT")
def cmd_export_attention(cfg: RunConfig, sample_id: str) -> int:
    model, _ = _restore(cfg.paths.checkpoint_path)
    if not model.variant.has_cross_attention:
        raise NoAttentionError()
    example = _find_example(load_dataset_files(cfg.paths.data_dir, cfg.gaze), sample_id)
    maps = sorted(
        model.attention_maps([example.image], [example.gaze]),
        key=lambda m: (m.direction, m.layer, m.element)
    )

    directory = cfg.paths.attention_path
    written = []
    for attention in maps:
        for head, weights in enumerate(attention.weights):
            path = directory / (
                f'{sample_id}_{attention.direction}_layer{attention.layer}_head{head}{ATTENTION_SUFFIX}'
            )
            save_attention_map(
                weights, path,
                sample=sample_id,
                variant=model.variant.value,
                direction=attention.direction,
                layer=attention.layer,
                head=head
            )
            written.append(path)
    logger.info(f"Wrote {len(written)} attention files for {sample_id} to {directory}")
    print(f"{len(written)} attention files in {directory}")
    return EXIT_OK


def summarize_attention(path: Union[str, Path]) -> dict[str, Any]:
    """Row-sum check, peak weight, mean row entropy and most-attended key."""
    meta, weights = load_attention_map(path)
    row_sums = weights.sum(axis=1)
    entropy = -(weights * np.log(np.maximum(weights, _ENTROPY_FLOOR))).sum(axis=1)
    return {
        'file': Path(path).name,
        'direction': meta.get('direction', ''),
        'layer': int(meta.get('layer', -1)),
        'head': int(meta.get('head', -1)),
        'rows': weights.shape[0],
        'cols': weights.shape[1],
        'max_row_sum_error': float(np.abs(row_sums - 1.0).max()),
        'max_weight': float(weights.max()),
        'mean_entropy': float(entropy.mean()),
        'top_key': int(weights.mean(axis=0).argmax())
    }


@command("ATTENTION REPORT")
def cmd_report(cfg: RunConfig, attention_dir: Union[str, Path, None] = None) -> int:
    directory = Path(attention_dir) if attention_dir is not None else cfg.paths.attention_path
    files = sorted(directory.glob(f'*{ATTENTION_SUFFIX}'))
    if not files:
        raise DatasetIOError(f'{directory}: no {ATTENTION_SUFFIX} files')
    rows = [summarize_attention(path) for path in files]
    write_report(cfg.paths.output_dir, ATTENTION_REPORT_NAME, {
        'attention_dir': str(directory),
        'files': rows
    })
    print(format_table(rows))
    return EXIT_OK


@command("ABLATION")
def cmd_ablation(cfg: RunConfig) -> int:
    splits = _load_splits(cfg)
    result = run_ablation(splits, cfg.model, cfg.train, _image_weights(cfg))

    rows = []
    summaries = {}
    for summary in result.summaries:
        row: dict[str, Any] = {'variant': summary.variant, 'runs': len(summary.seeds)}
        entry: dict[str, Any] = {'seeds': list(summary.seeds)}
        for metric in ('accuracy', 'macro_f1', 'auc'):
            mean, std = summary.mean_std(metric)
            row[metric] = f'{mean:.4f} +/- {std:.4f}'
            entry[metric] = {'values': list(getattr(summary, metric)), 'mean': mean, 'std': std}
        rows.append(row)
        summaries[summary.variant] = entry

    write_report(cfg.paths.output_dir, ABLATION_REPORT_NAME, {
        'config': cfg.to_dict(),
        'splits': splits.sizes,
        'variants': summaries
    })
    print(format_table(rows))
    return EXIT_OK
