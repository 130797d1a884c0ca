from math import isnan

import numpy as np
import pytest

from fixformer.data import DatasetSplits, Example
from fixformer.errors import ContractError
from fixformer.gaze import FixationSequence
from fixformer.image import ImageSample
from fixformer.model import FixationFormer
from fixformer.tensor import Tensor, cross_entropy
from fixformer.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    decays,
    evaluate,
    run_ablation,
    train
)


ALL_VARIANTS = ['image_only', 'gaze_only', 'cross_attention', 'two_way']


def _two_sample_splits():
    left = np.zeros((8, 8))
    left[:, :4] = 1.0
    images = [ImageSample(left), ImageSample(left[:, ::-1].copy())]
    gazes = [
        FixationSequence.from_rows([(0.0, 0.1, 0.2, 0.2), (0.3, 0.1, 0.25, 0.2)]),
        FixationSequence.from_rows([(0.0, 0.4, 0.8, 0.8), (0.5, 0.4, 0.75, 0.8), (1.0, 0.4, 0.8, 0.75)])
    ]

    def _split(name):
        return tuple(
            Example(id=f'{name}_{label}', image=images[label], gaze=gazes[label], label=label)
            for label in (0, 1)
        )

    return DatasetSplits(train=_split('train'), val=_split('val'), test=_split('test'))


def _full_batch_loss(model, examples):
    images = [ex.image for ex in examples] if model.variant.uses_image else None
    gazes = [ex.gaze for ex in examples] if model.variant.uses_gaze else None
    return cross_entropy(model.logits(images, gazes), [ex.label for ex in examples]).item()


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 10, 1e-3) == 1e-3
        assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert cosine_lr(10, 10, 1.0) == 0.0
        assert cosine_lr(0, 0, 0.3) == 0.3

    def test_monotone(self):
        values = [cosine_lr(s, 20, 1.0) for s in range(21)]
        assert all(a >= b for a, b in zip(values[:-1], values[1:]))

    def test_range(self):
        with pytest.raises(ContractError):
            cosine_lr(11, 10, 1.0)


class TestAdamW:
    def test_first_step_by_hand(self):
        w0 = np.array([[1.0, -2.0], [0.5, 4.0]])
        b0 = np.array([0.3, -0.1])
        g_w = np.array([[0.1, -0.2], [0.0, 3.0]])
        g_b = np.array([-0.5, 0.25])
        w, b = Tensor(w0, requires_grad=True), Tensor(b0, requires_grad=True)
        lr, wd, eps = 0.1, 0.01, 1e-8

        adamw_step([('w', w), ('b', b)], {'w': g_w, 'b': g_b}, AdamWState(), 1, lr, wd, (0.9, 0.999), eps)

        # After one step the bias-corrected moments are g and g^2.
        expected_w = w0 * (1 - lr * wd) - lr * g_w / (np.abs(g_w) + eps)
        expected_b = b0 - lr * g_b / (np.abs(g_b) + eps)
        np.testing.assert_allclose(w.data, expected_w, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b.data, expected_b, rtol=1e-12, atol=1e-15)

    def test_second_step_by_hand(self):
        p0 = np.array([[1.0, 2.0]])
        g1 = np.array([[0.2, -0.4]])
        g2 = np.array([[-0.1, 0.3]])
        p = Tensor(p0, requires_grad=True)
        state = AdamWState()
        beta1, beta2, lr, eps = 0.9, 0.999, 0.05, 1e-8
        adamw_step([('p', p)], {'p': g1}, state, 1, lr, 0.0, (beta1, beta2), eps)
        adamw_step([('p', p)], {'p': g2}, state, 2, lr, 0.0, (beta1, beta2), eps)

        expected = p0.copy()
        m = v = np.zeros_like(p0)
        for t, g in ((1, g1), (2, g2)):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            expected = expected - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(state.m['p'], m, rtol=1e-14)

    def test_missing_gradient_is_zero(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        adamw_step([('p', p)], {'p': None}, AdamWState(), 1, 0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_contracts(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            adamw_step([('p', p)], {'p': np.ones(3)}, AdamWState(), 1, 0.1)
        with pytest.raises(ContractError):
            adamw_step([('p', p)], {'p': np.ones((2, 2))}, AdamWState(), 0, 0.1)

    def test_decay_selection(self):
        matrix = Tensor(np.ones((2, 2)))
        assert decays('integration.0.mlp.fc1.weight', matrix)
        assert not decays('integration.0.mlp.fc1.bias', Tensor(np.ones(2)))
        assert not decays('image.pos_embed', matrix)
        assert not decays('image.cls_token', matrix)
        assert not decays('gaze_cls', matrix)


class TestTrainConfig:
    @pytest.mark.parametrize('overrides', [
        {'epochs': -1},
        {'batch_size': 0},
        {'betas': (0.9, 1.0)},
        {'early_stopping_metric': 'loss'},
        {'early_stopping_split': 'train'},
        {'variants': ('fusion',)}
    ])
    def test_rejects(self, overrides):
        with pytest.raises(ContractError):
            TrainConfig(**overrides)


class TestTrain:
    def test_zero_epochs_reports_initial_model(self, tiny_config, tiny_splits):
        model = FixationFormer.create(tiny_config, 'cross_attention', seed=0, lora_rank=2)
        before = model.state_dict()
        result = train(model, tiny_splits, TrainConfig(epochs=0, batch_size=4, lora_rank=2))
        assert result.best_epoch == 0
        assert len(result.history) == 1
        assert isnan(result.history[0].train_loss)
        assert 0.0 <= result.test_report.accuracy <= 1.0
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_deterministic(self, tiny_config, tiny_splits):
        cfg = TrainConfig(epochs=2, batch_size=3, lr=1e-3, lora_rank=2, seed=5)
        runs = []
        for _ in range(2):
            model = FixationFormer.create(tiny_config, 'two_way', seed=5, lora_rank=2)
            runs.append(train(model, tiny_splits, cfg))
        for a, b in zip(runs[0].history, runs[1].history):
            assert (a.epoch, a.stopping_metric, a.lr) == (b.epoch, b.stopping_metric, b.lr)
            np.testing.assert_array_equal(a.train_loss, b.train_loss)
        for name, value in runs[0].best_state.items():
            np.testing.assert_array_equal(value, runs[1].best_state[name])

    def test_trains_and_keeps_best_state(self, tiny_config, tiny_splits):
        model = FixationFormer.create(tiny_config, 'cross_attention', seed=1, lora_rank=2)
        frozen_before = {name: t.numpy() for name, t in model.named_tensors() if not t.requires_grad}
        seen = []
        result = train(
            model, tiny_splits, TrainConfig(epochs=3, batch_size=4, lr=1e-3, lora_rank=2), seen.append
        )
        assert [r.epoch for r in result.history] == [0, 1, 2, 3]
        assert [r.epoch for r in seen] == [1, 2, 3]
        assert all(np.isfinite(r.train_loss) for r in result.history[1:])
        best = max(r.stopping_metric for r in result.history)
        assert result.history[result.best_epoch].stopping_metric == best
        assert all(r.stopping_metric < best for r in result.history[:result.best_epoch])
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, result.best_state[name])
        for name, value in frozen_before.items():
            np.testing.assert_array_equal(model.state_dict()[name], value, err_msg=name)

    def test_epoch_updates_trainable_parameters(self, tiny_config, tiny_splits):
        model = FixationFormer.create(tiny_config, 'gaze_only', seed=2)
        head_before = model.params.head.weight.numpy()
        moved = []
        cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-2, early_stopping_split='test')
        train(model, tiny_splits, cfg, lambda _: moved.append(
            not np.array_equal(model.params.head.weight.data, head_before)
        ))
        assert moved == [True]

    @pytest.mark.parametrize('variant', ALL_VARIANTS)
    def test_fits_two_separable_samples(self, tiny_config, variant):
        splits = _two_sample_splits()
        model = FixationFormer.create(tiny_config, variant, seed=0, lora_rank=2)
        cfg = TrainConfig(epochs=200, batch_size=2, lr=5e-3, weight_decay=0.0, lora_rank=2)
        result = train(model, splits, cfg)
        # One step per epoch, so the history length bounds the step count.
        assert len(result.history) == 201
        assert result.stopping_report.accuracy == 1.0
        assert evaluate(model, splits.train).accuracy == 1.0

    @pytest.mark.parametrize('variant', ALL_VARIANTS)
    def test_first_epoch_lowers_training_loss(self, tiny_config, tiny_splits, variant):
        model = FixationFormer.create(tiny_config, variant, seed=4, lora_rank=2)
        before = _full_batch_loss(model, tiny_splits.train)
        after = []
        cfg = TrainConfig(
            epochs=1, batch_size=len(tiny_splits.train), lr=1e-4, weight_decay=0.0, lora_rank=2
        )
        result = train(
            model, tiny_splits, cfg, lambda _: after.append(_full_batch_loss(model, tiny_splits.train))
        )
        assert result.history[1].train_loss == pytest.approx(before, rel=1e-9)
        assert after[0] < before

    def test_zero_learning_rate_changes_nothing(self, tiny_config, tiny_splits):
        model = FixationFormer.create(tiny_config, 'two_way', seed=6, lora_rank=2)
        before = model.state_dict()
        after = []
        cfg = TrainConfig(epochs=3, batch_size=3, lr=0.0, lora_rank=2)
        result = train(model, tiny_splits, cfg, lambda _: after.append(model.state_dict()))
        assert len({r.stopping_metric for r in result.history}) == 1
        assert result.best_epoch == 0
        for state in after:
            for name, value in state.items():
                np.testing.assert_array_equal(value, before[name], err_msg=name)

    def test_evaluate_needs_examples(self, tiny_config):
        model = FixationFormer.create(tiny_config, 'image_only', seed=0)
        with pytest.raises(ContractError):
            evaluate(model, [])


class TestAblation:
    def test_summaries(self, tiny_config, tiny_splits):
        cfg = TrainConfig(
            epochs=1, batch_size=4, lora_rank=2, repeats=2, seed=3,
            variants=('image_only', 'cross_attention')
        )
        result = run_ablation(tiny_splits, tiny_config, cfg)
        assert [s.variant for s in result.summaries] == ['image_only', 'cross_attention']
        summary = result.by_variant('cross_attention')
        assert summary.seeds == (3, 4)
        assert len(summary.accuracy) == 2
        mean, std = summary.mean_std('accuracy')
        assert mean == pytest.approx(np.mean(summary.accuracy))
        assert std >= 0.0
        with pytest.raises(ContractError):
            result.by_variant('two_way')
