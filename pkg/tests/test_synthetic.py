import numpy as np
import pandas as pd
import pytest

from fixformer.errors import ContractError
from fixformer.formats import load_image, load_raw_gaze
from fixformer.gaze import DetectionConfig, detect_or_centroid
from fixformer.synthetic import (
    MANIFEST_HEADER,
    PRESETS,
    SyntheticSpec,
    class_centers,
    emit_dataset_files,
    generate,
    spec_from_preset
)


def _small(**overrides):
    base = {'n_train': 6, 'n_val': 3, 'n_test': 3, 'image_size': 16, 'max_fixations': 8}
    return SyntheticSpec(**{**base, **overrides})


class TestSpec:
    def test_presets(self):
        assert set(PRESETS) == {'standard', 'gaze_heavy', 'image_only_signal', 'gaze_only_signal', 'imbalanced'}
        spec = spec_from_preset('imbalanced', n_train=10)
        assert spec.n_classes == 2
        assert spec.priors == (0.8, 0.2)
        assert spec.n_train == 10
        with pytest.raises(ContractError):
            spec_from_preset('nope')

    @pytest.mark.parametrize('overrides', [
        {'n_classes': 1},
        {'n_val': 0},
        {'gaze_informativeness': 1.5},
        {'priors': (0.5, 0.5)},
        {'priors': (0.5, 0.6, -0.1)},
        {'min_fixations': 5, 'max_fixations': 4}
    ])
    def test_rejects(self, overrides):
        with pytest.raises(ContractError):
            SyntheticSpec(**overrides)

    def test_split_boundaries(self):
        spec = _small()
        assert [spec.split_of(i) for i in (0, 5, 6, 8, 9, 11)] == ['train', 'train', 'val', 'val', 'test', 'test']

    def test_class_centers_on_circle(self):
        centers = class_centers(4)
        np.testing.assert_allclose(np.hypot(centers[:, 0] - 0.5, centers[:, 1] - 0.5), 0.3)
        np.testing.assert_allclose(centers[0], [0.8, 0.5])


class TestGenerate:
    def test_deterministic_and_thread_independent(self):
        spec = _small(seed=3)
        a = generate(spec)
        b = generate(spec, n_threads=4)
        assert [s.id for s in a.samples] == [s.id for s in b.samples]
        for x, y in zip(a.samples, b.samples):
            assert x.label == y.label
            np.testing.assert_array_equal(x.pixels, y.pixels)
            assert x.gaze == y.gaze

    def test_seed_changes_data(self):
        a = generate(_small(seed=0)).samples[0]
        b = generate(_small(seed=1)).samples[0]
        assert not np.array_equal(a.pixels, b.pixels)

    def test_sample_properties(self):
        dataset = generate(_small())
        assert len(dataset.split('train')) == 6
        assert len(dataset.split('test')) == 3
        for sample in dataset.samples:
            assert sample.pixels.shape == (16, 16)
            np.testing.assert_array_equal(np.round(sample.pixels * 255) / 255, sample.pixels)
            times = [g.t for g in sample.gaze]
            assert np.all(np.diff(times) > 0)
            assert all(0.0 <= g.x <= 1.0 and 0.0 <= g.y <= 1.0 for g in sample.gaze)

    def test_gaze_yields_fixations(self):
        spec = _small(min_fixations=4, max_fixations=6)
        for sample in generate(spec).samples:
            seq, fell_back = detect_or_centroid(sample.gaze, DetectionConfig())
            assert not fell_back
            assert len(seq) >= 2

    def test_priors_shape_labels(self):
        spec = _small(n_classes=2, priors=(1.0, 0.0))
        assert {s.label for s in generate(spec).samples} == {0}

    def test_full_informativeness_puts_gaze_on_class_region(self):
        spec = _small(gaze_informativeness=1.0)
        centers = class_centers(spec.n_classes)
        for sample in generate(spec).samples:
            seq, _ = detect_or_centroid(sample.gaze, DetectionConfig())
            distances = np.hypot(*(seq.coords - centers[sample.label]).T)
            assert np.median(distances) < 0.15
            # No blob: pixels are background plus noise.
            assert abs(sample.pixels.mean() - 0.2) < 0.05


class TestEmit:
    def test_files_match_samples(self, tmp_path):
        dataset = generate(_small())
        manifest = emit_dataset_files(dataset, tmp_path, n_threads=2)
        frame = pd.read_csv(manifest)
        assert tuple(frame.columns) == MANIFEST_HEADER
        assert list(frame['id']) == [s.id for s in dataset.samples]
        first = dataset.samples[0]
        np.testing.assert_array_equal(load_image(tmp_path / frame['image_path'][0]), first.pixels)
        assert tuple(load_raw_gaze(tmp_path / frame['gaze_path'][0])) == first.gaze

    def test_rerun_is_byte_identical(self, tmp_path):
        dataset = generate(_small())
        emit_dataset_files(dataset, tmp_path / 'a')
        emit_dataset_files(dataset, tmp_path / 'b')
        for name in ('manifest.csv', 'images/train_00000.pgm', 'gaze/test_00011.csv'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def _motif_features(pixels, centers):
    size = pixels.shape[0]
    axis = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(axis, axis, indexing='ij')
    return np.array([
        pixels[np.hypot(xs - cx, ys - cy) <= 0.16].mean() for cx, cy in centers
    ])


def _dwell_histogram(gaze, centers):
    points = np.array([(g.x, g.y) for g in gaze if g.valid])
    nearest = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2).argmin(axis=1)
    return np.bincount(nearest, minlength=len(centers)) / len(points)


def _nearest_centroid_accuracy(features, labels):
    """Diagonal nearest-centroid classifier, fitted and scored on the same draw."""
    classes = np.unique(labels)
    centroids = np.array([features[labels == c].mean(axis=0) for c in classes])
    within = np.concatenate([features[labels == c] - centroids[i] for i, c in enumerate(classes)])
    scaled = features / np.maximum(within.std(axis=0), 1e-12)
    scaled_centroids = centroids / np.maximum(within.std(axis=0), 1e-12)
    distances = ((scaled[:, None, :] - scaled_centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(classes[distances.argmin(axis=1)] == labels))


class TestClassSignal:
    # Regression value of the motif + dwell oracle on 300 samples at lambda = 0.5.
    ORACLE_ACCURACY = 1.0

    @staticmethod
    def _draw(informativeness):
        spec = SyntheticSpec(n_train=200, n_val=50, n_test=50, gaze_informativeness=informativeness)
        centers = class_centers(spec.n_classes)
        samples = generate(spec).samples
        motif = np.array([_motif_features(s.pixels, centers) for s in samples])
        dwell = np.array([_dwell_histogram(s.gaze, centers) for s in samples])
        return motif, dwell, np.array([s.label for s in samples])

    def test_oracle_separates_classes(self):
        motif, dwell, labels = self._draw(0.5)
        accuracy = _nearest_centroid_accuracy(np.hstack([motif, dwell]), labels)
        assert accuracy >= 0.95
        assert accuracy == self.ORACLE_ACCURACY

    def test_uninformative_modality_is_at_chance(self):
        _, dwell, labels = self._draw(0.0)
        assert abs(_nearest_centroid_accuracy(dwell, labels) - 1 / 3) < 0.1
        motif, _, labels = self._draw(1.0)
        assert abs(_nearest_centroid_accuracy(motif, labels) - 1 / 3) < 0.1
