import numpy as np
import pytest

from conftest import GOLDEN
from fixformer.errors import DatasetIOError, FormatError
from fixformer.formats import (
    ATTENTION_SUFFIX,
    TENSOR_MAGIC,
    gaze_file_kind,
    load_attention_map,
    load_fixations,
    load_image,
    load_raw_gaze,
    load_tensor_file,
    save_attention_map,
    save_fixations,
    save_image,
    save_raw_gaze,
    save_tensor_file
)
from fixformer.gaze import FixationSequence, RawGazeSample


class TestGazeFiles:
    def test_kind_from_header(self):
        assert gaze_file_kind(GOLDEN / 'two_cluster.csv') == 'raw'
        assert gaze_file_kind(GOLDEN / 'fixations.csv') == 'fixations'

    def test_unknown_header(self, tmp_path):
        path = tmp_path / 'gaze.csv'
        path.write_text('time,x,y\n0,0.1,0.1\n', encoding='utf-8')
        with pytest.raises(FormatError):
            gaze_file_kind(path)
        with pytest.raises(FormatError):
            load_raw_gaze(path)

    def test_raw_golden(self):
        samples = load_raw_gaze(GOLDEN / 'two_cluster.csv')
        assert len(samples) == 20
        assert samples[5] == RawGazeSample(0.28125, 0.95, 0.05, valid=False)
        assert all(s.valid for i, s in enumerate(samples) if i != 5)

    def test_pixel_extent(self, tmp_path):
        path = tmp_path / 'pixels.csv'
        path.write_text('t_s,x,y,valid\n0,320,120,1\n0.5,700,-5,1\n', encoding='utf-8')
        samples = load_raw_gaze(path, image_extent=(640, 480))
        assert (samples[0].x, samples[0].y) == (0.5, 0.25)
        assert (samples[1].x, samples[1].y) == (1.0, 0.0)

    def test_valid_flag_must_be_binary(self, tmp_path):
        path = tmp_path / 'gaze.csv'
        path.write_text('t_s,x,y,valid\n0,0.1,0.1,2\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_raw_gaze(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / 'gaze.csv'
        path.write_text('t_s,x,y,valid\n0,left,0.1,1\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_raw_gaze(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / 'gaze.csv'
        path.write_text('start_s,duration_s,x,y\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_fixations(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError, match='missing.csv'):
            load_raw_gaze(tmp_path / 'missing.csv')

    def test_raw_round_trip(self, tmp_path):
        samples = [RawGazeSample(i / 60, 0.1 + i / 100, 0.3, valid=i != 2) for i in range(5)]
        save_raw_gaze(samples, tmp_path / 'raw.csv')
        assert load_raw_gaze(tmp_path / 'raw.csv') == samples

    def test_fixations_golden(self):
        seq = load_fixations(GOLDEN / 'fixations.csv')
        np.testing.assert_array_equal(
            seq.as_array(), [[0.0, 0.25, 0.3, 0.4], [0.3, 0.2, 0.6, 0.5], [0.6, 0.4, 0.7, 0.2]]
        )

    def test_fixations_round_trip(self, tmp_path):
        seq = FixationSequence.from_rows([(0.0, 1 / 3, 0.1, 0.2), (0.5, 0.125, 1.0, 0.0)])
        save_fixations(seq, tmp_path / 'fix.csv')
        assert gaze_file_kind(tmp_path / 'fix.csv') == 'fixations'
        assert load_fixations(tmp_path / 'fix.csv') == seq

    def test_overlapping_fixations_are_a_format_error(self, tmp_path):
        path = tmp_path / 'fix.csv'
        path.write_text('start_s,duration_s,x,y\n0,0.5,0.1,0.1\n0.2,0.1,0.2,0.2\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_fixations(path)


class TestImages:
    def test_pgm_golden(self):
        pixels = load_image(GOLDEN / 'image_4x4.pgm')
        np.testing.assert_allclose(pixels, np.arange(16.0).reshape(4, 4) / 15.0, rtol=1e-15)

    def test_fxt_golden(self):
        np.testing.assert_array_equal(
            load_image(GOLDEN / 'image_2x3.fxt'), [[0.0, 0.25, 0.5], [0.75, 1.0, 0.125]]
        )

    def test_pgm_round_trip_is_exact_on_levels(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (6, 5)) / 255.0
        save_image(pixels, tmp_path / 'img.pgm')
        assert (tmp_path / 'img.pgm').read_bytes().startswith(b'P5')
        np.testing.assert_array_equal(load_image(tmp_path / 'img.pgm'), pixels)

    def test_tensor_round_trip(self, tmp_path, rng):
        array = rng.standard_normal((2, 3, 4))
        save_tensor_file(array, tmp_path / 't.fxt')
        blob = (tmp_path / 't.fxt').read_bytes()
        assert blob[:8] == TENSOR_MAGIC
        assert len(blob) == 8 + 4 * 4 + 8 * 24
        np.testing.assert_array_equal(load_tensor_file(tmp_path / 't.fxt'), array)

    def test_tensor_file_errors(self, tmp_path):
        path = tmp_path / 'bad.fxt'
        path.write_bytes(b'NOTMAGIC' + bytes(8))
        with pytest.raises(FormatError, match='magic'):
            load_tensor_file(path)
        good = (GOLDEN / 'image_2x3.fxt').read_bytes()
        path.write_bytes(good[:-3])
        with pytest.raises(FormatError):
            load_tensor_file(path)
        path.write_bytes(good + b'\x00')
        with pytest.raises(FormatError):
            load_tensor_file(path)

    def test_out_of_range_pixels(self, tmp_path):
        save_tensor_file(np.array([[0.5, 1.5]]), tmp_path / 'img.fxt')
        with pytest.raises(FormatError):
            load_image(tmp_path / 'img.fxt')

    def test_not_an_image(self, tmp_path):
        path = tmp_path / 'img.pgm'
        path.write_bytes(b'hello')
        with pytest.raises(FormatError):
            load_image(path)


class TestAttentionMaps:
    def test_round_trip(self, tmp_path, rng):
        weights = rng.random((5, 3))
        weights /= weights.sum(axis=1, keepdims=True)
        path = tmp_path / f'test_0_image_to_gaze_layer0_head1{ATTENTION_SUFFIX}'
        save_attention_map(weights, path, sample='test_0', direction='image_to_gaze', layer=0, head=1)
        first = path.read_text(encoding='utf-8').splitlines()[0]
        assert first == '# sample=test_0 direction=image_to_gaze layer=0 head=1 rows=5 cols=3'
        meta, loaded = load_attention_map(path)
        assert meta['direction'] == 'image_to_gaze'
        assert meta['rows'] == '5'
        np.testing.assert_array_equal(loaded, weights)

    def test_single_column(self, tmp_path):
        path = tmp_path / f'a{ATTENTION_SUFFIX}'
        save_attention_map(np.ones((4, 1)), path, sample='s')
        _, loaded = load_attention_map(path)
        assert loaded.shape == (4, 1)

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / f'a{ATTENTION_SUFFIX}'
        path.write_text('# rows=2 cols=2\n0.5 0.5\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_attention_map(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / f'a{ATTENTION_SUFFIX}'
        path.write_text('0.5 0.5\n', encoding='utf-8')
        with pytest.raises(FormatError):
            load_attention_map(path)
