import numpy as np
import pytest

from fixformer.bench import BenchConfig, padded_attention, profile_lengths, run_bench
from fixformer.errors import ContractError
from fixformer.layers import init_attention
from fixformer.ragged import build, ragged_attention
from fixformer.tensor import Tensor, nan_guard


class TestProfiles:
    def test_lengths(self):
        assert profile_lengths('equal', 3) == [16, 16, 16]
        assert profile_lengths('mixed', 4) == [1, 32, 1, 32]
        assert profile_lengths('skewed', 20) == [4] * 18 + [64] * 2
        assert profile_lengths('skewed', 3) == [4, 4, 64]
        with pytest.raises(ContractError):
            profile_lengths('uniform', 3)

    def test_config_contracts(self):
        with pytest.raises(ContractError):
            BenchConfig(profile='uniform')
        with pytest.raises(ContractError):
            BenchConfig(d_model=10, n_heads=4)


class TestPaddedBaseline:
    def test_agrees_with_ragged(self, rng):
        lengths = [3, 1, 6]
        params = init_attention(8, 2, rng)
        seqs = [rng.standard_normal((t, 8)) for t in lengths]
        padded = np.zeros((3, 6, 8))
        for i, seq in enumerate(seqs):
            padded[i, :len(seq)] = seq
        with nan_guard(False):
            baseline = padded_attention(padded, lengths, params)
        batch = build([Tensor(s) for s in seqs])
        ragged = ragged_attention(batch, batch, batch, params)
        for i, element in enumerate(ragged.split()):
            np.testing.assert_allclose(baseline[i, :lengths[i]], element.data, rtol=0, atol=1e-10)


class TestRunBench:
    def test_equal_lengths_waste_nothing(self):
        result = run_bench(BenchConfig(profile='equal', batch_size=4, d_model=8, n_heads=2, repeats=1))
        assert result.ragged_values == result.padded_values == 4 * 16 * 8
        assert result.ratio == 1.0

    def test_mixed(self):
        result = run_bench(BenchConfig(profile='mixed', batch_size=20, d_model=8, n_heads=2, repeats=1))
        assert result.ragged_values == 10 * 33 * 8
        assert result.padded_values == 20 * 32 * 8
        assert result.ratio == pytest.approx(330 / 640)

    def test_skewed_matches_closed_form(self):
        result = run_bench(BenchConfig(profile='skewed', batch_size=20, d_model=16, n_heads=4, repeats=1))
        assert result.ratio == pytest.approx(200 / 1280)
        assert result.ratio == pytest.approx(result.closed_form_ratio)
        assert result.n_tokens == 200
        assert result.ragged_seconds > 0
        assert result.ragged_tokens_per_second > 0
