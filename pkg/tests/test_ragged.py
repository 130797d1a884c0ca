import numpy as np
import pytest

from fixformer.errors import ContractError, DimensionError
from fixformer.layers import init_attention
from fixformer.ragged import (
    RaggedBatch,
    build,
    get_num_threads,
    ragged_attention,
    ragged_cross_attention,
    set_num_threads
)
from fixformer.tensor import GradTape, Tensor, sum_


def _padded_oracle(q_seqs, kv_seqs, params):
    """Padded, masked multi-head attention computed one query row at a time."""
    n_heads = params.n_heads
    d_model = params.d_model
    head_dim = d_model // n_heads
    wq, bq = params.q.weight.data, params.q.bias.data
    wk, bk = params.k.weight.data, params.k.bias.data
    wv, bv = params.v.weight.data, params.v.bias.data
    wo, bo = params.out.weight.data, params.out.bias.data
    t_kv = max(len(s) for s in kv_seqs)

    outputs = []
    for q_seq, kv_seq in zip(q_seqs, kv_seqs):
        padded = np.zeros((t_kv, d_model))
        padded[:len(kv_seq)] = kv_seq
        mask = np.arange(t_kv) >= len(kv_seq)
        keys = padded @ wk.T + bk
        values = padded @ wv.T + bv
        rows = []
        for row in q_seq:
            query = row @ wq.T + bq
            context = np.zeros(d_model)
            for h in range(n_heads):
                cols = slice(h * head_dim, (h + 1) * head_dim)
                scores = keys[:, cols] @ query[cols] / np.sqrt(head_dim)
                scores[mask] = -np.inf
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                context[cols] = weights @ values[:, cols]
            rows.append(context @ wo.T + bo)
        outputs.append(np.array(rows))
    return outputs


def _random_lengths(rng, batch, max_len):
    return [int(t) for t in rng.integers(1, max_len + 1, batch)]


class TestRaggedBatch:
    def test_build_offsets(self, rng):
        seqs = [Tensor(rng.standard_normal((t, 4))) for t in (2, 5, 1)]
        batch = build(seqs)
        assert batch.offsets == (0, 2, 7, 8)
        assert batch.lengths == (2, 5, 1)
        assert batch.batch_size == 3
        assert batch.width == 4
        assert batch.max_length == 5
        for seq, part in zip(seqs, batch.split()):
            np.testing.assert_array_equal(seq.data, part.data)

    def test_first_rows(self):
        batch = build([Tensor(np.full((2, 3), 1.0)), Tensor(np.full((3, 3), 2.0))])
        np.testing.assert_array_equal(batch.first_rows().data, [[1, 1, 1], [2, 2, 2]])

    def test_invalid_offsets(self):
        values = Tensor(np.zeros((4, 2)))
        with pytest.raises(ContractError):
            RaggedBatch(values, (0, 2, 3))
        with pytest.raises(ContractError):
            RaggedBatch(values, (0, 2, 2, 4))
        with pytest.raises(ContractError):
            RaggedBatch(values, (1, 4))

    def test_build_rejects_mixed_widths(self):
        with pytest.raises(DimensionError):
            build([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])
        with pytest.raises(ContractError):
            build([])


class TestRaggedAttention:
    def test_matches_padded_oracle_over_random_profiles(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            batch_size = int(rng.integers(1, 9))
            d_model, n_heads = 8, 2
            params = init_attention(d_model, n_heads, rng)
            q_seqs = [rng.standard_normal((t, d_model)) for t in _random_lengths(rng, batch_size, 32)]
            kv_seqs = [rng.standard_normal((t, d_model)) for t in _random_lengths(rng, batch_size, 32)]
            queries = build([Tensor(s) for s in q_seqs])
            kv = build([Tensor(s) for s in kv_seqs])
            out = ragged_cross_attention(queries, kv, params)
            for got, expected in zip(out.split(), _padded_oracle(q_seqs, kv_seqs, params)):
                np.testing.assert_allclose(got.data, expected, rtol=0, atol=1e-10)

    def test_no_leakage_between_elements(self, rng):
        params = init_attention(8, 2, rng)
        first = Tensor(rng.standard_normal((3, 8)))
        kv_a = build([first, Tensor(rng.standard_normal((4, 8)))])
        kv_b = build([first, Tensor(rng.standard_normal((2, 8)) * 50)])
        q = build([Tensor(rng.standard_normal((2, 8))), Tensor(rng.standard_normal((5, 8)))])
        out_a = ragged_attention(q, kv_a, kv_a, params).element(0).data
        out_b = ragged_attention(q, kv_b, kv_b, params).element(0).data
        np.testing.assert_allclose(out_a, out_b, rtol=1e-12, atol=1e-14)

    def test_single_key_gives_unit_weights(self, rng):
        params = init_attention(8, 4, rng)
        seen = {}
        q = build([Tensor(rng.standard_normal((5, 8)))])
        kv = build([Tensor(rng.standard_normal((1, 8)))])
        ragged_cross_attention(q, kv, params, lambda i, w: seen.setdefault(i, w))
        assert seen[0].shape == (4, 5, 1)
        np.testing.assert_array_equal(seen[0], np.ones((4, 5, 1)))

    def test_weight_rows_sum_to_one(self, rng):
        params = init_attention(8, 2, rng)
        seen = []
        q = build([Tensor(rng.standard_normal((t, 8))) for t in (3, 6)])
        kv = build([Tensor(rng.standard_normal((t, 8))) for t in (4, 2)])
        ragged_cross_attention(q, kv, params, lambda i, w: seen.append((i, w)))
        assert [w.shape for _, w in seen] == [(2, 3, 4), (2, 6, 2)]
        for _, weights in seen:
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-15)

    def test_contract_checks(self, rng):
        params = init_attention(8, 2, rng)
        one = build([Tensor(np.ones((2, 8)))])
        two = build([Tensor(np.ones((2, 8))), Tensor(np.ones((1, 8)))])
        with pytest.raises(ContractError):
            ragged_attention(one, two, two, params)
        with pytest.raises(ContractError):
            ragged_attention(two, two, build([Tensor(np.ones((1, 8))), Tensor(np.ones((2, 8)))]), params)
        narrow = build([Tensor(np.ones((2, 4)))])
        with pytest.raises(DimensionError):
            ragged_attention(narrow, narrow, narrow, params)

    def test_gradients_match_finite_differences(self, rng):
        params = init_attention(4, 2, rng)
        q_data = [rng.standard_normal((t, 4)) for t in (2, 3)]
        kv_data = [rng.standard_normal((t, 4)) for t in (3, 1)]
        weights = rng.standard_normal((5, 4))
        q_leaves = [Tensor(d, requires_grad=True) for d in q_data]
        kv_leaves = [Tensor(d, requires_grad=True) for d in kv_data]

        def _loss_value() -> float:
            out = ragged_cross_attention(
                build([Tensor(t.data) for t in q_leaves]),
                build([Tensor(t.data) for t in kv_leaves]),
                params
            )
            return float((out.values.data * weights).sum())

        with GradTape() as tape:
            out = ragged_cross_attention(build(q_leaves), build(kv_leaves), params)
            loss = sum_(out.values * Tensor(weights))
        tape.backward(loss)

        step = 1e-6
        for leaf in q_leaves + kv_leaves:
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                upper = _loss_value()
                flat[i] = original - step
                lower = _loss_value()
                flat[i] = original
                assert leaf.grad.reshape(-1)[i] == pytest.approx((upper - lower) / (2 * step), rel=1e-5, abs=1e-8)

    def test_threaded_result_is_identical(self, rng):
        params = init_attention(8, 2, rng)
        q = build([Tensor(rng.standard_normal((t, 8))) for t in (3, 7, 1, 4)])
        kv = build([Tensor(rng.standard_normal((t, 8))) for t in (2, 5, 6, 1)])
        serial = ragged_cross_attention(q, kv, params).values.data
        set_num_threads(3)
        assert get_num_threads() == 3
        threaded = ragged_cross_attention(q, kv, params).values.data
        np.testing.assert_array_equal(serial, threaded)

    def test_thread_count_must_be_positive(self):
        with pytest.raises(ContractError):
            set_num_threads(0)
