import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lrsa.attention import (OpCounter, PrefillState, attend, build_visibility, causal_mask, decode_step,
                            full_causal_entries, lrsa_entry_bound, lrsa_mask, prefill, rope_apply)
from lrsa.lagkv import LagkvParams, RetentionSet
from lrsa.tensor import Tensor, reduce_sum
from lrsa.utils import AttentionMode, ConfigError, DegenerateRowError, SequencingError

from conftest import make_model, random_tokens

def t(x, requires_grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)

def random_plan(n, params, num_kv_heads=1, seed=0):
    """ Random ascending retention sets for every chunk that has a complete successor """
    rng = np.random.RandomState(seed)
    num_full = max(n - params.sink_size, 0) // params.lag_size
    plan = {}
    for p in range(1, num_full):
        rows = [np.sort(rng.permutation(params.lag_size)[:params.retain_count]) for _ in range(num_kv_heads)]
        plan[p] = RetentionSet(np.stack(rows), p)
    return plan

class TestRope(object):
    def test_position_zero_is_identity(self):
        x = np.random.RandomState(0).randn(1, 4)
        assert_array_equal(rope_apply(t(x), [0]).data, x)

    def test_unit_rotation(self):
        assert_allclose(rope_apply(t([[1.0, 0.0]]), [1]).data, [[np.cos(1.0), np.sin(1.0)]], rtol=1e-15)

    def test_norm_preserved(self):
        x = np.random.RandomState(1).randn(6, 8)
        out = rope_apply(t(x), np.arange(6) * 37).data
        assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), atol=1e-12)

    def test_odd_head_dim(self):
        with pytest.raises(ConfigError):
            rope_apply(t(np.ones((2, 3))), [0, 1])

class TestAttend(object):
    def test_equal_weights(self):
        assert_allclose(attend(t([[1.0]]), t([[1.0], [1.0]]), t([[2.0], [4.0]]), np.zeros((1, 2))).data, [[3.0]])

    def test_masked_key(self):
        mask = np.array([[0.0, -np.inf]])
        assert_allclose(attend(t([[1.0]]), t([[1.0], [1.0]]), t([[2.0], [4.0]]), mask).data, [[2.0]])

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateRowError):
            attend(t([[1.0]]), t([[1.0], [1.0]]), t([[2.0], [4.0]]), np.full((1, 2), -np.inf))

    def test_rejects_soft_masks(self):
        with pytest.raises(ValueError):
            attend(t([[1.0]]), t([[1.0], [1.0]]), t([[2.0], [4.0]]), np.array([[0.0, -1.0]]))

    def test_matches_gathered_dense_attention(self):
        rng = np.random.RandomState(2)
        Q, K, V = rng.randn(5, 4), rng.randn(9, 4), rng.randn(9, 4)
        visible = rng.rand(5, 9) < 0.5
        visible[:, 0] = True
        mask = np.where(visible, 0.0, -np.inf)
        counter = OpCounter()
        out = attend(t(Q), t(K), t(V), mask, counter).data
        assert counter.entries == np.count_nonzero(visible)
        for i in range(5):
            cols = np.nonzero(visible[i])[0]
            row = attend(t(Q[i:i + 1]), t(K[cols]), t(V[cols])).data
            assert_allclose(out[i:i + 1], row, atol=1e-12)

class TestVisibility(object):
    def test_first_chunk_sees_sink(self, params):
        spec = build_visibility(1, {}, params, 1)
        assert_array_equal(spec.attendable(0, 3), [0, 1, 2, 3])

    def test_second_chunk_sees_window(self, params):
        spec = build_visibility(2, {}, params, 1)
        assert_array_equal(spec.attendable(0, 6), [0, 1, 2, 3, 4, 5, 6])

    def test_third_chunk_sees_retained(self, params):
        spec = build_visibility(3, {1: RetentionSet([[1, 3]], 1)}, params, 1)
        assert_array_equal(spec.attendable(0, 11), [0, 1, 3, 5, 6, 7, 8, 9, 10, 11])

    def test_missing_retention(self, params):
        with pytest.raises(SequencingError):
            build_visibility(3, {}, params, 1)

    def test_no_row_fully_masked(self, params):
        n = 2 + 5 * 4 + 3
        mask = lrsa_mask(n, random_plan(n, params, 2), params, 2)
        assert mask.shape == (2, n, n)
        assert np.all(np.any(mask == 0, axis=2))
        assert np.all(mask[:, np.triu_indices(n, 1)[0], np.triu_indices(n, 1)[1]] == -np.inf)

@pytest.mark.parametrize('n', [2, 5, 6, 10, 13, 22, 30])
def test_entry_bound_counts_mask(params, n):
    mask = lrsa_mask(n, random_plan(n, params, 1, seed=n), params, 1)
    assert np.count_nonzero(mask[0] == 0) == lrsa_entry_bound(n, params)
    assert lrsa_entry_bound(n, params) <= full_causal_entries(n)

def test_full_retention_bound_is_causal():
    params = LagkvParams(2, 4, 1.0)
    for n in range(0, 40):
        assert lrsa_entry_bound(n, params) == full_causal_entries(n)
    assert np.count_nonzero(causal_mask(7) == 0) == full_causal_entries(7)

class TestPrefill(object):
    def test_matches_masked_forward(self, params):
        model = make_model(params)
        tokens = random_tokens(2 + 4 * 4 + 1)
        state = PrefillState.for_model(model)
        hidden = prefill(state, tokens, model)
        expected = model.forward(tokens, AttentionMode.LRSA).data
        assert_allclose(model.project(hidden).data, expected, atol=1e-12)
        assert state.op_counter.per_head == lrsa_entry_bound(len(tokens), params)
        assert state.cache.token_count == 2 + 3 * 2 + 4 + 1

    def test_chunks_per_step_is_bitwise_stable(self, params):
        model = make_model(params)
        tokens = random_tokens(2 + 4 * 4, seed=3)
        outputs = []
        for chunks_per_step in [1, 2, 4]:
            state = PrefillState.for_model(model, chunks_per_step=chunks_per_step)
            outputs.append(prefill(state, tokens, model).data)
        assert_array_equal(outputs[0], outputs[1])
        assert_array_equal(outputs[0], outputs[2])

    def test_single_chunk_is_causal(self, params):
        model = make_model(params)
        tokens = random_tokens(2 + 4, seed=4)
        hidden = prefill(PrefillState.for_model(model), tokens, model)
        assert_allclose(model.project(hidden).data, model.forward(tokens, AttentionMode.VANILLA).data, atol=1e-12)

    def test_full_retention_is_causal(self):
        params = LagkvParams(2, 4, 1.0)
        model = make_model(params)
        tokens = random_tokens(2 + 5 * 4 + 2, seed=5)
        hidden = prefill(PrefillState.for_model(model), tokens, model)
        assert_allclose(model.project(hidden).data, model.forward(tokens, AttentionMode.VANILLA).data, atol=1e-12)

    def test_too_short(self, params):
        model = make_model(params)
        with pytest.raises(SequencingError):
            prefill(PrefillState.for_model(model), [1], model)

    def test_chunks_per_step_must_be_positive(self, params):
        with pytest.raises(ConfigError):
            PrefillState.for_model(make_model(params), chunks_per_step=0)

class TestDecode(object):
    def test_before_prefill(self, params):
        model = make_model(params)
        with pytest.raises(SequencingError):
            decode_step(PrefillState.for_model(model), 1, model)

    def test_first_token_matches_masked_forward(self, params):
        model = make_model(params)
        tokens = random_tokens(2 + 2 * 4 + 3, seed=6)
        state = PrefillState.for_model(model)
        prefill(state, tokens[:-1], model)
        logits = decode_step(state, tokens[-1], model)
        expected = model.forward(tokens, AttentionMode.LRSA).data[-1]
        assert_allclose(logits, expected, atol=1e-12)

    def test_one_compression_per_lag(self, params):
        model = make_model(params)
        state = PrefillState.for_model(model)
        prefill(state, random_tokens(2 + 2 * 4, seed=7), model)
        before = state.compression_events
        for token in random_tokens(4, seed=8):
            decode_step(state, token, model)
        assert state.compression_events - before == 1

    def test_ops_per_step(self, params):
        model = make_model(params)
        state = PrefillState.for_model(model)
        prefill(state, random_tokens(2 + 4 + 1, seed=9), model)
        for token in random_tokens(9, seed=10):
            cached = state.cache.token_count
            entries = state.op_counter.per_head
            decode_step(state, token, model)
            assert state.op_counter.per_head - entries == cached + 1
            assert state.cache.token_count <= cached + 1

@pytest.mark.parametrize('t_pos', [1, 5, 6, 9, 10, 14, 17])
def test_lrsa_forward_is_causal(params, t_pos):
    model = make_model(params)
    tokens = random_tokens(22, seed=12)
    changed = tokens.copy()
    changed[t_pos] = (changed[t_pos] + 1) % 16
    base = model.forward(tokens, AttentionMode.LRSA).data
    moved = model.forward(changed, AttentionMode.LRSA).data
    assert_allclose(moved[:t_pos], base[:t_pos], rtol=0, atol=1e-13)
    assert not np.array_equal(moved[t_pos], base[t_pos])

def test_evicted_values_get_no_gradient(params):
    n = 2 + 3 * 4
    plan = random_plan(n, params, 1, seed=11)
    mask = lrsa_mask(n, plan, params, 1)[0][10:]
    rng = np.random.RandomState(12)
    Q = t(rng.randn(4, 4))
    K = t(rng.randn(n, 4))
    V = t(rng.randn(n, 4), requires_grad=True)
    reduce_sum(attend(Q, K, V, mask)).backward()
    retained = set(plan[1].positions(params)[0].tolist())
    for pos in range(2, 6):
        if pos in retained:
            assert np.all(V.grad[pos] != 0)
        else:
            assert np.all(V.grad[pos] == 0)
