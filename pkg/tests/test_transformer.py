import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lrsa.lagkv import LagkvParams
from lrsa.model import ToyTransformer, get_lrsa_model, load_checkpoint, save_checkpoint
from lrsa.utils import AttentionMode, CheckpointError, ConfigError, TokenRangeError

from conftest import TINY_MODEL, make_model, random_tokens

def test_factory():
    assert get_lrsa_model('numpy') is ToyTransformer
    with pytest.raises(ValueError):
        get_lrsa_model('tf')

def test_same_seed_same_weights(params):
    a, b = make_model(params, seed=3), make_model(params, seed=3)
    assert list(a.weights.keys()) == list(b.weights.keys())
    for name in a.weights:
        assert_array_equal(a.weights[name].data, b.weights[name].data)
    assert a.num_parameters == b.num_parameters

def test_all_violations_reported(params):
    with pytest.raises(ConfigError) as e:
        make_model(params, num_heads=3, num_kv_heads=2, head_dim=3, d_model=9, num_layers=0)
    assert len(e.value.violations) == 3

def test_full_retention_reduces_to_vanilla():
    model = make_model(LagkvParams(2, 4, 1.0))
    tokens = random_tokens(2 + 4 * 4 + 3, seed=1)
    assert_array_equal(model.forward(tokens, AttentionMode.LRSA).data,
                       model.forward(tokens, AttentionMode.VANILLA).data)

def test_single_token(tiny_model):
    assert_array_equal(tiny_model.forward([5], AttentionMode.LRSA).data,
                       tiny_model.forward([5], AttentionMode.VANILLA).data)

def test_logits_shape(tiny_model):
    logits = tiny_model.forward(random_tokens(9), AttentionMode.VANILLA)
    assert logits.shape == (9, TINY_MODEL['vocab_size'])

def test_frozen_plan_reproduces_forward(tiny_model):
    tokens = random_tokens(2 + 3 * 4, seed=2)
    plan = tiny_model.plan_retention(tokens)
    assert len(plan) == tiny_model.num_layers
    assert list(plan[0].keys()) == [1, 2]
    assert_array_equal(tiny_model.forward(tokens, AttentionMode.LRSA, plan=plan).data,
                       tiny_model.forward(tokens, AttentionMode.LRSA).data)

def test_sparse_mode_differs_once_chunks_are_evicted(tiny_model):
    tokens = random_tokens(2 + 4 * 4, seed=3)
    lrsa = tiny_model.forward(tokens, AttentionMode.LRSA).data
    vanilla = tiny_model.forward(tokens, AttentionMode.VANILLA).data
    assert_array_equal(lrsa[:10], vanilla[:10])
    assert np.max(np.abs(lrsa[10:] - vanilla[10:])) > 0

def test_token_range(tiny_model):
    with pytest.raises(TokenRangeError):
        tiny_model.forward([1, 16], AttentionMode.VANILLA)
    with pytest.raises(TokenRangeError):
        tiny_model.forward([-1], AttentionMode.VANILLA)

def test_unknown_mode(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.forward([1], 'dense')

def test_grouped_heads_match_duplicated_kv_heads(params):
    grouped = make_model(params, seed=4)
    expanded = make_model(params, seed=4, num_kv_heads=2)
    for name, w in grouped.weights.items():
        if name.endswith('_wk') or name.endswith('_wv'):
            expanded.weights[name].data = np.concatenate([w.data, w.data], axis=1)
        else:
            expanded.weights[name].data = w.data.copy()
    tokens = random_tokens(2 + 3 * 4 + 1, seed=5)
    for mode in [AttentionMode.VANILLA, AttentionMode.LRSA]:
        assert_allclose(expanded.forward(tokens, mode).data, grouped.forward(tokens, mode).data, atol=1e-12)

def test_lrsa_loss_backward(tiny_model):
    tokens = random_tokens(2 + 3 * 4, seed=6)
    targets = np.append(tokens[1:], 0)
    tiny_model.zero_grad()
    loss = tiny_model.loss(tokens, targets, AttentionMode.LRSA)
    loss.backward()
    assert np.isfinite(loss.item())
    for w in tiny_model.weights.values():
        assert w.grad is not None
        assert np.all(np.isfinite(w.grad))

def test_checkpoint_round_trip(tiny_model, tmp_path):
    filename = str(tmp_path / 'model.lrsa')
    save_checkpoint(tiny_model, filename)
    loaded = load_checkpoint(filename)
    assert loaded.config == tiny_model.config
    assert loaded.lagkv_params.lag_size == tiny_model.lagkv_params.lag_size
    tokens = random_tokens(2 + 2 * 4 + 1, seed=7)
    assert_array_equal(loaded.forward(tokens, AttentionMode.LRSA).data,
                       tiny_model.forward(tokens, AttentionMode.LRSA).data)

def test_checkpoint_bad_magic(tmp_path):
    filename = str(tmp_path / 'bad.lrsa')
    with open(filename, 'wb') as f:
        f.write(b'GQCN\x01\x00\x00\x00')
    with pytest.raises(CheckpointError):
        load_checkpoint(filename)

def test_checkpoint_truncated(tiny_model, tmp_path):
    filename = str(tmp_path / 'model.lrsa')
    tiny_model.save(filename)
    with open(filename, 'rb') as f:
        buf = f.read()
    with open(filename, 'wb') as f:
        f.write(buf[:-16])
    with pytest.raises(CheckpointError):
        ToyTransformer.load(filename)
