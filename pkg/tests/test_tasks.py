import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy.special import log_softmax

from lrsa.tasks import TaskInstance, gen_copy_task, gen_needle_task, gen_task, needle_vocab, task_stream
from lrsa.tensor import Rng
from lrsa.utils import ConfigError, TaskType

def test_copy_is_deterministic():
    a = gen_copy_task(Rng(11), 8, 4)
    b = gen_copy_task(Rng(11), 8, 4)
    assert_array_equal(a.tokens, b.tokens)
    assert_array_equal(a.loss_mask, b.loss_mask)

def test_copy_layout():
    instance = gen_copy_task(Rng(12), 8, 4)
    assert len(instance) == 8
    assert_array_equal(instance.tokens[4:], instance.tokens[:4])
    assert_array_equal(instance.targets[:-1], instance.tokens[1:])
    assert_array_equal(instance.answer_positions, [4, 5, 6])
    assert np.all(instance.tokens < 4)

def test_copy_oracle_losses():
    vocab = 4
    instance = gen_copy_task(Rng(13), 16, vocab)
    # an oracle that knows the copied half is certain there and uniform elsewhere
    oracle = np.zeros((16, vocab))
    for i in instance.answer_positions:
        oracle[i, instance.targets[i]] = 50.0
    logp = log_softmax(oracle, axis=1)
    picked = -logp[np.arange(16), instance.targets]
    assert np.max(picked[instance.answer_positions]) < 1e-12
    assert picked[0] == pytest.approx(np.log(vocab))

@pytest.mark.parametrize('seq_len', [2, 7])
def test_copy_rejects_bad_lengths(seq_len):
    with pytest.raises(ConfigError):
        gen_copy_task(Rng(0), seq_len, 4)

def test_needle_vocab_too_small():
    with pytest.raises(ConfigError) as e:
        needle_vocab(3)
    assert e.value.violations == ['model.vocab_size (3) must be >= 4 for the needle task']

def test_needle_vocab_is_disjoint():
    (f_lo, f_hi), (n_lo, n_hi), marker = needle_vocab(16)
    assert (f_lo, f_hi, n_lo, n_hi, marker) == (0, 7, 7, 15, 15)

def test_needle_layout():
    instance = gen_needle_task(Rng(14), 32, 16, needle_len=4)
    meta = instance.metadata
    start, stop = meta['needle_span']
    needle = instance.tokens[start:stop]
    assert meta['needle_position'] == start
    assert stop - start == 4
    assert meta['key_len'] == 2
    assert meta['query_position'] == 32 - 4 - 1
    assert instance.tokens[meta['query_position']] == 15
    assert_array_equal(instance.tokens[-4:], needle)
    assert np.all((needle >= 7) & (needle < 15))
    filler = np.delete(instance.tokens, np.r_[start:stop, meta['query_position']:32])
    assert np.all(filler < 7)
    assert_array_equal(instance.answer_positions, [29, 30])
    assert_array_equal(instance.targets[instance.answer_positions], needle[2:])
    assert meta['answer_span'] == [30, 32]

def test_needle_is_deterministic():
    a = gen_needle_task(Rng(15), 40, 16)
    b = gen_needle_task(Rng(15), 40, 16)
    assert_array_equal(a.tokens, b.tokens)
    assert a.metadata == b.metadata

def test_needle_too_long():
    with pytest.raises(ConfigError) as e:
        gen_needle_task(Rng(0), 9, 16, needle_len=4)
    assert len(e.value.violations) == 1
    with pytest.raises(ConfigError):
        gen_needle_task(Rng(0), 32, 3)

def test_round_trip_through_dict():
    instance = gen_needle_task(Rng(16), 24, 16)
    loaded = TaskInstance.from_dict(instance.to_dict())
    assert_array_equal(loaded.tokens, instance.tokens)
    assert_array_equal(loaded.loss_mask, instance.loss_mask)
    assert loaded.metadata['needle_span'] == instance.metadata['needle_span']

def test_inconsistent_lengths():
    with pytest.raises(ValueError):
        TaskInstance([1, 2, 3], [2, 3], [1, 1, 1])

def test_stream_and_dispatch():
    stream = task_stream(Rng(17), TaskType.NEEDLE, 24, 16)
    first, second = next(stream), next(stream)
    assert len(first) == len(second) == 24
    assert not np.array_equal(first.tokens, second.tokens)
    with pytest.raises(ValueError):
        gen_task(Rng(0), 'sort', 24, 16)
