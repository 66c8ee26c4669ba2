"""
Synthetic sequence tasks: copy (the second half repeats the first) and
needle retrieval (recall a key / value span planted in filler text).
"""
import logging
from collections import OrderedDict

import numpy as np

from .utils import ConfigError, TaskType

class TaskInstance(object):
    """ One training or evaluation sequence.

    Attributes
    ----------
    tokens : :obj:`numpy.ndarray`
        n input ids
    targets : :obj:`numpy.ndarray`
        n next-token ids; the last position has no successor and a zero weight
    loss_mask : :obj:`numpy.ndarray`
        n weights, 1 where the target counts toward the loss
    metadata : :obj:`collections.OrderedDict`
        task-specific fields, JSON-serialisable
    """
    def __init__(self, tokens, targets, loss_mask, metadata=None):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.loss_mask = np.asarray(loss_mask, dtype=np.float64)
        self.metadata = metadata if metadata is not None else OrderedDict()
        if not (self.tokens.shape == self.targets.shape == self.loss_mask.shape):
            raise ValueError('Inconsistent task lengths: tokens %s, targets %s, mask %s'
                             %(self.tokens.shape, self.targets.shape, self.loss_mask.shape))

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def answer_positions(self):
        """ Positions whose targets are scored """
        return np.nonzero(self.loss_mask > 0)[0]

    def to_dict(self):
        return OrderedDict([('tokens', self.tokens.tolist()),
                            ('targets', self.targets.tolist()),
                            ('loss_mask', self.loss_mask.astype(np.int64).tolist()),
                            ('metadata', self.metadata)])

    @staticmethod
    def from_dict(obj):
        return TaskInstance(obj['tokens'], obj['targets'], obj['loss_mask'],
                            OrderedDict(obj.get('metadata', {})))

def _shifted_targets(sequence):
    return np.append(sequence[1:], 0)

def gen_copy_task(rng, seq_len, vocab_size):
    """ Random first half, second half repeats it.

    The loss covers positions [n/2, n-1): each predicts a copied token whose
    source lies a fixed half-sequence back. Predicting the first copied token
    needs an absolute position, so it is left out.

    Parameters
    ----------
    rng : :obj:`Rng`
    seq_len : int
        even sequence length n >= 4
    vocab_size : int

    Returns
    -------
    :obj:`TaskInstance`
    """
    if seq_len < 4 or seq_len % 2 != 0:
        raise ConfigError(['task.seq_len (%d) must be even and >= 4 for the copy task' %(seq_len)])
    half = seq_len // 2
    first = rng.integers(0, vocab_size, size=half)
    sequence = np.concatenate([first, first])
    loss_mask = np.zeros(seq_len)
    loss_mask[half:seq_len - 1] = 1.0
    metadata = OrderedDict([('task', TaskType.COPY), ('seq_len', seq_len), ('copy_start', half)])
    return TaskInstance(sequence, _shifted_targets(sequence), loss_mask, metadata)

def needle_vocab(vocab_size):
    """ Filler ids, needle ids and the query marker; filler and needle ranges are disjoint """
    if vocab_size < 4:
        raise ConfigError(['model.vocab_size (%d) must be >= 4 for the needle task' %(vocab_size)])
    query_marker = vocab_size - 1
    split = (vocab_size - 1) // 2
    return (0, split), (split, query_marker), query_marker

def gen_needle_task(rng, seq_len, vocab_size, needle_len=4):
    """ Plants a key / value needle in filler and asks for the value at the end.

    The sequence ends with the query marker, the key tokens and the value
    tokens; the loss covers the predictions of the value tokens there.

    Parameters
    ----------
    rng : :obj:`Rng`
    seq_len : int
    vocab_size : int
    needle_len : int
        key plus value length, >= 2; the first half (at least one token) is the key

    Returns
    -------
    :obj:`TaskInstance`
    """
    violations = []
    if needle_len < 2:
        violations.append('task.needle_len (%d) must be >= 2' %(needle_len))
    if 2 * needle_len + 1 >= seq_len:
        violations.append('task.needle_len (%d) too long for seq_len %d: needle, query marker and answer must fit'
                          %(needle_len, seq_len))
    if len(violations) > 0:
        raise ConfigError(violations)
    (filler_lo, filler_hi), (needle_lo, needle_hi), query_marker = needle_vocab(vocab_size)
    key_len = max(1, needle_len // 2)

    needle = rng.integers(needle_lo, needle_hi, size=needle_len)
    query_start = seq_len - needle_len - 1
    needle_pos = int(rng.integers(0, query_start - needle_len + 1))

    sequence = rng.integers(filler_lo, filler_hi, size=seq_len)
    sequence[needle_pos:needle_pos + needle_len] = needle
    sequence[query_start] = query_marker
    sequence[query_start + 1:] = needle

    # positions predicting the value tokens of the final copy
    answer_start = query_start + key_len
    loss_mask = np.zeros(seq_len)
    loss_mask[answer_start:seq_len - 1] = 1.0
    metadata = OrderedDict([('task', TaskType.NEEDLE),
                            ('seq_len', seq_len),
                            ('needle_position', needle_pos),
                            ('needle_span', [needle_pos, needle_pos + needle_len]),
                            ('key_len', key_len),
                            ('query_position', query_start),
                            ('answer_span', [answer_start + 1, seq_len])])
    return TaskInstance(sequence, _shifted_targets(sequence), loss_mask, metadata)

def gen_task(rng, task_type, seq_len, vocab_size, needle_len=4):
    if task_type == TaskType.COPY:
        return gen_copy_task(rng, seq_len, vocab_size)
    elif task_type == TaskType.NEEDLE:
        return gen_needle_task(rng, seq_len, vocab_size, needle_len)
    raise ValueError('Task type %s not supported' %(task_type))

def task_stream(rng, task_type, seq_len, vocab_size, needle_len=4):
    """ Endless generator of task instances """
    logging.debug('Streaming %s tasks of length %d' %(task_type, seq_len))
    while True:
        yield gen_task(rng, task_type, seq_len, vocab_size, needle_len)
