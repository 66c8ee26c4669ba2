"""
Lag-relative token importance scoring for KV chunks.

Chunk p of a head's keys (or values) is min-max normalised per channel with
the statistics of chunk p+1, each token is scored by the softmax over the
chunk of its channel-wise standard deviation, and key and value scores are
summed. No function here takes a query.
"""
import logging
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, reduce_minmax, reduce_std, softmax

class LagkvParams(object):
    """ Sink size, lag size and retention ratio of a run.

    Attributes
    ----------
    sink_size : int
        S, leading tokens that are never evicted
    lag_size : int
        L, chunk length
    retention_ratio : float
        r in (0, 1], fraction of each compressed chunk that is kept
    epsilon : float
        guard added to the max - min denominator
    """
    def __init__(self, sink_size=16, lag_size=32, retention_ratio=0.5, epsilon=1e-6):
        self.sink_size = int(sink_size)
        self.lag_size = int(lag_size)
        self.retention_ratio = float(retention_ratio)
        self.epsilon = float(epsilon)

    def violations(self):
        out = []
        if self.sink_size < 0:
            out.append('lagkv.sink_size (%d) must be >= 0' %(self.sink_size))
        if self.lag_size < 1:
            out.append('lagkv.lag_size (%d) must be >= 1' %(self.lag_size))
        if not (0.0 < self.retention_ratio <= 1.0):
            out.append('lagkv.retention_ratio (%g) must lie in (0, 1]' %(self.retention_ratio))
        if self.epsilon <= 0:
            out.append('lagkv.epsilon (%g) must be > 0' %(self.epsilon))
        return out

    @staticmethod
    def from_config(config):
        return LagkvParams(sink_size=config['sink_size'],
                           lag_size=config['lag_size'],
                           retention_ratio=config['retention_ratio'],
                           epsilon=config.get('epsilon', 1e-6))

    @property
    def retain_count(self):
        """ k = floor(r * L), clamped to [1, L] """
        k = int(np.floor(self.retention_ratio * self.lag_size + 1e-9))
        return min(max(k, 1), self.lag_size)

    def chunk_index(self, position):
        """ 1-based chunk index of an absolute position, 0 for the sink """
        if position < self.sink_size:
            return 0
        return (position - self.sink_size) // self.lag_size + 1

    def chunk_start(self, chunk_index):
        return self.sink_size + (chunk_index - 1) * self.lag_size

    def to_dict(self):
        return {'sink_size': self.sink_size,
                'lag_size': self.lag_size,
                'retention_ratio': self.retention_ratio,
                'epsilon': self.epsilon}

    def __repr__(self):
        return 'LagkvParams(S=%d, L=%d, r=%g, k=%d)' %(self.sink_size, self.lag_size,
                                                      self.retention_ratio, self.retain_count)

class ChunkScores(object):
    """ Per-KV-head importance scores of one chunk.

    Attributes
    ----------
    scores : :obj:`numpy.ndarray`
        [h_kv x L] nonnegative scores, each row sums to 2
    chunk_index : int
        1-based chunk index p
    """
    def __init__(self, scores, chunk_index):
        self.scores = np.atleast_2d(np.asarray(scores))
        self.chunk_index = chunk_index

    @property
    def num_heads(self):
        return self.scores.shape[0]

class RetentionSet(object):
    """ Per-KV-head ascending within-chunk indices of the retained tokens of a chunk """
    def __init__(self, indices, chunk_index):
        self.indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        self.chunk_index = chunk_index

    @property
    def num_heads(self):
        return self.indices.shape[0]

    def positions(self, params):
        """ Absolute positions of the retained tokens, [h_kv x k] """
        return self.indices + params.chunk_start(self.chunk_index)

def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return Tensor(x, dtype=x.dtype)

def normalize_chunk(chunk_p, chunk_next, epsilon):
    """ Normalises a chunk per channel with the min and max of the following chunk.

    Parameters
    ----------
    chunk_p : :obj:`Tensor`
        [L x d_h] keys or values of chunk p
    chunk_next : :obj:`Tensor`
        [L_next x d_h] keys or values of chunk p+1
    epsilon : float
        denominator guard for channels where max == min

    Returns
    -------
    :obj:`Tensor`
        [L x d_h] normalised chunk
    """
    chunk_p = _as_tensor(chunk_p)
    chunk_next = _as_tensor(chunk_next)
    lo, hi = reduce_minmax(chunk_next, axis=0)
    eps = chunk_p.dtype.type(epsilon)
    out = (chunk_p.data - lo.data) / (hi.data - lo.data + eps)
    return Tensor(out, dtype=chunk_p.dtype)

def token_scores(normalized):
    """ Softmax over the chunk's tokens of each token's channel-wise population std """
    normalized = _as_tensor(normalized)
    return softmax(reduce_std(normalized, axis=1), axis=0)

def score_chunk(K_p, V_p, K_next, V_next, params):
    """ Combined key and value score of one head's chunk; sums to 2.

    Returns
    -------
    :obj:`numpy.ndarray`
        L scores
    """
    key_scores = token_scores(normalize_chunk(K_p, K_next, params.epsilon))
    value_scores = token_scores(normalize_chunk(V_p, V_next, params.epsilon))
    return key_scores.data + value_scores.data

def score_heads(K_p, V_p, K_next, V_next, params, chunk_index):
    """ Scores one chunk for every KV head.

    Parameters
    ----------
    K_p, V_p : :obj:`numpy.ndarray`
        [h_kv x L x d_h] keys / values of chunk p
    K_next, V_next : :obj:`numpy.ndarray`
        [h_kv x L x d_h] keys / values of chunk p+1
    params : :obj:`LagkvParams`
    chunk_index : int

    Returns
    -------
    :obj:`ChunkScores`
    """
    scores = np.stack([score_chunk(K_p[h], V_p[h], K_next[h], V_next[h], params)
                       for h in range(K_p.shape[0])])
    return ChunkScores(scores, chunk_index)

def select_topk(scores, k):
    """ Keeps the k highest-scoring tokens of each head.

    Ties go to the lower index and the result is sorted by position.

    Parameters
    ----------
    scores : :obj:`ChunkScores`
    k : int
        retain count, 1 <= k <= L

    Returns
    -------
    :obj:`RetentionSet`
    """
    lag = scores.scores.shape[1]
    if k < 1 or k > lag:
        raise ValueError('Retain count %d outside [1, %d]' %(k, lag))
    indices = []
    for row in scores.scores:
        order = np.argsort(-row, kind='stable')[:k]
        indices.append(np.sort(order))
    return RetentionSet(np.stack(indices), scores.chunk_index)

def score_sequence(K, V, params):
    """ Scores and selects every chunk of a full sequence that has a complete successor.

    Parameters
    ----------
    K, V : :obj:`numpy.ndarray`
        [h_kv x n x d_h] post-rotary keys and values of the whole sequence

    Returns
    -------
    :obj:`collections.OrderedDict`
        chunk index -> (:obj:`ChunkScores`, :obj:`RetentionSet`)
    """
    S, L = params.sink_size, params.lag_size
    n = K.shape[1]
    num_full = max(n - S, 0) // L
    plan = OrderedDict()
    for p in range(1, num_full):
        start = S + (p - 1) * L
        cur = slice(start, start + L)
        nxt = slice(start + L, start + 2 * L)
        scores = score_heads(K[:, cur], V[:, cur], K[:, nxt], V[:, nxt], params, p)
        plan[p] = (scores, select_topk(scores, params.retain_count))
    logging.debug('Scored %d chunks for a sequence of %d tokens' %(len(plan), n))
    return plan

class LagkvScorer(object):
    """ Scores and selects chunks with a fixed set of parameters """
    def __init__(self, params):
        self.params = params

    def score(self, K_p, V_p, K_next, V_next, chunk_index):
        return score_heads(K_p, V_p, K_next, V_next, self.params, chunk_index)

    def select(self, scores):
        return select_topk(scores, self.params.retain_count)
