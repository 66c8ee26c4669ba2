"""
Rotary embedding, masked grouped-query attention, the LRSA visibility rule and
the chunk-by-chunk Attn-Fill prefill / decode state machine.

Queries of chunk q attend the sink, the retained tokens of chunks <= q-2, all
of chunk q-1 and causally their own chunk. The mask never depends on a query,
so attending a full cache under the additive mask and attending the physically
compacted cache without a mask give the same result.
"""
import logging
import time

import numpy as np

from .kv_cache import SegmentedKvCache
from .lagkv import LagkvScorer
from .tensor import Tensor, add_constant, matmul, scale, softmax, transpose
from .utils import ConfigError, DimensionError, SequencingError

class AttnConfig(object):
    """ Attention dimensions.

    Attributes
    ----------
    d_model : int
        model width d
    num_heads : int
        query heads h
    num_kv_heads : int
        key / value heads h_kv, dividing h
    head_dim : int
        d_h, even
    rope_base : float
        rotary base theta
    """
    def __init__(self, d_model, num_heads, num_kv_heads, head_dim, rope_base=10000.0):
        self.d_model = int(d_model)
        self.num_heads = int(num_heads)
        self.num_kv_heads = int(num_kv_heads)
        self.head_dim = int(head_dim)
        self.rope_base = float(rope_base)
        violations = self.violations()
        if len(violations) > 0:
            raise ConfigError(violations)

    def violations(self):
        out = []
        if self.d_model != self.num_heads * self.head_dim:
            out.append('model.d_model (%d) must equal num_heads * head_dim (%d)' %(self.d_model, self.num_heads * self.head_dim))
        if self.num_kv_heads < 1 or self.num_heads % self.num_kv_heads != 0:
            out.append('model.num_heads (%d) must be divisible by model.num_kv_heads (%d)' %(self.num_heads, self.num_kv_heads))
        if self.head_dim % 2 != 0:
            out.append('model.head_dim (%d) must be even for rotary embedding' %(self.head_dim))
        return out

    @property
    def group_size(self):
        return self.num_heads // self.num_kv_heads

    def kv_head(self, query_head):
        return query_head // self.group_size

class OpCounter(object):
    """ Counts attention score entries that are not masked out.

    Entries are accumulated over every (layer, KV head) pair; per_head divides
    by the number of pairs since the visibility sizes are uniform across them.
    """
    def __init__(self, num_units=1):
        self.num_units = num_units
        self.entries = 0

    def add(self, count):
        self.entries += int(count)

    @property
    def per_head(self):
        return self.entries // self.num_units

    def reset(self):
        self.entries = 0

def rope_apply(x, positions, base=10000.0):
    """ Rotates channel pairs (2j, 2j+1) by pos * base^(-2j/d_h).

    Parameters
    ----------
    x : :obj:`Tensor`
        [n x d_h] rows to rotate
    positions : :obj:`numpy.ndarray`
        n absolute positions

    Returns
    -------
    :obj:`Tensor`
        rotated rows

    Raises
    ------
    :obj:`ConfigError`
        for an odd head dimension
    """
    n, d_h = x.shape
    if d_h % 2 != 0:
        raise ConfigError(['head_dim (%d) must be even for rotary embedding' %(d_h)])
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.shape[0] != n:
        raise DimensionError('rope_apply', x.shape, positions.shape)
    inv_freq = base ** (-np.arange(0, d_h, 2, dtype=np.float64) / d_h)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)

    even, odd = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos

    def backward(g):
        g_even, g_odd = g[:, 0::2], g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = g_even * cos + g_odd * sin
        gx[:, 1::2] = -g_even * sin + g_odd * cos
        return (gx,)
    return Tensor.from_op(out, (x,), backward)

def attend(Q, K, V, mask=None, counter=None):
    """ softmax(Q K^T / sqrt(d_h) + mask) V.

    Parameters
    ----------
    Q : :obj:`Tensor`
        [n_q x d_h]
    K, V : :obj:`Tensor`
        [T x d_h]
    mask : :obj:`numpy.ndarray`
        additive [n_q x T] mask of 0 / -inf entries, None for no mask
    counter : :obj:`OpCounter`
        incremented by the number of unmasked entries

    Returns
    -------
    :obj:`Tensor`
        [n_q x d_h]

    Raises
    ------
    :obj:`DegenerateRowError`
        when a row is fully masked
    """
    n_q, T = Q.shape[0], K.shape[0]
    scores = scale(matmul(Q, transpose(K)), 1.0 / np.sqrt(Q.shape[1]))
    if mask is not None:
        if mask.shape != (n_q, T):
            raise DimensionError('attend mask', mask.shape, (n_q, T))
        if not np.all((mask == 0) | np.isneginf(mask)):
            raise ValueError('Attention mask entries must be 0 or -inf')
        scores = add_constant(scores, mask)
        count = np.count_nonzero(mask == 0)
    else:
        count = n_q * T
    if counter is not None:
        counter.add(count)
    return matmul(softmax(scores, axis=-1), V)

class VisibilitySpec(object):
    """ Attendable key positions for the queries of one chunk.

    Attributes
    ----------
    chunk_index : int
        q, 0 for the sink
    q_start, q_end : int
        absolute query positions [q_start, q_end)
    context : :obj:`list` of :obj:`numpy.ndarray`
        per KV head, ascending positions visible to every query of the chunk
        (sink, retained tokens of chunks <= q-2 and all of chunk q-1)
    """
    def __init__(self, chunk_index, q_start, q_end, context):
        self.chunk_index = chunk_index
        self.q_start = q_start
        self.q_end = q_end
        self.context = context

    def attendable(self, head, query_position):
        """ Ascending key positions visible to one query """
        return np.concatenate([self.context[head], np.arange(self.q_start, query_position + 1)])

    def mask(self, head, query_positions, key_positions):
        """ Additive mask of the given queries against the given key positions.

        Parameters
        ----------
        head : int
            KV head
        query_positions : :obj:`numpy.ndarray`
            positions inside [q_start, q_end)
        key_positions : :obj:`numpy.ndarray`
            ascending positions of the keys attended

        Returns
        -------
        :obj:`numpy.ndarray`
            [n_q x T] mask of 0 / -inf
        """
        query_positions = np.asarray(query_positions).reshape(-1)
        key_positions = np.asarray(key_positions).reshape(-1)
        in_context = np.isin(key_positions, self.context[head])
        own = (key_positions[None, :] >= self.q_start) & (key_positions[None, :] <= query_positions[:, None])
        visible = in_context[None, :] | own
        return np.where(visible, 0.0, -np.inf)

def build_visibility(chunk_index, retention, params, num_kv_heads, q_end=None):
    """ Builds the visibility of query chunk q from the retention sets of earlier chunks.

    Parameters
    ----------
    chunk_index : int
        q, 0 for the sink
    retention : :obj:`dict`
        chunk index -> :obj:`RetentionSet`, must hold every chunk in [1, q-2]
    params : :obj:`LagkvParams`
    num_kv_heads : int
    q_end : int
        end of the query chunk for a partial tail chunk

    Returns
    -------
    :obj:`VisibilitySpec`

    Raises
    ------
    :obj:`SequencingError`
        when a needed retention set has not been computed yet
    """
    S, L = params.sink_size, params.lag_size
    if chunk_index == 0:
        empty = [np.zeros(0, dtype=np.int64) for _ in range(num_kv_heads)]
        return VisibilitySpec(0, 0, S if q_end is None else q_end, empty)

    q_start = params.chunk_start(chunk_index)
    if q_end is None:
        q_end = q_start + L
    parts = [[np.arange(S)] for _ in range(num_kv_heads)]
    for p in range(1, chunk_index - 1):
        if p not in retention:
            raise SequencingError('Chunk %d queries need the retention set of chunk %d, which has not been scored'
                                  %(chunk_index, p))
        positions = retention[p].positions(params)
        for h in range(num_kv_heads):
            parts[h].append(positions[h])
    if chunk_index >= 2:
        window = np.arange(params.chunk_start(chunk_index - 1), q_start)
        for h in range(num_kv_heads):
            parts[h].append(window)
    context = [np.concatenate(p).astype(np.int64) for p in parts]
    return VisibilitySpec(chunk_index, q_start, q_end, context)

def _chunk_groups(positions, params):
    """ Splits ascending query positions into (chunk index, positions) runs """
    chunks = np.array([params.chunk_index(int(p)) for p in positions])
    groups = []
    for q in np.unique(chunks):
        groups.append((int(q), positions[chunks == q]))
    return groups

def chunk_mask(query_positions, key_positions, retention, params, num_kv_heads):
    """ Per-KV-head additive LRSA mask [h_kv x n_q x T] for ascending query and key positions.

    key_positions may be shared ([T]) or per head ([h_kv x T]).
    """
    query_positions = np.asarray(query_positions).reshape(-1)
    key_positions = np.asarray(key_positions)
    if key_positions.ndim == 1:
        key_positions = np.broadcast_to(key_positions, (num_kv_heads, key_positions.shape[0]))
    mask = np.empty((num_kv_heads, query_positions.shape[0], key_positions.shape[1]))
    row = 0
    for q, qpos in _chunk_groups(query_positions, params):
        q_end = int(qpos[-1]) + 1
        spec = build_visibility(q, retention, params, num_kv_heads, q_end=q_end)
        for h in range(num_kv_heads):
            mask[h, row:row + qpos.shape[0]] = spec.mask(h, qpos, key_positions[h])
        row += qpos.shape[0]
    return mask

def lrsa_mask(n, retention, params, num_kv_heads):
    """ Full-sequence LRSA mask [h_kv x n x n] """
    positions = np.arange(n)
    return chunk_mask(positions, positions, retention, params, num_kv_heads)

def causal_mask(n):
    """ Vanilla causal mask [n x n] """
    return np.where(np.tri(n, dtype=bool), 0.0, -np.inf)

def lrsa_entry_bound(n, params):
    """ Closed-form count of visible score entries per KV head for an LRSA prefill of n tokens """
    S, L, k = params.sink_size, params.lag_size, params.retain_count
    s = min(n, S)
    total = s * (s + 1) // 2
    remaining = n - s
    q = 1
    while remaining > 0:
        m = min(L, remaining)
        context = S + max(q - 2, 0) * k + (L if q >= 2 else 0)
        total += m * context + m * (m + 1) // 2
        remaining -= m
        q += 1
    return total

def full_causal_entries(n):
    return n * (n + 1) // 2

class PrefillState(object):
    """ Cache and bookkeeping of an Attn-Fill run.

    Attributes
    ----------
    cache : :obj:`SegmentedKvCache`
    chunks_per_step : int
        chunks attended per fill step
    op_counter : :obj:`OpCounter`
        visible score entries
    compression_events : int
        chunks compressed in the first layer so far
    """
    def __init__(self, cache, chunks_per_step=2):
        if chunks_per_step < 1:
            raise ConfigError(['chunks_per_step (%d) must be >= 1' %(chunks_per_step)])
        self.cache = cache
        self.chunks_per_step = int(chunks_per_step)
        self.scorer = LagkvScorer(cache.params)
        self.op_counter = OpCounter(len(cache) * cache.layers[0].num_kv_heads)
        self.compression_events = 0
        self.prefilled = False
        self.fill_steps = 0
        self.elapsed = 0.0

    @staticmethod
    def for_model(model, params=None, chunks_per_step=2):
        """ Creates an empty state sized for a model """
        if params is None:
            params = model.lagkv_params
        cfg = model.attn_config
        cache = SegmentedKvCache(params, model.num_layers, cfg.num_kv_heads, cfg.head_dim, model.dtype)
        return PrefillState(cache, chunks_per_step)

    @property
    def next_position(self):
        return self.cache.tokens_seen

    @property
    def params(self):
        return self.cache.params

def _cached_attend_fn(state, positions, use_mask):
    """ Attention callback for a model block that writes to and reads from the cache """
    def attend_fn(layer, q_heads, k_heads, v_heads):
        layer_cache = state.cache[layer]
        cfg_heads = layer_cache.num_kv_heads
        K_new = np.stack([k.data for k in k_heads])
        V_new = np.stack([v.data for v in v_heads])
        layer_cache.append_tokens(K_new, V_new, positions)
        mask = None
        if use_mask:
            layer_cache.score_ready(state.scorer)
        K_all, V_all, key_positions = layer_cache.views()
        if use_mask:
            mask = chunk_mask(positions, key_positions, layer_cache.retention, state.params, cfg_heads)
        group = len(q_heads) // cfg_heads
        outputs = []
        for i, q in enumerate(q_heads):
            h = i // group
            K = Tensor(K_all[h], dtype=K_all.dtype)
            V = Tensor(V_all[h], dtype=V_all.dtype)
            counter = state.op_counter if i % group == 0 else None
            outputs.append(attend(q, K, V, None if mask is None else mask[h], counter))
        compressed = layer_cache.compress_ready(state.scorer)
        if layer == 0:
            state.compression_events += compressed
        return outputs
    return attend_fn

def prefill(state, tokens, model):
    """ Attn-Fill prefill: the sink, then chunks_per_step chunks at a time.

    Each step appends the new keys and values, scores every chunk that now has a
    complete successor, attends the new queries against the cache under the chunk
    masks and compresses the cache to fixpoint.

    Parameters
    ----------
    state : :obj:`PrefillState`
        empty state
    tokens : :obj:`numpy.ndarray`
        token ids, at least S of them
    model : :obj:`ToyTransformer`

    Returns
    -------
    :obj:`Tensor`
        [n x d] hidden states after the last block
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    params = state.params
    S, L = params.sink_size, params.lag_size
    n = tokens.shape[0]
    if n < S:
        raise SequencingError('Prefill needs at least S=%d tokens, got %d' %(S, n))
    start_time = time.time()

    bounds = []
    if S > 0:
        bounds.append((0, S))
    step = state.chunks_per_step * L
    for start in range(S, n, step):
        bounds.append((start, min(start + step, n)))

    outputs = []
    for start, stop in bounds:
        positions = np.arange(start, stop)
        x = model.embed(tokens[start:stop])
        attend_fn = _cached_attend_fn(state, positions, use_mask=True)
        for layer in range(model.num_layers):
            x = model.block(layer, x, positions, attend_fn)
        outputs.append(x.data)
        state.fill_steps += 1
    state.prefilled = True
    state.elapsed += time.time() - start_time
    logging.debug('Prefilled %d tokens in %d steps, %d cached per head' %(n, state.fill_steps, state.cache.token_count))
    return Tensor(np.concatenate(outputs, axis=0), dtype=model.dtype)

def decode_step(state, token, model):
    """ Appends one token and attends the condensed cache without a mask.

    Parameters
    ----------
    state : :obj:`PrefillState`
        state after prefill
    token : int
    model : :obj:`ToyTransformer`

    Returns
    -------
    :obj:`numpy.ndarray`
        logits over the vocabulary for the new position
    """
    if not state.prefilled:
        raise SequencingError('decode_step called before prefill')
    positions = np.array([state.next_position])
    x = model.embed(np.array([token]))
    attend_fn = _cached_attend_fn(state, positions, use_mask=False)
    for layer in range(model.num_layers):
        x = model.block(layer, x, positions, attend_fn)
    return model.project(x).data[0]
