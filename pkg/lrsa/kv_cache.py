"""
Segmented KV cache: sink / compressed prefix / window chunk / partial tail.

Keys are cached after rotary embedding at their original absolute positions
and are never re-rotated when neighbours are evicted.
"""
import logging
import struct
from collections import OrderedDict

import numpy as np

from .lagkv import LagkvParams, LagkvScorer
from .tensor import Tensor, gather_rows
from .utils import GeneralConstants, CheckpointError, DimensionError, PositionError

def expected_token_count(n, params):
    """ Per-head cache size after ingesting n tokens and compressing to fixpoint """
    S, L, k = params.sink_size, params.lag_size, params.retain_count
    if n <= S:
        return n
    c, t = divmod(n - S, L)
    return S + max(c - 1, 0) * k + min(c, 1) * L + t

class CacheReport(object):
    """ Size accounting of a cache.

    Attributes
    ----------
    tokens_cached : int
        tokens held per KV head
    tokens_seen : int
        tokens ever appended
    compression_ratio : float
        tokens_seen / tokens_cached, 1.0 for an empty cache
    """
    def __init__(self, tokens_cached, tokens_seen):
        self.tokens_cached = tokens_cached
        self.tokens_seen = tokens_seen
        self.compression_ratio = 1.0 if tokens_cached == 0 else float(tokens_seen) / tokens_cached

    def to_dict(self):
        return {'tokens_cached': self.tokens_cached,
                'tokens_seen': self.tokens_seen,
                'compression_ratio': self.compression_ratio}

class LayerKvCache(object):
    """ Cache of one layer, rectangular across KV heads.

    Sink, window and tail positions are shared by all heads; compressed
    prefix positions are per head since each head keeps its own tokens.
    """
    def __init__(self, params, num_kv_heads, head_dim, dtype=np.float64):
        self.params = params
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.dtype = dtype
        empty = lambda: np.zeros((num_kv_heads, 0, head_dim), dtype=dtype)
        self.sink_k, self.sink_v = empty(), empty()
        self.prefix_k, self.prefix_v = empty(), empty()
        self.window_k, self.window_v = empty(), empty()
        self.tail_k, self.tail_v = empty(), empty()
        self.sink_pos = np.zeros(0, dtype=np.int64)
        self.prefix_pos = np.zeros((num_kv_heads, 0), dtype=np.int64)
        self.window_pos = np.zeros(0, dtype=np.int64)
        self.tail_pos = np.zeros(0, dtype=np.int64)
        self.tokens_seen = 0
        self.chunks_compressed = 0
        self.retention = OrderedDict()
        self.scores = OrderedDict()

    @property
    def window_len(self):
        return self.window_k.shape[1]

    @property
    def tail_len(self):
        return self.tail_k.shape[1]

    @property
    def token_count(self):
        return self.sink_k.shape[1] + self.prefix_k.shape[1] + self.window_len + self.tail_len

    @property
    def window_chunk(self):
        """ Chunk index held by the window, or None when it is empty """
        if self.window_len == 0:
            return None
        return self.chunks_compressed + 1

    def append_tokens(self, K_new, V_new, positions):
        """ Appends tokens to the sink and then the tail.

        Parameters
        ----------
        K_new, V_new : :obj:`numpy.ndarray`
            [h_kv x m x d_h] post-rotary keys and values
        positions : :obj:`numpy.ndarray`
            m absolute positions continuing from tokens_seen

        Raises
        ------
        :obj:`PositionError`
            when the positions are not contiguous with the cached ones
        :obj:`DimensionError`
            when K_new or V_new is not [h_kv x m x d_h]
        """
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        m = positions.shape[0]
        expected = np.arange(self.tokens_seen, self.tokens_seen + m)
        if not np.array_equal(positions, expected):
            raise PositionError('Expected positions starting at %d, got %s' %(self.tokens_seen, positions[:8].tolist()))
        if K_new.shape != (self.num_kv_heads, m, self.head_dim) or V_new.shape != K_new.shape:
            raise DimensionError('append_tokens', K_new.shape, V_new.shape, (self.num_kv_heads, m, self.head_dim))
        K_new = K_new.astype(self.dtype, copy=False)
        V_new = V_new.astype(self.dtype, copy=False)

        num_sink = int(np.sum(positions < self.params.sink_size))
        if num_sink > 0:
            self.sink_k = np.concatenate([self.sink_k, K_new[:, :num_sink]], axis=1)
            self.sink_v = np.concatenate([self.sink_v, V_new[:, :num_sink]], axis=1)
            self.sink_pos = np.concatenate([self.sink_pos, positions[:num_sink]])
        if num_sink < m:
            self.tail_k = np.concatenate([self.tail_k, K_new[:, num_sink:]], axis=1)
            self.tail_v = np.concatenate([self.tail_v, V_new[:, num_sink:]], axis=1)
            self.tail_pos = np.concatenate([self.tail_pos, positions[num_sink:]])
        self.tokens_seen += m
        self._promote()

    def _promote(self):
        L = self.params.lag_size
        if self.window_len == 0 and self.tail_len >= L:
            self.window_k, self.tail_k = self.tail_k[:, :L], self.tail_k[:, L:]
            self.window_v, self.tail_v = self.tail_v[:, :L], self.tail_v[:, L:]
            self.window_pos, self.tail_pos = self.tail_pos[:L], self.tail_pos[L:]

    def _complete_chunks(self):
        """ (chunk index, K, V) for the window and every complete chunk in the tail """
        L = self.params.lag_size
        chunks = []
        if self.window_len == L:
            chunks.append((self.window_chunk, self.window_k, self.window_v))
            for i in range(self.tail_len // L):
                sl = slice(i * L, (i + 1) * L)
                chunks.append((self.window_chunk + i + 1, self.tail_k[:, sl], self.tail_v[:, sl]))
        return chunks

    def score_ready(self, scorer):
        """ Computes retention sets for every uncompressed chunk that has a complete successor,
        without compacting anything.

        Returns
        -------
        int
            number of chunks newly scored
        """
        chunks = self._complete_chunks()
        scored = 0
        for (p, K_p, V_p), (_, K_next, V_next) in zip(chunks[:-1], chunks[1:]):
            if p in self.retention:
                continue
            scores = scorer.score(K_p, V_p, K_next, V_next, p)
            self.scores[p] = scores
            self.retention[p] = scorer.select(scores)
            scored += 1
        return scored

    def compress_ready(self, scorer):
        """ Compresses the window chunk while a complete successor chunk sits in the tail.

        The window is scored against the next chunk (unless a retention set was
        already computed), its top-k rows per head move to the compressed prefix
        and the next chunk becomes the window.

        Returns
        -------
        int
            number of chunks compressed
        """
        L = self.params.lag_size
        compressed = 0
        while self.window_len == L and self.tail_len >= L:
            p = self.window_chunk
            if p not in self.retention:
                scores = scorer.score(self.window_k, self.window_v, self.tail_k[:, :L], self.tail_v[:, :L], p)
                self.scores[p] = scores
                self.retention[p] = scorer.select(scores)
            keep = self.retention[p].indices
            kept_k = np.stack([gather_rows(Tensor(self.window_k[h], dtype=self.dtype), keep[h]).data
                               for h in range(self.num_kv_heads)])
            kept_v = np.stack([gather_rows(Tensor(self.window_v[h], dtype=self.dtype), keep[h]).data
                               for h in range(self.num_kv_heads)])
            self.prefix_k = np.concatenate([self.prefix_k, kept_k], axis=1)
            self.prefix_v = np.concatenate([self.prefix_v, kept_v], axis=1)
            self.prefix_pos = np.concatenate([self.prefix_pos, self.window_pos[keep]], axis=1)

            self.window_k, self.tail_k = self.tail_k[:, :L], self.tail_k[:, L:]
            self.window_v, self.tail_v = self.tail_v[:, :L], self.tail_v[:, L:]
            self.window_pos, self.tail_pos = self.tail_pos[:L], self.tail_pos[L:]
            self.chunks_compressed += 1
            compressed += 1
        if compressed > 0:
            logging.debug('Compressed %d chunks, %d tokens cached per head' %(compressed, self.token_count))
        return compressed

    def positions(self):
        """ [h_kv x T] original positions of the cached tokens, ascending per head """
        h = self.num_kv_heads
        return np.concatenate([np.broadcast_to(self.sink_pos, (h, self.sink_pos.shape[0])),
                               self.prefix_pos,
                               np.broadcast_to(self.window_pos, (h, self.window_pos.shape[0])),
                               np.broadcast_to(self.tail_pos, (h, self.tail_pos.shape[0]))], axis=1)

    def views(self):
        """ Keys, values and positions of every head: [h_kv x T x d_h] twice and [h_kv x T] """
        K = np.concatenate([self.sink_k, self.prefix_k, self.window_k, self.tail_k], axis=1)
        V = np.concatenate([self.sink_v, self.prefix_v, self.window_v, self.tail_v], axis=1)
        return K, V, self.positions()

    def head_view(self, head):
        """ Contiguous sink | prefix | window | tail keys, values and positions of one head """
        if head < 0 or head >= self.num_kv_heads:
            raise ValueError('Head %d not in [0, %d)' %(head, self.num_kv_heads))
        K, V, pos = self.views()
        return K[head], V[head], pos[head]

    def segment_counts(self):
        return (self.sink_k.shape[1], self.prefix_k.shape[1], self.window_len, self.tail_len)

class SegmentedKvCache(object):
    """ Per-layer segmented caches of a model instance.

    Mutation is single-writer; views may be read between mutations.
    """
    def __init__(self, params, num_layers, num_kv_heads, head_dim, dtype=np.float64):
        self.params = params
        self.layers = [LayerKvCache(params, num_kv_heads, head_dim, dtype) for _ in range(num_layers)]

    @property
    def tokens_seen(self):
        return self.layers[0].tokens_seen

    @property
    def token_count(self):
        return self.layers[0].token_count

    def __getitem__(self, layer):
        return self.layers[layer]

    def __len__(self):
        return len(self.layers)

    def compress_ready(self, scorer=None):
        """ Compresses every layer to fixpoint; returns the chunk count of the first layer """
        if scorer is None:
            scorer = LagkvScorer(self.params)
        counts = [layer.compress_ready(scorer) for layer in self.layers]
        return counts[0]

    def report(self):
        """ Size accounting of the cache """
        return CacheReport(self.token_count, self.tokens_seen)

    def save_snapshot(self, filename):
        """ Writes a binary debug snapshot.

        Layout: magic, u32 version, u32 layers, u32 heads, u32 head dim, u32 bytes per value,
        u32 S, u32 L, f64 r, f64 epsilon, u64 tokens seen, then per layer a u32 count of
        compressed chunks and per head u32 segment counts, little-endian K rows, V rows and
        u32 positions.
        """
        first = self.layers[0]
        itemsize = np.dtype(first.dtype).itemsize
        value_dtype = np.dtype(first.dtype).newbyteorder('<')
        with open(filename, 'wb') as f:
            f.write(GeneralConstants.SNAPSHOT_MAGIC)
            f.write(struct.pack('<IIIIIIIddQ', GeneralConstants.SNAPSHOT_VERSION, len(self.layers),
                                first.num_kv_heads, first.head_dim, itemsize,
                                self.params.sink_size, self.params.lag_size,
                                self.params.retention_ratio, self.params.epsilon, self.tokens_seen))
            for layer in self.layers:
                f.write(struct.pack('<I', layer.chunks_compressed))
                K, V, pos = layer.views()
                for h in range(layer.num_kv_heads):
                    f.write(struct.pack('<IIII', *layer.segment_counts()))
                    f.write(K[h].astype(value_dtype).tobytes())
                    f.write(V[h].astype(value_dtype).tobytes())
                    f.write(pos[h].astype('<u4').tobytes())
        logging.info('Saved cache snapshot to %s' %(filename))

    @staticmethod
    def load_snapshot(filename):
        """ Reads a snapshot written by save_snapshot.

        Raises
        ------
        :obj:`CheckpointError`
            on a bad magic or unsupported version
        """
        with open(filename, 'rb') as f:
            buf = f.read()
        if buf[:4] != GeneralConstants.SNAPSHOT_MAGIC:
            raise CheckpointError('%s is not a cache snapshot' %(filename))
        head_fmt = '<IIIIIIIddQ'
        (version, num_layers, num_heads, head_dim, itemsize, S, L, r, eps,
         tokens_seen) = struct.unpack_from(head_fmt, buf, 4)
        if version != GeneralConstants.SNAPSHOT_VERSION:
            raise CheckpointError('Snapshot version %d not supported' %(version))
        dtype = {4: np.float32, 8: np.float64}[itemsize]
        params = LagkvParams(S, L, r, eps)
        cache = SegmentedKvCache(params, num_layers, num_heads, head_dim, dtype)
        offset = 4 + struct.calcsize(head_fmt)
        value_dtype = np.dtype(dtype).newbyteorder('<')
        for layer in cache.layers:
            layer.chunks_compressed, = struct.unpack_from('<I', buf, offset)
            offset += 4
            heads = []
            for h in range(num_heads):
                counts = struct.unpack_from('<IIII', buf, offset)
                offset += 16
                T = sum(counts)
                K = np.frombuffer(buf, dtype=value_dtype, count=T * head_dim, offset=offset).reshape(T, head_dim)
                offset += T * head_dim * itemsize
                V = np.frombuffer(buf, dtype=value_dtype, count=T * head_dim, offset=offset).reshape(T, head_dim)
                offset += T * head_dim * itemsize
                pos = np.frombuffer(buf, dtype='<u4', count=T, offset=offset).astype(np.int64)
                offset += T * 4
                heads.append((counts, K.astype(dtype), V.astype(dtype), pos))
            counts = heads[0][0]
            bounds = np.cumsum((0,) + tuple(counts))
            seg = lambda arrs, i: np.stack([a[bounds[i]:bounds[i+1]] for a in arrs])
            Ks = [hd[1] for hd in heads]
            Vs = [hd[2] for hd in heads]
            Ps = [hd[3] for hd in heads]
            layer.sink_k, layer.sink_v = seg(Ks, 0), seg(Vs, 0)
            layer.prefix_k, layer.prefix_v = seg(Ks, 1), seg(Vs, 1)
            layer.window_k, layer.window_v = seg(Ks, 2), seg(Vs, 2)
            layer.tail_k, layer.tail_v = seg(Ks, 3), seg(Vs, 3)
            layer.sink_pos = Ps[0][bounds[0]:bounds[1]]
            layer.prefix_pos = seg(Ps, 1)
            layer.window_pos = Ps[0][bounds[2]:bounds[3]]
            layer.tail_pos = Ps[0][bounds[3]:bounds[4]]
            layer.tokens_seen = tokens_seen
        return cache
