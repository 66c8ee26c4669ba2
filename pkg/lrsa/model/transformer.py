"""
Decoder-only toy transformer: pre-norm RMSNorm blocks with grouped-query
rotary attention and a SwiGLU MLP, a final norm and an output head tied to
the token embedding.

A block takes an attention callback so that the full-sequence forward pass and
the cached prefill / decode paths share every projection, norm and MLP.
"""
import json
import logging
import struct
from collections import OrderedDict

import numpy as np

from ..attention import AttnConfig, attend, causal_mask, lrsa_mask, rope_apply
from ..lagkv import LagkvParams, score_sequence
from ..tensor import (Rng, Tensor, concat_cols, cross_entropy, embedding, matmul, mul, rms_norm,
                      silu, slice_cols, transpose)
from ..utils import (AttentionMode, CheckpointError, ConfigError, GeneralConstants, Precision,
                     TokenRangeError)

DEFAULT_MODEL_CONFIG = OrderedDict([
    ('vocab_size', 64),
    ('d_model', 64),
    ('num_heads', 4),
    ('num_kv_heads', 4),
    ('head_dim', 16),
    ('num_layers', 2),
    ('mlp_ratio', 4),
    ('rope_base', 10000.0),
    ('norm_eps', 1e-6),
    ('init_std', 0.02),
])

class ToyTransformer(object):
    """ Toy decoder-only transformer over the autodiff engine.

    Attributes
    ----------
    attn_config : :obj:`AttnConfig`
        attention dimensions
    lagkv_params : :obj:`LagkvParams`
        sink / lag / retention parameters used by the LRSA mode
    weights : :obj:`collections.OrderedDict`
        parameter name -> :obj:`Tensor`, in a fixed order
    """
    def __init__(self, model_config=None, lagkv_params=None, precision=Precision.F64, seed=GeneralConstants.SEED):
        config = OrderedDict(DEFAULT_MODEL_CONFIG)
        if model_config is not None:
            config.update(model_config)
        self._parse_config(config)
        self.lagkv_params = lagkv_params if lagkv_params is not None else LagkvParams()
        self.precision = precision
        self.dtype = Precision.dtype(precision)
        self._weights = OrderedDict()
        self.init_weights(seed)

    def _parse_config(self, config):
        """ Reads the architecture parameters """
        self._config = config
        self.vocab_size = int(config['vocab_size'])
        self.num_layers = int(config['num_layers'])
        self.mlp_ratio = int(config['mlp_ratio'])
        self.norm_eps = float(config['norm_eps'])
        self.init_std = float(config['init_std'])
        violations = []
        if self.vocab_size < 2:
            violations.append('model.vocab_size (%d) must be >= 2' %(self.vocab_size))
        if self.num_layers < 1:
            violations.append('model.num_layers (%d) must be >= 1' %(self.num_layers))
        if self.mlp_ratio < 1:
            violations.append('model.mlp_ratio (%d) must be >= 1' %(self.mlp_ratio))
        try:
            self.attn_config = AttnConfig(config['d_model'], config['num_heads'], config['num_kv_heads'],
                                          config['head_dim'], config['rope_base'])
        except ConfigError as e:
            violations.extend(e.violations)
        if len(violations) > 0:
            raise ConfigError(violations)
        self.d_model = self.attn_config.d_model
        self.hidden_dim = self.mlp_ratio * self.d_model

    @property
    def config(self):
        return OrderedDict(self._config)

    @property
    def weights(self):
        return self._weights

    @property
    def num_parameters(self):
        return int(sum(w.size for w in self._weights.values()))

    def init_weights(self, seed):
        """ Draws every weight from a seeded generator, in a fixed order """
        cfg = self.attn_config
        d, hd = self.d_model, cfg.head_dim
        rng = Rng(seed)
        resid_scale = 1.0 / np.sqrt(2.0 * self.num_layers)

        def normal(name, shape, std):
            self._weights[name] = Tensor(rng.normal(shape, std, self.dtype), requires_grad=True,
                                         dtype=self.dtype, name=name)

        def ones(name, size):
            self._weights[name] = Tensor(np.ones(size, dtype=self.dtype), requires_grad=True,
                                         dtype=self.dtype, name=name)

        self._weights = OrderedDict()
        normal('embedding', (self.vocab_size, d), self.init_std)
        for i in range(self.num_layers):
            ones('layer%d_attn_norm' %(i), d)
            normal('layer%d_wq' %(i), (d, cfg.num_heads * hd), 1.0 / np.sqrt(d))
            normal('layer%d_wk' %(i), (d, cfg.num_kv_heads * hd), 1.0 / np.sqrt(d))
            normal('layer%d_wv' %(i), (d, cfg.num_kv_heads * hd), 1.0 / np.sqrt(d))
            normal('layer%d_wo' %(i), (cfg.num_heads * hd, d), resid_scale / np.sqrt(cfg.num_heads * hd))
            ones('layer%d_mlp_norm' %(i), d)
            normal('layer%d_w1' %(i), (d, self.hidden_dim), 1.0 / np.sqrt(d))
            normal('layer%d_w3' %(i), (d, self.hidden_dim), 1.0 / np.sqrt(d))
            normal('layer%d_w2' %(i), (self.hidden_dim, d), resid_scale / np.sqrt(self.hidden_dim))
        ones('final_norm', d)
        logging.debug('Initialized %d parameters with seed %d' %(self.num_parameters, seed))

    def zero_grad(self):
        for w in self._weights.values():
            w.zero_grad()

    def _w(self, layer, name):
        return self._weights['layer%d_%s' %(layer, name)]

    def embed(self, tokens):
        """ Looks up token embeddings.

        Raises
        ------
        :obj:`TokenRangeError`
            for ids outside [0, vocab_size)
        """
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size > 0 and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise TokenRangeError('Token ids must lie in [0, %d), got range [%d, %d]'
                                  %(self.vocab_size, tokens.min(), tokens.max()))
        return embedding(self._weights['embedding'], tokens)

    def qkv(self, layer, x, positions):
        """ Per-head rotated queries and keys and per-head values of normalised inputs.

        Returns
        -------
        tuple of three :obj:`list` of :obj:`Tensor`
            h query heads, h_kv key heads and h_kv value heads, each [n x d_h]
        """
        cfg = self.attn_config
        hd = cfg.head_dim
        q = matmul(x, self._w(layer, 'wq'))
        k = matmul(x, self._w(layer, 'wk'))
        v = matmul(x, self._w(layer, 'wv'))
        q_heads = [rope_apply(slice_cols(q, i * hd, (i + 1) * hd), positions, cfg.rope_base)
                   for i in range(cfg.num_heads)]
        k_heads = [rope_apply(slice_cols(k, i * hd, (i + 1) * hd), positions, cfg.rope_base)
                   for i in range(cfg.num_kv_heads)]
        v_heads = [slice_cols(v, i * hd, (i + 1) * hd) for i in range(cfg.num_kv_heads)]
        return q_heads, k_heads, v_heads

    def block(self, layer, x, positions, attend_fn):
        """ One pre-norm block; attend_fn(layer, q_heads, k_heads, v_heads) returns h head outputs """
        h = rms_norm(x, self._w(layer, 'attn_norm'), self.norm_eps)
        q_heads, k_heads, v_heads = self.qkv(layer, h, positions)
        heads = attend_fn(layer, q_heads, k_heads, v_heads)
        x = x + matmul(concat_cols(heads), self._w(layer, 'wo'))

        h = rms_norm(x, self._w(layer, 'mlp_norm'), self.norm_eps)
        gate = silu(matmul(h, self._w(layer, 'w1')))
        up = matmul(h, self._w(layer, 'w3'))
        return x + matmul(mul(gate, up), self._w(layer, 'w2'))

    def project(self, hidden):
        """ Final norm and tied output head: logits [n x V] """
        h = rms_norm(hidden, self._weights['final_norm'], self.norm_eps)
        return matmul(h, transpose(self._weights['embedding']))

    def forward(self, tokens, mode=AttentionMode.VANILLA, plan=None, counter=None, return_plan=False):
        """ Full-sequence forward pass.

        In LRSA mode each layer's mask is built from retention sets scored on
        detached post-rotary keys and values of that layer, unless a frozen plan
        is given.

        Parameters
        ----------
        tokens : :obj:`numpy.ndarray`
            n token ids
        mode : str
            'vanilla' for causal attention or 'lrsa'
        plan : :obj:`list` of :obj:`dict`
            per layer chunk index -> :obj:`RetentionSet` to reuse
        counter : :obj:`OpCounter`
            optional counter of visible score entries
        return_plan : bool
            also return the retention plan used

        Returns
        -------
        :obj:`Tensor`
            [n x V] logits, and the plan when return_plan is set
        """
        if mode not in (AttentionMode.VANILLA, AttentionMode.LRSA):
            raise ValueError('Attention mode %s not supported' %(mode))
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        n = tokens.shape[0]
        positions = np.arange(n)
        cfg = self.attn_config
        used_plan = []

        def attend_fn(layer, q_heads, k_heads, v_heads):
            if mode == AttentionMode.VANILLA:
                masks = [causal_mask(n)] * cfg.num_kv_heads
            else:
                if plan is not None:
                    retention = plan[layer]
                else:
                    K = np.stack([k.data for k in k_heads])
                    V = np.stack([v.data for v in v_heads])
                    retention = OrderedDict((p, sel) for p, (_, sel) in score_sequence(K, V, self.lagkv_params).items())
                used_plan.append(retention)
                masks = lrsa_mask(n, retention, self.lagkv_params, cfg.num_kv_heads)
            outputs = []
            for i, q in enumerate(q_heads):
                h = cfg.kv_head(i)
                c = counter if i % cfg.group_size == 0 else None
                outputs.append(attend(q, k_heads[h], v_heads[h], masks[h], c))
            return outputs

        x = self.embed(tokens)
        for layer in range(self.num_layers):
            x = self.block(layer, x, positions, attend_fn)
        logits = self.project(x)
        if return_plan:
            return logits, used_plan
        return logits

    def plan_retention(self, tokens):
        """ Retention plan of an LRSA forward pass, one dict per layer """
        _, plan = self.forward(tokens, AttentionMode.LRSA, return_plan=True)
        return plan

    def loss(self, tokens, targets, mode=AttentionMode.VANILLA, weights=None, plan=None):
        """ Weighted mean cross-entropy of a forward pass """
        logits = self.forward(tokens, mode, plan=plan)
        return cross_entropy(logits, targets, weights)

    def save(self, filename):
        """ Writes a binary checkpoint: magic, u32 version, u32 header length, JSON header,
        then little-endian payloads of every weight in header order. """
        tensors = []
        offset = 0
        value_dtype = np.dtype(self.dtype).newbyteorder('<')
        for name, w in self._weights.items():
            nbytes = w.size * value_dtype.itemsize
            tensors.append(OrderedDict([('name', name), ('shape', list(w.shape)), ('offset', offset), ('nbytes', nbytes)]))
            offset += nbytes
        header = OrderedDict([('model', self.config),
                              ('lagkv', self.lagkv_params.to_dict()),
                              ('precision', self.precision),
                              ('tensors', tensors)])
        header_bytes = json.dumps(header).encode('utf-8')
        with open(filename, 'wb') as f:
            f.write(GeneralConstants.CHECKPOINT_MAGIC)
            f.write(struct.pack('<II', GeneralConstants.CHECKPOINT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for w in self._weights.values():
                f.write(w.data.astype(value_dtype).tobytes())
        logging.info('Saved checkpoint with %d parameters to %s' %(self.num_parameters, filename))

    @staticmethod
    def load(filename):
        """ Instantiates a model from a checkpoint written by save

        Raises
        ------
        :obj:`CheckpointError`
            on a bad magic, an unsupported version or a truncated payload
        """
        with open(filename, 'rb') as f:
            buf = f.read()
        if buf[:4] != GeneralConstants.CHECKPOINT_MAGIC:
            raise CheckpointError('%s is not a model checkpoint' %(filename))
        version, header_len = struct.unpack_from('<II', buf, 4)
        if version != GeneralConstants.CHECKPOINT_VERSION:
            raise CheckpointError('Checkpoint version %d not supported' %(version))
        start = 12 + header_len
        try:
            header = json.loads(buf[12:start].decode('utf-8'), object_pairs_hook=OrderedDict)
        except ValueError as e:
            raise CheckpointError('Unreadable checkpoint header in %s: %s' %(filename, e))

        model = ToyTransformer(header['model'], LagkvParams(**header['lagkv']), header['precision'])
        value_dtype = np.dtype(model.dtype).newbyteorder('<')
        for entry in header['tensors']:
            name = entry['name']
            if name not in model.weights:
                raise CheckpointError('Unknown tensor %s in %s' %(name, filename))
            begin = start + entry['offset']
            if begin + entry['nbytes'] > len(buf):
                raise CheckpointError('Truncated payload for %s in %s' %(name, filename))
            data = np.frombuffer(buf, dtype=value_dtype, count=entry['nbytes'] // value_dtype.itemsize, offset=begin)
            model.weights[name].data = data.reshape(entry['shape']).astype(model.dtype)
        return model

def save_checkpoint(model, filename):
    model.save(filename)

def load_checkpoint(filename):
    return ToyTransformer.load(filename)
