from collections import OrderedDict

import numpy as np
import pytest

from lrsa.lagkv import LagkvParams
from lrsa.model import ToyTransformer

TINY_MODEL = OrderedDict([('vocab_size', 16), ('d_model', 8), ('num_heads', 2), ('num_kv_heads', 1),
                          ('head_dim', 4), ('num_layers', 2), ('mlp_ratio', 2), ('rope_base', 10000.0),
                          ('norm_eps', 1e-6), ('init_std', 0.5)])

TINY_RUN = [('model.vocab_size', 16), ('model.d_model', 8), ('model.num_heads', 2), ('model.num_kv_heads', 1),
            ('model.head_dim', 4), ('model.num_layers', 1), ('model.mlp_ratio', 2), ('model.init_std', 0.5),
            ('lagkv.sink_size', 2), ('lagkv.lag_size', 4), ('task.seq_len', 22),
            ('equivalence.num_seeds', 3), ('equivalence.decode_steps', 5), ('equivalence.batching_seeds', 2),
            ('equivalence.reduction_seeds', 2), ('bench.lengths', [6, 12, 24]),
            ('train.steps', 3), ('train.log_frequency', 1),
            ('grad_check.seq_len', 14), ('grad_check.num_coords', 30),
            ('eval.num_instances', 1)]

@pytest.fixture
def params():
    return LagkvParams(sink_size=2, lag_size=4, retention_ratio=0.5, epsilon=1e-6)

@pytest.fixture
def tiny_model(params):
    return ToyTransformer(TINY_MODEL, params, 'f64', seed=7)

def make_model(params, seed=7, **overrides):
    config = OrderedDict(TINY_MODEL)
    config.update(overrides)
    return ToyTransformer(config, params, 'f64', seed=seed)

def random_tokens(n, vocab=16, seed=0):
    return np.random.RandomState(seed).randint(0, vocab, size=n)

def central_difference(f, x, h=1e-6):
    """ Gradient of a scalar function of an array by central differences """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(x)
        flat[i] = orig - h
        minus = f(x)
        flat[i] = orig
        g[i] = (plus - minus) / (2 * h)
    return grad
