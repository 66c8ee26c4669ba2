from .version import __version__
from .tensor import Tensor, Rng, ordered_matmul, ordered_sum
from .lagkv import LagkvParams, LagkvScorer, ChunkScores, RetentionSet, score_chunk, score_heads, select_topk, score_sequence
from .kv_cache import SegmentedKvCache, LayerKvCache, CacheReport, expected_token_count
from .attention import (AttnConfig, OpCounter, PrefillState, VisibilitySpec, attend, build_visibility, decode_step,
                        lrsa_entry_bound, lrsa_mask, prefill, rope_apply)
from .model import ToyTransformer, get_lrsa_model, save_checkpoint, load_checkpoint
from .training import TrainConfig, get_lrsa_trainer, adamw_step, grad_check, train
from .tasks import TaskInstance, gen_copy_task, gen_needle_task

__all__ = ['Tensor', 'Rng', 'ordered_matmul', 'ordered_sum',
           'LagkvParams', 'LagkvScorer', 'ChunkScores', 'RetentionSet', 'score_chunk', 'score_heads', 'select_topk',
           'score_sequence',
           'SegmentedKvCache', 'LayerKvCache', 'CacheReport', 'expected_token_count',
           'AttnConfig', 'OpCounter', 'PrefillState', 'VisibilitySpec', 'attend', 'build_visibility', 'decode_step',
           'lrsa_entry_bound', 'lrsa_mask', 'prefill', 'rope_apply',
           'ToyTransformer', 'get_lrsa_model', 'save_checkpoint', 'load_checkpoint',
           'TrainConfig', 'get_lrsa_trainer', 'adamw_step', 'grad_check', 'train',
           'TaskInstance', 'gen_copy_task', 'gen_needle_task']
