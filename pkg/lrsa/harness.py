"""
Run configuration and the experiment commands behind the command line:
condensation equivalence, op-count benchmark, training, score dumps, task
generation, gradient checks and compression robustness evaluation.

Every command returns a JSON-serialisable report with a boolean 'pass' field
and writes it to the output directory.
"""
import copy
import logging
import os
import time
from collections import OrderedDict

import numpy as np
import yaml
from autolab_core import YamlConfig

from .attention import PrefillState, decode_step, full_causal_entries, lrsa_entry_bound, prefill
from .kv_cache import SegmentedKvCache, expected_token_count
from .lagkv import LagkvParams
from .model import ToyTransformer, get_lrsa_model
from .tasks import gen_task, task_stream
from .tensor import Rng
from .training import TrainConfig, get_lrsa_trainer, grad_check
from .utils import (AttentionMode, ConfigError, DivergenceError, GeneralConstants, Precision, TaskType,
                    write_json)

DEFAULT_RUN_CONFIG = OrderedDict([
    ('seed', GeneralConstants.SEED),
    ('precision', Precision.F64),
    ('mode', AttentionMode.LRSA),
    ('chunks_per_step', 2),
    ('output_dir', 'output'),
    ('model', OrderedDict([('vocab_size', 64), ('d_model', 64), ('num_heads', 4), ('num_kv_heads', 4),
                           ('head_dim', 16), ('num_layers', 2), ('mlp_ratio', 4), ('rope_base', 10000.0),
                           ('norm_eps', 1e-6), ('init_std', 0.02)])),
    ('lagkv', OrderedDict([('sink_size', 16), ('lag_size', 32), ('retention_ratio', 0.5), ('epsilon', 1e-6)])),
    ('task', OrderedDict([('type', TaskType.COPY), ('seq_len', 272), ('needle_len', 4)])),
    ('train', OrderedDict([('lr', 1e-3), ('beta1', 0.9), ('beta2', 0.95), ('weight_decay', 0.1), ('eps', 1e-8),
                           ('steps', 2000), ('batch_size', 1), ('log_frequency', 50), ('save_frequency', 0)])),
    ('equivalence', OrderedDict([('num_seeds', 100), ('decode_steps', 8), ('batching_seeds', 20),
                                 ('chunk_steps', [1, 2, 4]), ('reduction_seeds', 20)])),
    ('bench', OrderedDict([('lengths', [48, 128, 256, 272, 512])])),
    ('grad_check', OrderedDict([('seq_len', 144), ('num_coords', 200), ('step', 1e-4), ('floor', 1e-3),
                                ('tolerance', 1e-4)])),
    ('eval', OrderedDict([('retention_ratios', [1.0, 0.5, 0.25]), ('num_instances', 8)])),
])

TOLERANCES = {Precision.F64: 1e-12, Precision.F32: 1e-5}

def _merge(base, update):
    """ Recursively overlays a nested mapping """
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out

def set_dotted(config, name, value):
    """ Sets config['a']['b'] for name 'a.b'; every key must already exist """
    keys = name.split('.')
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(['Unknown configuration field %s' %(name)])
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(['Unknown configuration field %s' %(name)])
    node[keys[-1]] = value

def parse_overrides(args):
    """ Parses ['--a.b', 'v', ...] into (name, value) pairs with YAML scalar values """
    overrides = []
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith('--'):
            raise ConfigError(['Unexpected argument %s' %(arg)])
        name = arg[2:]
        if '=' in name:
            name, raw = name.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(['Missing value for --%s' %(name)])
            raw = args[i + 1]
            i += 2
        overrides.append((name.replace('-', '_'), yaml.safe_load(raw)))
    return overrides

def load_config(filename=None, overrides=None):
    """ Defaults, overlaid with a YAML (or JSON) config file, overlaid with dotted overrides.

    Returns
    -------
    :obj:`RunConfig`
        validated configuration

    Raises
    ------
    :obj:`ConfigError`
        listing every violation
    """
    raw = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if filename is not None:
        if not os.path.exists(filename):
            raise ConfigError(['Config file %s does not exist' %(filename)])
        file_config = YamlConfig(filename).config
        if file_config is not None:
            raw = _merge(raw, file_config)
    errors = []
    for name, value in (overrides or []):
        try:
            set_dotted(raw, name, value)
        except ConfigError as e:
            errors.extend(e.violations)
    if len(errors) > 0:
        raise ConfigError(errors)
    return RunConfig(raw)

class RunConfig(object):
    """ Validated run configuration.

    Attributes
    ----------
    raw : :obj:`collections.OrderedDict`
        the merged nested mapping, echoed into reports
    lagkv_params : :obj:`LagkvParams`
    train_config : :obj:`TrainConfig`
    """
    def __init__(self, raw):
        self.raw = raw
        self._parse_config(raw)

    def _parse_config(self, raw):
        violations = []
        self.seed = int(raw['seed'])
        self.precision = raw['precision']
        self.mode = raw['mode']
        self.chunks_per_step = int(raw['chunks_per_step'])
        self.output_dir = raw['output_dir']
        self.model_config = OrderedDict(raw['model'])
        self.task_config = OrderedDict(raw['task'])
        self.equivalence_config = OrderedDict(raw['equivalence'])
        self.bench_config = OrderedDict(raw['bench'])
        self.grad_check_config = OrderedDict(raw['grad_check'])
        self.eval_config = OrderedDict(raw['eval'])

        if self.precision not in TOLERANCES:
            violations.append('precision %s not supported, use f32 or f64' %(self.precision))
        if self.mode not in (AttentionMode.VANILLA, AttentionMode.LRSA):
            violations.append('mode %s not supported, use vanilla or lrsa' %(self.mode))
        if self.chunks_per_step < 1:
            violations.append('chunks_per_step (%d) must be >= 1' %(self.chunks_per_step))

        self.lagkv_params = LagkvParams.from_config(raw['lagkv'])
        violations.extend(self.lagkv_params.violations())

        try:
            ToyTransformer(self.model_config, self.lagkv_params, Precision.F64, seed=0)
        except ConfigError as e:
            violations.extend(e.violations)

        train_fields = dict(raw['train'])
        self.train_config = None
        try:
            self.train_config = TrainConfig.from_config(train_fields)
        except ConfigError as e:
            violations.extend(e.violations)

        task_type = self.task_config['type']
        seq_len = int(self.task_config['seq_len'])
        if task_type not in (TaskType.COPY, TaskType.NEEDLE):
            violations.append('task.type %s not supported, use copy or needle' %(task_type))
        elif task_type == TaskType.COPY and (seq_len < 4 or seq_len % 2 != 0):
            violations.append('task.seq_len (%d) must be even and >= 4 for the copy task' %(seq_len))
        elif task_type == TaskType.NEEDLE and 2 * int(self.task_config['needle_len']) + 1 >= seq_len:
            violations.append('task.needle_len (%d) too long for task.seq_len %d'
                              %(self.task_config['needle_len'], seq_len))

        for r in self.eval_config['retention_ratios']:
            if not (0.0 < float(r) <= 1.0):
                violations.append('eval.retention_ratios entry %g must lie in (0, 1]' %(r))
        for n in self.bench_config['lengths']:
            if int(n) < self.lagkv_params.sink_size:
                violations.append('bench.lengths entry %d must be >= lagkv.sink_size' %(n))
        if int(self.equivalence_config['num_seeds']) < 1:
            violations.append('equivalence.num_seeds must be >= 1')

        if len(violations) > 0:
            raise ConfigError(violations)

    @property
    def dtype(self):
        return Precision.dtype(self.precision)

    @property
    def tolerance(self):
        return TOLERANCES[self.precision]

    def with_ratio(self, retention_ratio):
        """ Lagkv parameters with another retention ratio """
        p = self.lagkv_params
        return LagkvParams(p.sink_size, p.lag_size, retention_ratio, p.epsilon)

    def build_model(self, seed=None, params=None):
        seed = self.seed if seed is None else seed
        params = self.lagkv_params if params is None else params
        return ToyTransformer(self.model_config, params, self.precision, seed=seed)

    def to_dict(self):
        return copy.deepcopy(self.raw)

def _save_report(report, config, filename):
    path = os.path.join(config.output_dir, filename)
    write_json(report, path)
    logging.info('Wrote %s (pass=%s)' %(path, report.get('pass')))
    return report

def _random_tokens(seed, n, vocab_size):
    return Rng(seed).split(1)[0].integers(0, vocab_size, size=n)

def _prefill_logits(model, tokens, params, chunks_per_step):
    state = PrefillState.for_model(model, params, chunks_per_step)
    hidden = prefill(state, tokens, model)
    return model.project(hidden).data, state

def _snapshot_round_trip(cache, filename):
    """ Saves the compacted cache, reloads it and compares every view and the size law """
    cache.save_snapshot(filename)
    loaded = SegmentedKvCache.load_snapshot(filename)
    expected = expected_token_count(cache.tokens_seen, cache.params)
    ok = loaded.tokens_seen == cache.tokens_seen and len(loaded) == len(cache)
    for a, b in zip(cache.layers, loaded.layers):
        ok = ok and a.segment_counts() == b.segment_counts() and b.positions().shape[1] == expected
        for x, y in zip(a.views(), b.views()):
            ok = ok and np.array_equal(x, y)
    return bool(ok)

def _equivalence_seed(config, seed, n, decode_steps, snapshot_filename=None):
    """ Largest logit differences of one seed between the masked full forward and the cached path.

    The compacted cache after prefill is written to snapshot_filename, when given, and read back.
    """
    model = config.build_model(seed)
    tokens = _random_tokens(seed, n + decode_steps, model.vocab_size)
    reference = model.forward(tokens, AttentionMode.LRSA).data

    prefill_logits, state = _prefill_logits(model, tokens[:n], config.lagkv_params, config.chunks_per_step)
    snapshot_ok = None
    if snapshot_filename is not None:
        snapshot_ok = _snapshot_round_trip(state.cache, snapshot_filename)
    decode_logits = [decode_step(state, int(t), model) for t in tokens[n:]]
    prefill_diff = float(np.max(np.abs(prefill_logits - reference[:n])))
    decode_diff = 0.0
    if decode_steps > 0:
        decode_diff = float(np.max(np.abs(np.stack(decode_logits) - reference[n:])))
    return prefill_diff, decode_diff, state.compression_events, snapshot_ok

def cmd_equivalence(config):
    """ Condensation equivalence, batching invariance and the r=1 reduction.

    Returns
    -------
    :obj:`dict`
        report with max_abs_diff, seeds, tolerance and pass fields
    """
    eq = config.equivalence_config
    n = int(config.task_config['seq_len'])
    num_seeds = int(eq['num_seeds'])
    decode_steps = int(eq['decode_steps'])
    seeds = [config.seed + i for i in range(num_seeds)]
    if n < config.lagkv_params.sink_size:
        raise ConfigError(['task.seq_len (%d) must be >= lagkv.sink_size (%d) for equivalence'
                           %(n, config.lagkv_params.sink_size)])
    if not os.path.exists(config.output_dir):
        os.makedirs(config.output_dir)

    prefill_diff, decode_diff, min_events = 0.0, 0.0, None
    snapshot_filename = os.path.join(config.output_dir, 'cache_snapshot.lrkv')
    snapshot_ok = True
    for i, seed in enumerate(seeds):
        p, d, events, snap = _equivalence_seed(config, seed, n, decode_steps, snapshot_filename if i == 0 else None)
        if snap is not None:
            snapshot_ok = snap
        prefill_diff = max(prefill_diff, p)
        decode_diff = max(decode_diff, d)
        min_events = events if min_events is None else min(min_events, events)
    max_abs_diff = max(prefill_diff, decode_diff)
    logging.info('Condensation equivalence over %d seeds: max abs diff %.3e' %(num_seeds, max_abs_diff))

    # chunks_per_step must not change a single bit
    chunk_steps = [int(c) for c in eq['chunk_steps']]
    batching_equal = True
    for seed in seeds[:int(eq['batching_seeds'])]:
        model = config.build_model(seed)
        tokens = _random_tokens(seed, n, model.vocab_size)
        outputs = [prefill(PrefillState.for_model(model, config.lagkv_params, c), tokens, model).data
                   for c in chunk_steps]
        batching_equal = batching_equal and all(np.array_equal(outputs[0], o) for o in outputs[1:])

    # with r=1 nothing is evicted and LRSA is causal attention
    full_params = config.with_ratio(1.0)
    single_chunk = config.lagkv_params.sink_size + config.lagkv_params.lag_size
    reduction_exact, single_chunk_exact = True, True
    for seed in seeds[:int(eq['reduction_seeds'])]:
        model = config.build_model(seed, full_params)
        tokens = _random_tokens(seed, n, model.vocab_size)
        vanilla = model.forward(tokens, AttentionMode.VANILLA).data
        reduction_exact = reduction_exact and np.array_equal(model.forward(tokens, AttentionMode.LRSA).data, vanilla)
        short = config.build_model(seed)
        short_tokens = tokens[:min(single_chunk, n)]
        single_chunk_exact = single_chunk_exact and np.array_equal(short.forward(short_tokens, AttentionMode.LRSA).data,
                                                                   short.forward(short_tokens, AttentionMode.VANILLA).data)

    report = OrderedDict([
        ('precision', config.precision),
        ('seeds', num_seeds),
        ('seq_len', n),
        ('decode_steps', decode_steps),
        ('tolerance', config.tolerance),
        ('max_abs_diff', max_abs_diff),
        ('prefill_max_abs_diff', prefill_diff),
        ('decode_max_abs_diff', decode_diff),
        ('min_compression_events', int(min_events)),
        ('snapshot', OrderedDict([('file', os.path.basename(snapshot_filename)), ('round_trip', snapshot_ok)])),
        ('batching', OrderedDict([('chunks_per_step', chunk_steps), ('seeds', min(num_seeds, int(eq['batching_seeds']))),
                                  ('bitwise_equal', bool(batching_equal))])),
        ('reduction', OrderedDict([('seeds', min(num_seeds, int(eq['reduction_seeds']))),
                                   ('exact', bool(reduction_exact)),
                                   ('single_chunk_exact', bool(single_chunk_exact))])),
    ])
    report['pass'] = bool(max_abs_diff <= config.tolerance and batching_equal and reduction_exact
                          and single_chunk_exact and snapshot_ok)
    return _save_report(report, config, 'equivalence.json')

def cmd_bench(config):
    """ Visible score entries and wall time of LRSA vs full prefill across lengths.

    Entry counts go to bench.json, which is deterministic; wall times go to bench_timing.json.
    """
    params = config.lagkv_params
    full_params = config.with_ratio(1.0)
    model = config.build_model()
    lengths = sorted(int(n) for n in config.bench_config['lengths'])
    tokens = _random_tokens(config.seed, max(lengths), model.vocab_size)

    rows, timing = [], []
    ok = True
    for n in lengths:
        entries = {}
        elapsed = {}
        for name, p in [('lrsa', params), ('full', full_params)]:
            state = PrefillState.for_model(model, p, config.chunks_per_step)
            start = time.time()
            prefill(state, tokens[:n], model)
            elapsed[name] = time.time() - start
            entries[name] = state.op_counter.per_head
            if name == 'lrsa':
                cached = state.cache.token_count
        bound = lrsa_entry_bound(n, params)
        causal = full_causal_entries(n)
        row = OrderedDict([('n', n),
                           ('attn_score_entries', entries['lrsa']),
                           ('lrsa_entries', entries['lrsa']),
                           ('full_entries', entries['full']),
                           ('bound', bound),
                           ('causal_entries', causal),
                           ('entry_ratio', float(entries['lrsa']) / entries['full']),
                           ('cached_tokens', cached),
                           ('expected_cached_tokens', expected_token_count(n, params)),
                           ('bound_match', entries['lrsa'] == bound),
                           ('full_match', entries['full'] == causal)])
        ok = ok and row['bound_match'] and row['full_match'] and entries['lrsa'] <= causal
        rows.append(row)
        timing.append(OrderedDict([('n', n), ('lrsa_seconds', elapsed['lrsa']), ('full_seconds', elapsed['full'])]))
        logging.info('n=%5d  lrsa %9d  full %9d  bound %9d  %.2fs / %.2fs'
                     %(n, entries['lrsa'], entries['full'], bound, elapsed['lrsa'], elapsed['full']))

    # doubling n should less-than-quadruple LRSA entries
    doubling = []
    by_n = dict((r['n'], r) for r in rows)
    for n in lengths:
        if 2 * n in by_n:
            lrsa_ratio = float(by_n[2 * n]['lrsa_entries']) / by_n[n]['lrsa_entries']
            full_ratio = float(by_n[2 * n]['full_entries']) / by_n[n]['full_entries']
            doubling.append(OrderedDict([('n', n), ('lrsa_ratio', lrsa_ratio), ('full_ratio', full_ratio)]))
            ok = ok and lrsa_ratio < full_ratio

    report = OrderedDict([('lagkv', params.to_dict()),
                          ('chunks_per_step', config.chunks_per_step),
                          ('rows', rows),
                          ('doubling', doubling),
                          ('pass', bool(ok))])
    write_json(OrderedDict([('rows', timing)]), os.path.join(config.output_dir, 'bench_timing.json'))
    return _save_report(report, config, 'bench.json')

def _task_rng(config, stream=1):
    return Rng(config.seed).split(stream + 1)[stream]

def cmd_train(config):
    """ Trains in the configured mode; writes loss_curve.csv, model.lrsa and train_summary.json """
    model = config.build_model()
    task = config.task_config
    stream = task_stream(_task_rng(config), task['type'], int(task['seq_len']), model.vocab_size,
                         int(task['needle_len']))
    trainer = get_lrsa_trainer()(model, stream, config.output_dir, config.train_config, config.mode)
    diverged = False
    losses = []
    try:
        losses = trainer.train()
    except DivergenceError as e:
        logging.error(str(e))
        diverged = True
        losses = list(trainer.train_stats_logger.train_losses) if trainer.train_stats_logger is not None else []
    report = OrderedDict([('mode', config.mode),
                          ('steps', len(losses)),
                          ('final_loss', float(losses[-1]) if len(losses) > 0 else None),
                          ('diverged', diverged),
                          ('num_parameters', model.num_parameters),
                          ('config', config.to_dict()),
                          ('pass', not diverged)])
    return _save_report(report, config, 'train_summary.json')

def cmd_score_dump(config, tokens=None):
    """ Per layer / head / chunk LagKV scores and retained indices of a prefill.

    Parameters
    ----------
    tokens : :obj:`numpy.ndarray`
        token ids, defaults to a generated task instance
    """
    params = config.lagkv_params
    model = config.build_model()
    if tokens is None:
        task = config.task_config
        tokens = gen_task(_task_rng(config), task['type'], int(task['seq_len']), model.vocab_size,
                          int(task['needle_len'])).tokens
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] < params.sink_size + 2 * params.lag_size:
        raise ConfigError(['score-dump needs at least S + 2L = %d tokens, got %d'
                           %(params.sink_size + 2 * params.lag_size, tokens.shape[0])])
    state = PrefillState.for_model(model, params, config.chunks_per_step)
    prefill(state, tokens, model)

    chunks = []
    ok = True
    for layer_idx, layer in enumerate(state.cache.layers):
        for p, scores in layer.scores.items():
            retained = layer.retention[p].indices
            for h in range(layer.num_kv_heads):
                row = scores.scores[h]
                chunks.append(OrderedDict([('layer', layer_idx),
                                           ('head', h),
                                           ('chunk_index', int(p)),
                                           ('scores', row.tolist()),
                                           ('retained', retained[h].tolist())]))
                ok = ok and abs(float(np.sum(row)) - 2.0) <= 1e-9 and retained[h].shape[0] == params.retain_count
    report = OrderedDict([('lagkv', params.to_dict()),
                          ('num_tokens', int(tokens.shape[0])),
                          ('chunks', chunks),
                          ('pass', bool(ok))])
    return _save_report(report, config, 'score_dump.json')

def cmd_gen_task(config):
    """ Writes one task instance """
    task = config.task_config
    instance = gen_task(_task_rng(config), task['type'], int(task['seq_len']), int(config.model_config['vocab_size']),
                        int(task['needle_len']))
    report = instance.to_dict()
    report['pass'] = True
    return _save_report(report, config, 'task.json')

def cmd_grad_check(config):
    """ Analytic vs finite-difference gradients in both attention modes """
    gc = config.grad_check_config
    model = config.build_model()
    seq_len = int(gc['seq_len'])
    rng = _task_rng(config)
    tokens = rng.integers(0, model.vocab_size, size=seq_len + 1)
    errors = OrderedDict()
    for mode in (AttentionMode.VANILLA, AttentionMode.LRSA):
        errors[mode] = grad_check(model, tokens[:-1], tokens[1:], mode, num_coords=int(gc['num_coords']),
                                  step=float(gc['step']), floor=float(gc['floor']), seed=config.seed)
    report = OrderedDict([('precision', config.precision),
                          ('seq_len', seq_len),
                          ('num_coords', int(gc['num_coords'])),
                          ('max_rel_error', errors),
                          ('tolerance', float(gc['tolerance'])),
                          ('pass', bool(max(errors.values()) < float(gc['tolerance'])))])
    return _save_report(report, config, 'grad_check.json')

def _log_softmax(logits):
    m = np.max(logits)
    return logits - (m + np.log(np.sum(np.exp(logits - m))))

def evaluate_instance(model, instance, params, chunks_per_step):
    """ Prefills up to the first scored position, then feeds the reference tokens through decode steps.

    Returns
    -------
    tuple of :obj:`numpy.ndarray`
        per scored position: greedy-correct flags and target losses
    """
    answer = instance.answer_positions
    first = int(answer[0])
    logits, state = _prefill_logits(model, instance.tokens[:first + 1], params, chunks_per_step)
    by_position = {first: logits[first]}
    for i in range(first + 1, int(answer[-1]) + 1):
        by_position[i] = decode_step(state, int(instance.tokens[i]), model)
    correct = np.array([np.argmax(by_position[i]) == instance.targets[i] for i in answer])
    losses = np.array([-_log_softmax(by_position[i])[instance.targets[i]] for i in answer])
    return correct, losses

def cmd_eval(config, checkpoint):
    """ Greedy answer accuracy and loss of a trained model under each inference retention ratio """
    model = get_lrsa_model().load(checkpoint)
    task = config.task_config
    num_instances = int(config.eval_config['num_instances'])
    rows = []
    for r in config.eval_config['retention_ratios']:
        params = config.with_ratio(float(r))
        rng = _task_rng(config, stream=2)
        correct, losses = [], []
        for _ in range(num_instances):
            instance = gen_task(rng, task['type'], int(task['seq_len']), model.vocab_size, int(task['needle_len']))
            c, l = evaluate_instance(model, instance, params, config.chunks_per_step)
            correct.append(c)
            losses.append(l)
        correct = np.concatenate(correct)
        losses = np.concatenate(losses)
        rows.append(OrderedDict([('retention_ratio', float(r)),
                                 ('compression', 1.0 / float(r)),
                                 ('accuracy', float(np.mean(correct))),
                                 ('loss', float(np.mean(losses))),
                                 ('num_tokens', int(correct.shape[0]))]))
        logging.info('r=%.3f: accuracy %.4f, loss %.4f' %(float(r), rows[-1]['accuracy'], rows[-1]['loss']))
    report = OrderedDict([('checkpoint', checkpoint),
                          ('task', task['type']),
                          ('num_instances', num_instances),
                          ('rows', rows),
                          ('pass', True)])
    return _save_report(report, config, 'eval.json')