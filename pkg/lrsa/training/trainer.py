"""
Trains the toy transformer with AdamW and a cosine learning rate schedule,
in vanilla or LRSA attention mode, and checks analytic gradients against
central finite differences.
"""
import logging
import os
import time
from collections import OrderedDict

import numpy as np

from ..tensor import Rng, add, cross_entropy, scale
from ..utils import AttentionMode, ConfigError, DivergenceError, GeneralConstants, TrainStatsLogger

class TrainConfig(object):
    """ Optimizer and loop settings.

    Attributes
    ----------
    lr : float
        peak learning rate, decayed to 0 along a cosine
    beta1, beta2 : float
        AdamW moment decay rates
    weight_decay : float
        decoupled weight decay
    eps : float
        AdamW denominator guard
    steps : int
        optimizer steps
    batch_size : int
        task instances per step
    log_frequency : int
        steps between progress log lines
    save_frequency : int
        steps between checkpoints, 0 to save only at the end
    """
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.95, weight_decay=0.1, eps=1e-8, steps=2000,
                 batch_size=1, log_frequency=50, save_frequency=0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.log_frequency = int(log_frequency)
        self.save_frequency = int(save_frequency)
        violations = self.violations()
        if len(violations) > 0:
            raise ConfigError(violations)

    @staticmethod
    def from_config(config):
        keys = ['lr', 'beta1', 'beta2', 'weight_decay', 'eps', 'steps', 'batch_size', 'log_frequency',
                'save_frequency']
        return TrainConfig(**dict((k, config[k]) for k in keys if k in config))

    def violations(self):
        out = []
        if self.lr < 0:
            out.append('train.lr (%g) must be >= 0' %(self.lr))
        for name in ['beta1', 'beta2']:
            value = getattr(self, name)
            if value <= 0 or value >= 1:
                out.append('train.%s (%g) must lie in (0, 1)' %(name, value))
        if self.eps <= 0:
            out.append('train.eps (%g) must be > 0' %(self.eps))
        if self.steps < 0:
            out.append('train.steps (%d) must be >= 0' %(self.steps))
        if self.batch_size < 1:
            out.append('train.batch_size (%d) must be >= 1' %(self.batch_size))
        if self.log_frequency < 1:
            out.append('train.log_frequency (%d) must be >= 1' %(self.log_frequency))
        return out

    def to_dict(self):
        return OrderedDict([('lr', self.lr), ('beta1', self.beta1), ('beta2', self.beta2),
                            ('weight_decay', self.weight_decay), ('eps', self.eps), ('steps', self.steps),
                            ('batch_size', self.batch_size), ('log_frequency', self.log_frequency),
                            ('save_frequency', self.save_frequency)])

def cosine_lr(step, cfg):
    """ Learning rate of 1-based step t: lr * (1 + cos(pi * (t-1) / steps)) / 2, lr when steps is 0 """
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / float(max(cfg.steps, 1))))

class AdamWState(object):
    """ First and second moment estimates, one pair per parameter name """
    def __init__(self):
        self.m = OrderedDict()
        self.v = OrderedDict()

def adamw_step(params, grads, t, cfg, state):
    """ One AdamW update with decoupled weight decay and bias correction, in place.

    Parameters
    ----------
    params : :obj:`collections.OrderedDict`
        name -> :obj:`Tensor`
    grads : :obj:`collections.OrderedDict`
        name -> :obj:`numpy.ndarray`, missing or None entries count as zero
    t : int
        1-based step
    cfg : :obj:`TrainConfig`
    state : :obj:`AdamWState`

    Returns
    -------
    float
        learning rate applied
    """
    lr = cosine_lr(t, cfg)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        data = p.data - lr * cfg.weight_decay * p.data
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
    return lr

class LrsaTrainer(object):
    """ Trains a model on a stream of task instances """

    def __init__(self, model, task_stream, output_dir=None, config=None, mode=AttentionMode.VANILLA):
        """
        Parameters
        ----------
        model : :obj:`ToyTransformer`
            model to optimize in place
        task_stream : iterator
            yields :obj:`TaskInstance` objects
        output_dir : str
            directory for the loss curve and checkpoints, None to write nothing
        config : :obj:`TrainConfig`
        mode : str
            attention mode of the forward passes
        """
        if mode not in (AttentionMode.VANILLA, AttentionMode.LRSA):
            raise ValueError('Attention mode %s not supported' %(mode))
        self.model = model
        self.task_stream = task_stream
        self.output_dir = output_dir
        self.cfg = config if config is not None else TrainConfig()
        self.mode = mode
        self.optimizer_state = AdamWState()
        self.train_stats_logger = None

    def _create_loss(self, instances):
        """ Mean over the batch of each instance's masked cross-entropy, summed in batch order """
        total = None
        for instance in instances:
            logits = self.model.forward(instance.tokens, self.mode)
            loss = cross_entropy(logits, instance.targets, instance.loss_mask)
            total = loss if total is None else add(total, loss)
        return scale(total, 1.0 / len(instances))

    def _save(self, filename='model.lrsa'):
        if self.output_dir is not None:
            self.model.save(os.path.join(self.output_dir, filename))

    def train(self):
        """ Runs the optimization loop.

        Returns
        -------
        :obj:`list` of float
            loss of every step, measured before that step's update

        Raises
        ------
        :obj:`DivergenceError`
            when the loss becomes non-finite; the loss curve so far is still written
        """
        if self.output_dir is not None:
            if not os.path.exists(self.output_dir):
                os.makedirs(self.output_dir)
            self.train_stats_logger = TrainStatsLogger(self.output_dir)
        logging.info('Beginning optimization: %d steps in %s mode' %(self.cfg.steps, self.mode))
        losses = []
        start_time = time.time()
        for step in range(1, self.cfg.steps + 1):
            instances = [next(self.task_stream) for _ in range(self.cfg.batch_size)]
            self.model.zero_grad()
            loss = self._create_loss(instances)
            l = loss.item()
            if not np.isfinite(l):
                logging.error('Encountered non-finite loss at step %d' %(step))
                if self.train_stats_logger is not None:
                    self.train_stats_logger.log()
                raise DivergenceError(step, l)
            loss.backward()
            grads = OrderedDict((name, w.grad) for name, w in self.model.weights.items())
            lr = adamw_step(self.model.weights, grads, step, self.cfg, self.optimizer_state)
            losses.append(l)
            if self.train_stats_logger is not None:
                self.train_stats_logger.update(step=step, learning_rate=lr, train_loss=l)

            if step % self.cfg.log_frequency == 0 or step == self.cfg.steps:
                elapsed_time = time.time() - start_time
                start_time = time.time()
                logging.info('Step %d, %.1f ms per step' %(step, 1000 * elapsed_time / self.cfg.log_frequency))
                logging.info('Minibatch loss: %.4f, learning rate: %.6f' %(l, lr))
                if self.train_stats_logger is not None:
                    self.train_stats_logger.log()

            if self.cfg.save_frequency > 0 and step % self.cfg.save_frequency == 0:
                self._save('model_%05d.lrsa' %(step))

        if self.train_stats_logger is not None:
            self.train_stats_logger.log()
        self._save()
        if len(losses) > 0:
            logging.info('Final loss: %.4f' %(losses[-1]))
        return losses

def train(model, task_stream, cfg, mode=AttentionMode.VANILLA, output_dir=None):
    """ Trains a model and returns its loss curve """
    return LrsaTrainer(model, task_stream, output_dir, cfg, mode).train()

def grad_check(model, tokens, targets, mode=AttentionMode.VANILLA, weights=None, num_coords=200, step=1e-4,
               floor=1e-3, seed=GeneralConstants.SEED):
    """ Largest relative error between analytic and central-difference gradients.

    Coordinates are sampled from every parameter tensor in proportion to its
    size, at least one each. In LRSA mode the retention plan is computed once
    and frozen so that both passes see the same masks.

    Parameters
    ----------
    model : :obj:`ToyTransformer`
    tokens, targets : :obj:`numpy.ndarray`
        inputs and next-token targets
    mode : str
    weights : :obj:`numpy.ndarray`
        optional loss mask
    num_coords : int
        minimum number of coordinates to check
    step : float
        finite difference step h
    floor : float
        denominator floor of the relative error |a - n| / max(|a|, |n|, floor)

    Returns
    -------
    float
        maximum relative error over the sampled coordinates
    """
    plan = model.plan_retention(tokens) if mode == AttentionMode.LRSA else None

    def loss_value():
        return model.loss(tokens, targets, mode, weights, plan)

    model.zero_grad()
    loss = loss_value()
    loss.backward()
    analytic = OrderedDict((name, np.zeros_like(w.data) if w.grad is None else w.grad.copy())
                           for name, w in model.weights.items())

    rng = Rng(seed)
    total = float(model.num_parameters)
    worst = 0.0
    checked = 0
    for name, w in model.weights.items():
        count = min(w.size, max(1, int(np.ceil(num_coords * w.size / total))))
        coords = rng.permutation(w.size)[:count]
        flat = w.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_value().item()
            flat[idx] = orig - step
            minus = loss_value().item()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                logging.debug('%s[%d]: analytic %.6e numeric %.6e' %(name, idx, a, numeric))
            worst = max(worst, err)
            checked += 1
    logging.info('Checked %d gradient coordinates, max relative error %.3e' %(checked, worst))
    return worst
