"""
Dense tensor engine with reverse-mode automatic differentiation.

Every reduction (matmul inner products, sums, softmax denominators) accumulates
along the reduced axis in ascending index order, so a result never depends on
how many rows or keys take part in a computation and exact-zero terms never
change a sum.
"""
import numpy as np

from .utils.exceptions import DimensionError, DegenerateRowError, GatherIndexError, GradientError

def _last_partial_sum(x):
    """ Sequential running sum along the last axis, keeping only its final entry """
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1], dtype=x.dtype)
    # + 0.0 turns a -0.0 total into +0.0, as a sum started from zero would
    return np.cumsum(x, axis=-1)[..., -1] + x.dtype.type(0.0)

def ordered_sum(x, axis=None, keepdims=False):
    """ Sum along an axis with a fixed ascending accumulation order.

    Parameters
    ----------
    x : :obj:`numpy.ndarray`
        array to reduce
    axis : int
        axis to reduce, or None to reduce the flattened array
    keepdims : bool
        whether to keep the reduced axis with extent 1

    Returns
    -------
    :obj:`numpy.ndarray`
        the reduced array
    """
    x = np.asarray(x)
    if axis is None:
        out = np.asarray(_last_partial_sum(x.reshape(-1)), dtype=x.dtype)
        if keepdims:
            return out.reshape((1,) * x.ndim)
        return out
    axis = axis % x.ndim
    out = _last_partial_sum(np.moveaxis(x, axis, -1))
    if keepdims:
        out = np.expand_dims(out, axis)
    return out

def ordered_matmul(a, b):
    """ Matrix product whose inner sum runs over k in ascending order,
    bitwise equal to a scalar triple loop. """
    dtype = np.result_type(a.dtype, b.dtype)
    products = a.astype(dtype, copy=False)[:, None, :] * b.astype(dtype, copy=False).T[None, :, :]
    return _last_partial_sum(products)

class Tensor(object):
    """ Dense real-valued array with optional gradient tracking.

    Attributes
    ----------
    data : :obj:`numpy.ndarray`
        values in row-major order
    requires_grad : bool
        whether gradients flow to this tensor
    grad : :obj:`numpy.ndarray`
        gradient of the last backward sweep, same shape as data
    """
    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == 'f' else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._swept = False

    @staticmethod
    def from_op(data, parents, backward):
        """ Creates the output node of a differentiable operation.

        Parameters
        ----------
        data : :obj:`numpy.ndarray`
            forward result
        parents : :obj:`list` of :obj:`Tensor`
            operands, in a fixed order
        backward : function
            maps the output gradient to a tuple with one gradient (or None) per parent

        Returns
        -------
        :obj:`Tensor`
            the output; only tracked when some parent requires gradients
        """
        out = Tensor(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' %(self.shape, self.dtype, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def _topological_order(self):
        """ Depth-first post-order over tracked nodes, parents visited in operand order """
        order = []
        state = {}
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise GradientError('Cycle detected in the computation graph')
            state[key] = 1
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad:
                    pkey = id(parent)
                    if state.get(pkey) == 1:
                        raise GradientError('Cycle detected in the computation graph')
                    if state.get(pkey) != 2:
                        stack.append((parent, False))
        return order

    def backward(self):
        """ Reverse topological sweep filling grad for every tracked tensor in the graph of this scalar. """
        if self.data.size != 1 or self.data.ndim > 1:
            raise GradientError('backward requires a scalar loss, got shape %s' %(self.shape,))
        if not self.requires_grad:
            raise GradientError('Loss has no gradient lineage')
        if self._swept:
            raise GradientError('backward was already called on this loss; rebuild the graph first')
        self._swept = True

        order = self._topological_order()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)

def add(a, b):
    _check_same('add', a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))

def sub(a, b):
    _check_same('sub', a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))

def mul(a, b):
    _check_same('mul', a, b)
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))

def scale(x, c):
    c = x.dtype.type(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,))

def add_constant(x, c):
    """ Adds an untracked array of the same shape, e.g. an additive 0/-inf mask """
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise DimensionError('add_constant', x.shape, c.shape)
    return Tensor.from_op(x.data + c, (x,), lambda g: (g,))

def transpose(x):
    if x.ndim != 2:
        raise DimensionError('transpose', x.shape)
    return Tensor.from_op(x.data.T.copy(), (x,), lambda g: (g.T,))

def matmul(a, b):
    """ Matrix product a[m x k] . b[k x n].

    The backward pass accumulates a.grad += g . b^T and b.grad += a^T . g
    with the same ascending inner order.

    Raises
    ------
    :obj:`DimensionError`
        when the inner extents disagree
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)

    def backward(g):
        ga = ordered_matmul(g, b.data.T) if a.requires_grad else None
        gb = ordered_matmul(a.data.T, g) if b.requires_grad else None
        return ga, gb
    return Tensor.from_op(ordered_matmul(a.data, b.data), (a, b), backward)

def reduce_sum(x, axis=None):
    out = ordered_sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,), backward)

def softmax(x, axis=-1):
    """ Numerically stabilised softmax; -inf inputs map to exact zeros.

    Parameters
    ----------
    x : :obj:`Tensor`
        input logits, may hold -inf sentinels
    axis : int
        axis to normalise over

    Returns
    -------
    :obj:`Tensor`
        slices that sum to one

    Raises
    ------
    :obj:`DegenerateRowError`
        when a slice holds only -inf (a fully masked query)
    """
    axis = axis % x.ndim
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateRowError('softmax slice is entirely -inf (fully masked query)')
    e = np.exp(x.data - m)
    y = e / ordered_sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - ordered_sum(g * y, axis=axis, keepdims=True)),)
    return Tensor.from_op(y, (x,), backward)

def reduce_std(x, axis=-1):
    """ Population standard deviation (divides by the extent) along an axis """
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 1:
        raise DimensionError('reduce_std', x.shape)
    inv_n = x.dtype.type(1.0 / n)
    centered = x.data - ordered_sum(x.data, axis=axis, keepdims=True) * inv_n
    std = np.sqrt(ordered_sum(centered * centered, axis=axis) * inv_n)

    def backward(g):
        safe = np.where(std > 0, std, 1.0)
        coeff = np.where(std > 0, g / (safe * n), 0.0)
        return (centered * np.expand_dims(coeff, axis),)
    return Tensor.from_op(std.astype(x.dtype), (x,), backward)

def reduce_minmax(x, axis=0):
    """ Elementwise min and max along an axis. Not differentiated. """
    return (Tensor(np.min(x.data, axis=axis), dtype=x.dtype),
            Tensor(np.max(x.data, axis=axis), dtype=x.dtype))

def gather_rows(x, idx):
    """ Selects rows of a 2-D tensor at strictly ascending indices.

    Raises
    ------
    :obj:`GatherIndexError`
        for out-of-range or non-ascending indices
    """
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size > 0:
        if idx[0] < 0 or idx[-1] >= x.shape[0]:
            raise GatherIndexError('Gather index out of range [0, %d): %s' %(x.shape[0], idx.tolist()))
        if np.any(np.diff(idx) <= 0):
            raise GatherIndexError('Gather indices must be strictly ascending: %s' %(idx.tolist()))

    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)
    return Tensor.from_op(x.data[idx].copy(), (x,), backward)

def embedding(weight, ids):
    """ Looks up rows of an embedding table; repeated ids accumulate gradient in id order """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids, g)
        return (out,)
    return Tensor.from_op(weight.data[ids].copy(), (weight,), backward)

def slice_cols(x, start, stop):
    def backward(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)
    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward)

def concat_cols(tensors):
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i+1]] for i in range(len(tensors)))
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)

def rms_norm(x, weight, eps=1e-6):
    """ Root-mean-square normalisation over the last axis, scaled by a learned gain """
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise DimensionError('rms_norm', x.shape, weight.shape)
    d = x.shape[1]
    inv_d = x.dtype.type(1.0 / d)
    r = 1.0 / np.sqrt(ordered_sum(x.data * x.data, axis=1, keepdims=True) * inv_d + x.dtype.type(eps))
    xhat = x.data * r

    def backward(g):
        gxhat = g * weight.data
        gx = r * (gxhat - xhat * ordered_sum(gxhat * xhat, axis=1, keepdims=True) * inv_d)
        gw = ordered_sum(g * xhat, axis=0)
        return gx, gw
    return Tensor.from_op(xhat * weight.data, (x, weight), backward)

def silu(x):
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)
    return Tensor.from_op(x.data * sig, (x,), backward)

def cross_entropy(logits, targets, weights=None):
    """ Mean token-level cross-entropy.

    Parameters
    ----------
    logits : :obj:`Tensor`
        [n x V] unnormalised scores
    targets : :obj:`numpy.ndarray`
        n target ids
    weights : :obj:`numpy.ndarray`
        optional per-position weights (0 excludes a position)

    Returns
    -------
    :obj:`Tensor`
        scalar loss
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise DimensionError('cross_entropy', logits.shape, targets.shape)
    if weights is None:
        weights = np.ones(n, dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    total = ordered_sum(weights)
    m = np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = ordered_sum(e, axis=1, keepdims=True)
    lse = (m + np.log(s)).reshape(-1)
    picked = logits.data[np.arange(n), targets]
    loss = ordered_sum(weights * (lse - picked)) / total

    def backward(g):
        probs = e / s
        probs[np.arange(n), targets] -= 1.0
        return (probs * (weights / total)[:, None] * g,)
    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)

class Rng(object):
    """ Seeded splittable generator on numpy's counter-based Philox bit generator.

    Identical seeds give identical draw sequences on every platform.
    """
    def __init__(self, seed, _seed_seq=None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._seed_seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seed_seq))

    def split(self, num):
        """ Returns num independent child generators """
        return [Rng(self.seed, _seed_seq=s) for s in self._seed_seq.spawn(num)]

    def normal(self, shape, std=1.0, dtype=np.float64):
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64):
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)
