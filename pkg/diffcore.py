#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""Reverse-mode differentiation over dense 64-bit numpy arrays.

   A Tensor produced by an op whose inputs require gradients carries a TapeEntry linking it to
   those inputs. backward() orders the reachable entries by creation sequence (inputs are always
   created before their outputs) and replays them in reverse, so every op is visited exactly once.
   Gradients accumulate into .grad until zero_grad() is called, which is how the trainer
   implements gradient accumulation.
"""

import dataclasses
import itertools

import numpy as np


LOG_FLOOR = 1e-12
REL_FLOOR = 1e-6

_sequence = itertools.count()


class DiffError(Exception):
    pass


class ShapeError(DiffError):
    pass


class RankError(DiffError):
    pass


class NumericsError(DiffError):
    pass


class TapeEntry:
    """One executed op: its inputs and the closure mapping output grad to input grads."""
    __slots__ = ('seq', 'op_kind', 'inputs', 'backward_fn')

    def __init__(self, seq, op_kind, inputs, backward_fn):
        self.seq = seq
        self.op_kind = op_kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', '_entry')
    # numpy defers to our reflected operators (array - Tensor -> Tensor.__rsub__)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._entry = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t._entry = None
        return t

    @property
    def shape(self):
        return list(self.data.shape)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return forward_op('add', [self, as_tensor(other)])

    def __radd__(self, other):
        return forward_op('add', [as_tensor(other), self])

    def __sub__(self, other):
        return forward_op('add', [self, forward_op('mul', [as_tensor(other), as_tensor(-1.0)])])

    def __rsub__(self, other):
        return forward_op('add', [as_tensor(other), forward_op('mul', [self, as_tensor(-1.0)])])

    def __mul__(self, other):
        return forward_op('mul', [self, as_tensor(other)])

    def __rmul__(self, other):
        return forward_op('mul', [as_tensor(other), self])

    def __neg__(self):
        return forward_op('mul', [self, as_tensor(-1.0)])

    def __matmul__(self, other):
        return forward_op('matmul', [self, as_tensor(other)])


def as_tensor(x):
    """Wrap constants; pass Tensors through unchanged."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ops reachable from an output, in execution order."""

    def __init__(self, output):
        seen = set()
        stack = [output]
        taped = []
        self.tensors = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.requires_grad:
                self.tensors.append(t)
            if t._entry is not None:
                taped.append(t)
                stack.extend(t._entry.inputs)
        taped.sort(key=lambda t: t._entry.seq)
        self.entries = taped

    def __len__(self):
        return len(self.entries)


# op implementations: each takes input arrays (and attrs) and returns (output, backward_fn)

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op_kind, x, y):
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(f"{op_kind}: shapes {list(x.shape)} and {list(y.shape)} do not conform")


def _matmul(x, y):
    if x.ndim not in (1, 2) or y.ndim not in (1, 2) or x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(x.shape)} by {list(y.shape)}")

    def backward(g):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T, x.T @ g
        if x.ndim == 2:
            return np.outer(g, y), x.T @ g
        if y.ndim == 2:
            return y @ g, np.outer(x, g)
        return g * y, g * x
    return x @ y, backward


def _add(x, y):
    _broadcast_check('add', x, y)
    return x + y, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))


def _mul(x, y):
    _broadcast_check('mul', x, y)
    return x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))


def _tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _relu(x):
    return np.maximum(x, 0.0), lambda g: (g * (x > 0.0),)


def _exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _log(x):
    floored = np.maximum(x, LOG_FLOOR)
    return np.log(floored), lambda g: (np.where(x > LOG_FLOOR, g / floored, 0.0),)


def _softmax_rows(x):
    if x.ndim == 0:
        raise ShapeError("softmax_rows: needs at least one axis, got a scalar")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _gather_index(x, index):
    try:
        out = np.array(x[index])
    except IndexError:
        raise ShapeError(f"gather_index: index {index!r} out of range for shape {list(x.shape)}")

    def backward(g):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)
    return out, backward


def _sum(x, axis=None):
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return np.sum(x, axis=axis), backward


def _mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty reduction over shape {list(x.shape)}")

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)
    return np.mean(x, axis=axis), backward


def _clip(x, lo, hi):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), lambda g: (g * inside,)


def _stop_grad(x):
    return x.copy(), lambda g: (np.zeros_like(x),)


def _stack(*xs, axis=0):
    if not xs:
        raise ShapeError("stack: no inputs")
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(list(s) for s in shapes)}")
    out = np.stack(xs, axis=axis)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs)))


_OPS = {
    'matmul': _matmul,
    'add': _add,
    'mul': _mul,
    'tanh': _tanh,
    'relu': _relu,
    'exp': _exp,
    'log': _log,
    'softmax_rows': _softmax_rows,
    'gather_index': _gather_index,
    'sum': _sum,
    'mean': _mean,
    'clip': _clip,
    'stop_grad': _stop_grad,
    'stack': _stack,
}

_UNARY = {'tanh', 'relu', 'exp', 'log', 'softmax_rows', 'gather_index', 'sum', 'mean', 'clip',
          'stop_grad'}
_BINARY = {'matmul', 'add', 'mul'}


def forward_op(op_kind, inputs, **attrs):
    """Run op_kind on inputs; record it on the tape when any input requires grad."""
    if op_kind not in _OPS:
        raise DiffError(f"unknown op {op_kind!r}")
    inputs = [as_tensor(t) for t in inputs]
    if ((op_kind in _UNARY and len(inputs) != 1) or
            (op_kind in _BINARY and len(inputs) != 2)):
        raise ShapeError(f"{op_kind}: wrong number of inputs ({len(inputs)}) with shapes "
                         f"{[t.shape for t in inputs]}")
    data, backward_fn = _OPS[op_kind](*[t.data for t in inputs], **attrs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        out._entry = TapeEntry(next(_sequence), op_kind, tuple(inputs), backward_fn)
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.get(id(t))
        if g is None:
            continue
        entry = t._entry
        for inp, ig in zip(entry.inputs, entry.backward_fn(g)):
            if not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    for t in tape.tensors:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.copy() if t.grad is None else t.grad + g


def matmul(a, b):
    return forward_op('matmul', [a, b])


def add(a, b):
    return forward_op('add', [a, b])


def mul(a, b):
    return forward_op('mul', [a, b])


def tanh(x):
    return forward_op('tanh', [x])


def relu(x):
    return forward_op('relu', [x])


def exp(x):
    return forward_op('exp', [x])


def log(x):
    return forward_op('log', [x])


def softmax_rows(x):
    return forward_op('softmax_rows', [x])


def gather_index(x, index):
    return forward_op('gather_index', [x], index=index)


def reduce_sum(x, axis=None):
    return forward_op('sum', [x], axis=axis)


def reduce_mean(x, axis=None):
    return forward_op('mean', [x], axis=axis)


def clip(x, lo, hi):
    return forward_op('clip', [x], lo=lo, hi=hi)


def stop_grad(x):
    return forward_op('stop_grad', [x])


def stack(xs, axis=0):
    return forward_op('stack', list(xs), axis=axis)


def minimum(a, b):
    """Elementwise min(a, b) written as a - relu(a - b)."""
    return a - relu(a - b)


@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: float
    n_entries: int
    worst_param: int
    worst_index: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def _evaluate(f):
    value = float(np.asarray(f().data).reshape(()))
    if not np.isfinite(value):
        raise NumericsError(f"non-finite function value {value}")
    return value


def finite_diff_check(f, params, h=1e-5, tol=1e-4):
    """Compare analytic grads of f() wrt params against central differences.

       f takes no arguments and must rebuild its graph from params on every call.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("non-finite function value at the base point")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = (0.0, -1, -1)
    n_entries = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _evaluate(f)
            flat[i] = orig - h
            f_minus = _evaluate(f)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[pi].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            n_entries += 1
            if err > worst[0] or worst[1] < 0:
                worst = (err, pi, i)
    for p in params:
        p.zero_grad()
    return GradCheckReport(max_rel_error=worst[0], n_entries=n_entries,
                           worst_param=worst[1], worst_index=worst[2], tol=tol)
