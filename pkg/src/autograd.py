# autograd.py - Tape-based reverse-mode differentiation over the tensor kernels
'''
A Tape records one TapeNode per differentiable op in execution order, so the
node list is topologically sorted by construction. Tape.backward walks it in
reverse, accumulating gradients additively into every input that needs one,
then writes parameter gradients into the ParamStore the tape was bound to.

Ops take Var inputs. A Var without a tape (tape=None) runs the forward kernel
only, which is how inference and finite-difference checks evaluate the net.
'''

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

import tensor
from tensor import ShapeError


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value, tape=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Var
    backward: Callable


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    '''Ordered registry: name -> (value, grad, Adam slots m and v).'''

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()
        self.populated = False

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        value = np.array(value, dtype=self.dtype)
        self._params[name] = Param(value, np.zeros_like(value), np.zeros_like(value),
                                   np.zeros_like(value))
        return value

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def value(self, name):
        return self._params[name].value

    def set_value(self, name, value):
        param = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != param.value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {param.value.shape}")
        param.value[...] = value

    def zero_grad(self):
        for param in self._params.values():
            param.grad.fill(0)
        self.populated = False

    def count(self, prefix=""):
        return sum(p.value.size for name, p in self._params.items() if name.startswith(prefix))

    def astype(self, dtype):
        out = ParamStore(dtype)
        for name, param in self._params.items():
            out.add(name, param.value)
        return out


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = OrderedDict()
        self.store = None
        self.consumed = False

    def constant(self, value):
        return Var(np.asarray(value), tape=self)

    def watch(self, value, name=None):
        return Var(np.asarray(value), tape=self, requires_grad=True, name=name)

    def param(self, store, name):
        if name in self.params:
            return self.params[name]
        if self.store is None:
            self.store = store
        elif self.store is not store:
            raise TapeError("a tape can only be bound to one ParamStore")
        var = Var(store.value(name), tape=self, requires_grad=True, name=name)
        self.params[name] = var
        return var

    def record(self, op, inputs, value, backward):
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        requires = any(i.requires_grad for i in inputs)
        out = Var(value, tape=self, requires_grad=requires)
        if requires:
            self.nodes.append(TapeNode(op, tuple(inputs), out, backward))
        return out

    def backward(self, loss):
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")

        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            grad = node.output.grad
            if grad is None:
                continue
            for inp, g in zip(node.inputs, node.backward(grad)):
                if g is not None and inp.requires_grad:
                    _accumulate(inp, g)

        if self.store is not None:
            self.store.zero_grad()
            for name, var in self.params.items():
                if var.grad is not None:
                    self.store[name].grad += var.grad
            self.store.populated = True

        self.nodes.clear()
        self.consumed = True


def backward(loss):
    if loss.tape is None:
        raise TapeError("loss has no tape; run the forward pass on a Tape")
    loss.tape.backward(loss)


def param(tape, store, name):
    if tape is None:
        return Var(store.value(name))
    return tape.param(store, name)


def lift(x):
    if isinstance(x, Var):
        return x
    # python scalars stay weakly typed so float32 graphs are not promoted
    return Var(x if isinstance(x, (int, float)) else np.asarray(x))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(var, grad):
    grad = _unbroadcast(np.asarray(grad), var.value.shape).astype(var.value.dtype, copy=False)
    var.grad = grad.copy() if var.grad is None else var.grad + grad


def _tape_of(inputs):
    tape = None
    for var in inputs:
        if var.tape is None:
            continue
        if tape is None:
            tape = var.tape
        elif var.tape is not tape:
            raise TapeError("op inputs come from different tapes")
    return tape


def _record(op, inputs, value, backward):
    tape = _tape_of(inputs)
    if tape is None:
        return Var(value)
    return tape.record(op, inputs, value, backward)


# ---------------------------------------------------------------- pointwise

def add(a, b):
    a, b = lift(a), lift(b)
    return _record("add", (a, b), tensor.add(a.value, b.value), lambda g: (g, g))


def sub(a, b):
    a, b = lift(a), lift(b)
    return _record("sub", (a, b), tensor.sub(a.value, b.value), lambda g: (g, -g))


def mul(a, b):
    a, b = lift(a), lift(b)
    return _record("mul", (a, b), tensor.mul(a.value, b.value),
                   lambda g: (g * b.value, g * a.value))


def div(a, b):
    a, b = lift(a), lift(b)
    value = tensor.check_finite(a.value / b.value, "div")
    return _record("div", (a, b), value,
                   lambda g: (g / b.value, -g * a.value / (b.value * b.value)))


def gelu(x):
    return _record("gelu", (x,), tensor.gelu(x.value), lambda g: (g * tensor.gelu_grad(x.value),))


def relu(x):
    return _record("relu", (x,), tensor.relu(x.value), lambda g: (g * (x.value > 0),))


def absolute(x):
    # subgradient 0 at the kink
    return _record("abs", (x,), np.abs(x.value), lambda g: (g * np.sign(x.value),))


def sum_(x):
    return _record("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.broadcast_to(g, x.value.shape),))


def mean(x):
    size = x.value.size
    return _record("mean", (x,), np.asarray(x.value.mean()),
                   lambda g: (np.broadcast_to(g / size, x.value.shape),))


# ---------------------------------------------------------------- structured ops

def conv2d(x, w, b, spec):
    inputs = (x, w) if b is None else (x, w, b)
    value = tensor.conv2d(x.value, w.value, None if b is None else b.value, spec)

    def backward(g):
        gx, gw, gb = tensor.conv2d_backward(g, x.value, w.value, spec,
                                            need_x=x.requires_grad, need_w=w.requires_grad)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record("conv2d", inputs, value, backward)


def matmul(a, b):
    return _record("matmul", (a, b), tensor.matmul(a.value, b.value),
                   lambda g: tensor.matmul_backward(g, a.value, b.value))


def transpose(x):
    return _record("transpose", (x,), np.swapaxes(x.value, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape):
    return _record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(x.value.shape),))


def softmax_lastdim(x, scale):
    scale = lift(scale)
    y = tensor.softmax_lastdim(x.value, scale.value)

    def backward(g):
        gx, gscale = tensor.softmax_backward(g, y, x.value, scale.value)
        if not scale.requires_grad:
            return gx, None
        return gx, np.reshape(gscale, np.shape(scale.value))

    return _record("softmax_lastdim", (x, scale), y, backward)


def layer_norm_channels(x, gamma, beta, eps=tensor.LN_EPS):
    value = tensor.layer_norm_channels(x.value, gamma.value, beta.value, eps)
    return _record("layer_norm_channels", (x, gamma, beta), value,
                   lambda g: tensor.layer_norm_backward(g, x.value, gamma.value, eps))


def adaptive_avg_pool(x, out_hw=(1, 1)):
    return _record("adaptive_avg_pool", (x,), tensor.adaptive_avg_pool(x.value, out_hw),
                   lambda g: (tensor.adaptive_avg_pool_backward(g, x.value.shape),))


def pixel_unshuffle(x, r):
    return _record("pixel_unshuffle", (x,), tensor.pixel_unshuffle(x.value, r),
                   lambda g: (tensor.pixel_shuffle(g, r),))


def pixel_shuffle(x, r):
    return _record("pixel_shuffle", (x,), tensor.pixel_shuffle(x.value, r),
                   lambda g: (tensor.pixel_unshuffle(g, r),))


def concat_channels(xs):
    xs = tuple(xs)
    sizes = [x.value.shape[1] for x in xs]
    return _record("concat_channels", xs, tensor.concat_channels([x.value for x in xs]),
                   lambda g: tuple(tensor.split_channels(g, sizes)))


def slice_channels(x, start, stop):
    def backward(g):
        gx = np.zeros_like(x.value)
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice_channels", (x,), np.ascontiguousarray(x.value[:, start:stop]), backward)


def split_channels(x, sizes):
    if sum(sizes) != x.value.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.value.shape[1]} channels")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_channels(x, start, start + size))
        start += size
    return parts


def crop(x, h, w):
    if x.value.shape[2] == h and x.value.shape[3] == w:
        return x

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[:, :, :h, :w] = g
        return (gx,)

    return _record("crop", (x,), np.ascontiguousarray(x.value[:, :, :h, :w]), backward)
