"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass registered by name in
`KERNELS`. Applying a function computes its value with numpy and, when a `Tape`
is active and an input requires gradients, appends a record to that tape.
`Tape.backward` walks the records in reverse and returns one gradient array per
leaf tensor that requires gradients.

Outside of a tape nothing is recorded, which is how evaluation runs.
"""
import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ContractError, DimensionError, InvalidMaskError

logger = logging.getLogger(__name__)

_local = threading.local()

KERNELS = {}


def default_dtype():
    return getattr(_local, 'dtype', np.float32)


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (gradient checks)."""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


def _tapes():
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def active_tape():
    tapes = _tapes()
    return tapes[-1] if tapes else None


@dataclass(frozen=True)
class Node:
    tape: 'Tape'
    index: int


class Tensor:
    """A dense float array that can take part in gradient recording."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice_tensor(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Context:
    """Scratch space a forward rule fills for its backward rule."""


class Function:
    name = None

    @staticmethod
    def forward(ctx, *arrays, **options):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **options):
        tensors = [as_tensor(x) for x in inputs]
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **options)
        result = Tensor(out, dtype=out.dtype)
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            tape.record(cls, ctx, tensors, result)
        return result


def register(name):
    def decorator(cls):
        cls.name = name
        KERNELS[name] = cls
        return cls
    return decorator


class Record(NamedTuple):
    function: type
    ctx: Context
    inputs: list
    output: Tensor


class Tape:
    """
    Ordered log of the operations applied while the tape is active.

    Use as a context manager; tapes nest and are local to the creating thread.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc_info):
        _tapes().pop()
        return False

    def record(self, function, ctx, inputs, output):
        output.node = Node(self, len(self.records))
        self.records.append(Record(function, ctx, inputs, output))

    def owns(self, tensor):
        return tensor.node is not None and tensor.node.tape is self

    def leaves(self):
        seen = {}
        for record in self.records:
            for tensor in record.inputs:
                if tensor.requires_grad and not self.owns(tensor):
                    seen[id(tensor)] = tensor
        return list(seen.values())

    def backward(self, loss):
        """Return a map from every requires_grad leaf to d(loss)/d(leaf)."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise ContractError("loss was not recorded on this tape")

        pending = {loss.node.index: np.ones_like(loss.data)}
        grads = {}
        for index in range(loss.node.index, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            record = self.records[index]
            input_grads = record.function.backward(record.ctx, grad)
            for tensor, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = _reduce_to_shape(input_grad, tensor.shape)
                if self.owns(tensor):
                    slot = tensor.node.index
                    pending[slot] = pending[slot] + input_grad if slot in pending else input_grad
                else:
                    grads[tensor] = grads[tensor] + input_grad if tensor in grads else input_grad

        for leaf in self.leaves():
            if leaf not in grads:
                grads[leaf] = np.zeros_like(leaf.data)
        return grads


def backward(loss):
    """Differentiate a scalar loss through the tape that recorded it."""
    if loss.node is None:
        raise ContractError("loss is not on an active tape")
    return loss.node.tape.backward(loss)


def _reduce_to_shape(grad, shape):
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@register('add')
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('add', a, b)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


@register('sub')
class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('sub', a, b)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


@register('mul')
class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('mul', a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.b, grad * ctx.a


@register('div')
class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('div', a, b)
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, grad):
        return grad / ctx.b, -grad * ctx.a / (ctx.b * ctx.b)


@register('scale')
class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor=1.0):
        ctx.factor = factor
        return a * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.factor,)


@register('matmul')
class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError('matmul', a.shape, b.shape)
        ctx.a, ctx.b = a, b
        try:
            return np.matmul(a, b)
        except ValueError:
            raise DimensionError('matmul', a.shape, b.shape) from None

    @staticmethod
    def backward(ctx, grad):
        grad_a = np.matmul(grad, np.swapaxes(ctx.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(ctx.a, -1, -2), grad)
        return grad_a, grad_b


@register('relu')
class ReLU(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.active = a > 0
        return np.where(ctx.active, a, 0).astype(a.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.active,)


@register('sigmoid')
class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        # tanh form stays finite for large |a|
        ctx.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out * (1.0 - ctx.out),)


@register('softmax')
class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1, mask=None):
        if mask is not None:
            try:
                mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            except ValueError:
                raise DimensionError('softmax', x.shape, np.shape(mask)) from None
            if not mask.any(axis=axis).all():
                raise InvalidMaskError("softmax row has every entry masked")
            x = np.where(mask, x, -np.inf)
        shifted = x - x.max(axis=axis, keepdims=True)
        exps = np.exp(shifted)
        out = exps / exps.sum(axis=axis, keepdims=True)
        ctx.out, ctx.axis = out, axis
        return out

    @staticmethod
    def backward(ctx, grad):
        out = ctx.out
        return (out * (grad - (grad * out).sum(axis=ctx.axis, keepdims=True)),)


@register('layer_norm')
class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        width = x.shape[-1]
        if gamma.shape != (width,) or beta.shape != (width,):
            raise DimensionError('layer_norm', x.shape, gamma.shape, beta.shape)
        if eps <= 0:
            raise ContractError(f"layer_norm eps must be positive, got {eps}")
        centered = x - x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        normed = centered * inv_std
        ctx.normed, ctx.inv_std, ctx.gamma = normed, inv_std, gamma
        return normed * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        normed, inv_std = ctx.normed, ctx.inv_std
        width = normed.shape[-1]
        d_normed = grad * ctx.gamma
        d_x = inv_std / width * (
            width * d_normed
            - d_normed.sum(axis=-1, keepdims=True)
            - normed * (d_normed * normed).sum(axis=-1, keepdims=True)
        )
        return d_x, grad * normed, grad


@register('concat')
class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise DimensionError('concat', *(a.shape for a in arrays)) from None
        ctx.axis = axis
        ctx.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx.splits, axis=ctx.axis))


@register('slice')
class Slice(Function):
    @staticmethod
    def forward(ctx, x, index=()):
        ctx.shape, ctx.dtype, ctx.index = x.shape, x.dtype, index
        return np.array(x[index])

    @staticmethod
    def backward(ctx, grad):
        full = np.zeros(ctx.shape, dtype=ctx.dtype)
        np.add.at(full, ctx.index, grad)
        return (full,)


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape).copy()


@register('sum')
class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        return (_expand_reduced(grad, ctx.shape, ctx.axis, ctx.keepdims),)


@register('mean')
class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        ctx.count = x.size // max(out.size, 1)
        return out

    @staticmethod
    def backward(ctx, grad):
        return (_expand_reduced(grad, ctx.shape, ctx.axis, ctx.keepdims) / ctx.count,)


@register('reshape')
class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError('reshape', x.shape, shape) from None

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


@register('transpose')
class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        ctx.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, grad):
        return (np.transpose(grad, ctx.inverse),)


@register('embedding_lookup')
class EmbeddingLookup(Function):
    @staticmethod
    def forward(ctx, table, ids=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ContractError(f"token id out of range for a table of {table.shape[0]} rows")
        ctx.ids, ctx.shape, ctx.dtype = ids, table.shape, table.dtype
        return table[ids]

    @staticmethod
    def backward(ctx, grad):
        table_grad = np.zeros(ctx.shape, dtype=ctx.dtype)
        np.add.at(table_grad, ctx.ids, grad)
        return (table_grad,)


@register('dropout')
class Dropout(Function):
    @staticmethod
    def forward(ctx, x, p=0.0, rng=None):
        keep = rng.random(x.shape) >= p
        ctx.scale = (keep / (1.0 - p)).astype(x.dtype)
        return x * ctx.scale

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.scale,)


@register('maximum')
class Maximum(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('maximum', a, b)
        ctx.first = a >= b
        return np.maximum(a, b)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.first, grad * ~ctx.first


@register('minimum')
class Minimum(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('minimum', a, b)
        ctx.first = a <= b
        return np.minimum(a, b)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.first, grad * ~ctx.first


@register('masked_max')
class MaskedMax(Function):
    @staticmethod
    def forward(ctx, x, mask=None, axis=1):
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise InvalidMaskError("max pooling over a fully masked token set")
        filled = np.where(mask, x, -np.inf)
        ctx.argmax = np.expand_dims(filled.argmax(axis=axis), axis)
        ctx.shape, ctx.dtype, ctx.axis = x.shape, x.dtype, axis
        return np.take_along_axis(x, ctx.argmax, axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, grad):
        full = np.zeros(ctx.shape, dtype=ctx.dtype)
        np.put_along_axis(full, ctx.argmax, np.expand_dims(grad, ctx.axis), axis=ctx.axis)
        return (full,)


@register('smooth_l1')
class SmoothL1(Function):
    @staticmethod
    def forward(ctx, diff, beta=1.0):
        magnitude = np.abs(diff)
        ctx.quadratic = magnitude < beta
        ctx.diff, ctx.beta = diff, beta
        return np.where(ctx.quadratic, 0.5 * diff * diff / beta, magnitude - 0.5 * beta)

    @staticmethod
    def backward(ctx, grad):
        slope = np.where(ctx.quadratic, ctx.diff / ctx.beta, np.sign(ctx.diff))
        return (grad * slope,)


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def scale(a, factor):
    return Scale.apply(a, factor=float(factor))


def matmul(a, b):
    return MatMul.apply(a, b)


def relu(a):
    return ReLU.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def _mask_array(mask):
    if mask is None:
        return None
    return mask.data.astype(bool) if isinstance(mask, Tensor) else np.asarray(mask, dtype=bool)


def softmax(x, axis=-1, mask=None):
    """Softmax along `axis`; entries where `mask` is False get exactly zero weight."""
    return Softmax.apply(x, axis=axis, mask=_mask_array(mask))


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def slice_tensor(x, index):
    return Slice.apply(x, index=index)


def reduce_sum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims=False):
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=tuple(axes) if axes else None)


def embedding_lookup(table, ids):
    return EmbeddingLookup.apply(table, ids=ids)


def dropout(x, p, train, rng=None):
    """Inverted dropout; the identity (same tensor) outside training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit random generator")
    return Dropout.apply(x, p=p, rng=rng)


def maximum(a, b):
    return Maximum.apply(a, b)


def minimum(a, b):
    return Minimum.apply(a, b)


def masked_max(x, mask, axis=1):
    return MaskedMax.apply(x, mask=_mask_array(mask), axis=axis)


def smooth_l1(diff, beta=1.0):
    return SmoothL1.apply(diff, beta=float(beta))
