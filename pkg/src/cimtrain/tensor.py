"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operators the networks and losses of this package need are
provided. Broadcasting is limited to two cases: an operand holding a single
element, and a 1-D "bias row" matching the trailing axis of the other operand.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array that records the operations applied to it."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        # set by fake-quant nodes: integer level offsets and the grid scale
        self.qcodes = None
        self.qscale = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Run reverse-mode differentiation from this node.

        Leaf tensors with ``requires_grad`` accumulate into ``.grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a single-element output")
            grad = np.ones_like(self.data)
        Tape.from_output(self).run(self, np.asarray(grad, dtype=np.float64))

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


class Tape:
    """Topologically ordered list of the nodes reachable from an output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, out, grad):
        grads = {id(out): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward, op):
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one
    gradient (or None) per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _reduce_to(g, shape):
    """Undo the two supported broadcasts in a gradient."""
    if g.shape == shape:
        return g
    size = int(np.prod(shape)) if shape else 1
    if size == 1:
        return np.sum(g).reshape(shape)
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sb) == 1 and sa and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and sb and sb[-1] == sa[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(a):
    mask = a.data > 0
    return make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a):
    ad = a.data
    return make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def abs_(a):
    sign = np.sign(a.data)
    return make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sum_(a):
    shape = a.shape
    return make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    shape, n = a.shape, a.size
    return make(np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(a, shape):
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def take(a, index):
    """Select one element of a 1-D tensor as a 0-d tensor."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return make(a.data[index], (a,), backward, "take")


def softmax(a):
    """Softmax over a 1-D tensor."""
    e = np.exp(a.data - np.max(a.data))
    s = e / np.sum(e)
    return make(s, (a,), lambda g: (s * (g - np.dot(g, s)),), "softmax")


def softmax_crossentropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_crossentropy: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=1))
    logp = z - logsum[:, None]
    loss = -np.mean(logp[np.arange(n), labels])

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make(loss, (logits,), backward, "softmax_crossentropy")


def conv_padding(h, w, kh, kw, stride, padding):
    """Return ``(top, bottom, left, right)`` padding; 'same' splits like TF."""
    if padding == "valid":
        return 0, 0, 0, 0
    if padding != "same":
        raise ValueError(f"unknown padding {padding!r}")
    ho, wo = -(-h // stride), -(-w // stride)
    ph = max((ho - 1) * stride + kh - h, 0)
    pw = max((wo - 1) * stride + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def conv_output_hw(h, w, kh, kw, stride, padding):
    t, b, l, r = conv_padding(h, w, kh, kw, stride, padding)
    hp, wp = h + t + b, w + l + r
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def pad_nhwc(x, pads, value=0.0):
    t, b, l, r = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)), constant_values=value)


def conv2d(x, k, stride=1, padding="valid"):
    """NHWC cross-correlation with a ``(kh, kw, C, F)`` kernel via im2col."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[3] != k.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    n, h, w, c = x.shape
    kh, kw, _, f = k.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    pads = conv_padding(h, w, kh, kw, stride, padding)
    xpad = pad_nhwc(x.data, pads)
    cols = kernels.im2col(xpad, kh, kw, stride)
    kmat = k.data.reshape(kh * kw * c, f)
    out = (cols.T @ kmat).reshape(n, ho, wo, f)
    hp, wp = xpad.shape[1:3]

    def backward(g):
        g2 = g.reshape(-1, f)
        dk = (cols @ g2).reshape(k.shape)
        dx = None
        if x.requires_grad:
            dxpad = kernels.col2im(kmat @ g2.T, n, hp, wp, c, kh, kw, stride)
            dx = dxpad[:, pads[0]:pads[0] + h, pads[2]:pads[2] + w, :]
        return dx, dk

    return make(out, (x, k), backward, "conv2d")


def maxpool2d(x):
    """2x2 max pooling with stride 2 (trailing odd rows/columns are dropped)."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects NHWC input, got {x.shape}")
    out, arg = kernels.maxpool2x2(x.data)
    h, w = x.shape[1:3]
    return make(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, arg, h, w),), "maxpool2d")
