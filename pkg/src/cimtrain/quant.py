"""Fake quantization on globally shared ranges.

A :class:`Range` describes a real interval and a bit-width; :func:`make_grid`
turns it into a uniform grid of ``2**bits`` levels nudged so that 0 is one of
the levels. Every hidden layer bound to the same :class:`GlobalVariableSet`
quantizes its inputs, weights, biases and activations on the same four grids,
which is what lets one DAC/ADC design serve the whole network.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import RangeError
from .tensor import Tensor, as_tensor, make

RANGE_KINDS = ("X", "Y", "W", "B")


@dataclass
class Range:
    min: float
    max: float
    bits: int = 8
    trainable: bool = False
    # lower bound pinned (unipolar weights: W in [0, w1])
    fixed_min: bool = False

    def __post_init__(self):
        self.min = float(self.min)
        self.max = float(self.max)
        self.bits = int(self.bits)

    def to_dict(self):
        return {"min": self.min, "max": self.max, "bits": self.bits,
                "trainable": self.trainable, "fixed_min": self.fixed_min}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class QuantGrid:
    nudged_min: float
    nudged_max: float
    scale: float
    zero_point: int
    levels: int

    def values(self):
        """All representable values, in increasing order."""
        return (np.arange(self.levels) - self.zero_point) * self.scale

    def contains_zero(self):
        return 0 <= self.zero_point <= self.levels - 1


def make_grid(rng, bits=None):
    """Uniform ``2**bits``-level grid over ``rng`` with an exact zero level.

    ``scale = (max - min) / (2**bits - 1)``; the zero point is
    ``round(-min / scale)`` clamped to the level range and the interval is
    shifted so that ``-zero_point * scale`` is its lower end.
    """
    bits = rng.bits if bits is None else bits
    lo, hi = float(rng.min), float(rng.max)
    if not lo < hi:
        raise RangeError(f"degenerate quantization range [{lo}, {hi}]")
    if not 2 <= bits <= 8:
        raise RangeError(f"bit-width {bits} outside [2, 8]")
    n = 2 ** bits
    scale = (hi - lo) / (n - 1)
    z = int(np.clip(np.rint(-lo / scale), 0, n - 1))
    nmin = -z * scale
    return QuantGrid(nmin, (n - 1 - z) * scale, scale, z, n)


def quantize(values, grid):
    """Plain-array fake quantization. Returns ``(values, codes)``."""
    return kernels.fake_quant(values, grid.nudged_min, grid.nudged_max, grid.scale, grid.zero_point)


def fake_quant_ste(t, grid, lo=None, hi=None):
    """Fake-quantize ``t`` on ``grid`` with a straight-through gradient.

    Forward clamps to the nudged interval and rounds to the nearest level
    (ties to even). Backward passes the gradient unchanged inside the
    interval and blocks it outside.

    When ``lo``/``hi`` scalar tensors are given (trainable ranges), they
    receive the derivative of the output with the zero point and level
    indices held fixed: ``d q / d hi = codes / (n - 1)``, ``d q / d lo = -codes / (n - 1)``.
    """
    t = as_tensor(t)
    values, codes = quantize(t.data, grid)
    inside = (t.data >= grid.nudged_min) & (t.data <= grid.nudged_max)
    parents = [t]
    if lo is not None:
        parents += [lo, hi]
    n1 = grid.levels - 1

    def backward(g):
        gt = g * inside
        if lo is None:
            return (gt,)
        dhi = np.sum(g * codes) / n1
        return gt, np.asarray(-dhi), np.asarray(dhi)

    out = make(values, parents, backward, "fake_quant")
    out.qcodes = codes
    out.qscale = grid.scale
    return out


def alpha_blend_quant(t, grid, alpha, lo=None, hi=None):
    """``alpha * q(t) + (1 - alpha) * t`` with the gradients blended the same way."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    t = as_tensor(t)
    if alpha == 1.0:
        return fake_quant_ste(t, grid, lo, hi)
    if alpha == 0.0:
        return make(t.data.copy(), (t,), lambda g: (g,), "identity")
    q = fake_quant_ste(t, grid, lo, hi)
    data = alpha * q.data + (1.0 - alpha) * t.data
    inside = (t.data >= grid.nudged_min) & (t.data <= grid.nudged_max)
    codes = q.qcodes
    parents = [t] + ([lo, hi] if lo is not None else [])
    n1 = grid.levels - 1

    def backward(g):
        gt = g * (alpha * inside + (1.0 - alpha))
        if lo is None:
            return (gt,)
        dhi = alpha * np.sum(g * codes) / n1
        return gt, np.asarray(-dhi), np.asarray(dhi)

    return make(data, parents, backward, "alpha_blend")


def quant_linear(x, w, b=None):
    """Dense layer ``x @ w + b`` that stays exact on quantized operands.

    If both ``x`` and ``w`` come straight out of fake-quant nodes the product is
    formed on their integer codes and scaled once:
    ``(sx * sw) * (codes_x @ codes_w) + b``. Integer sums are exact in float64,
    so any other evaluation order of the same products (the crossbar's
    column currents) reproduces the result bit for bit. Otherwise this is the
    ordinary float product. Gradients are those of ``x @ w + b`` either way.
    """
    xd, wd = x.data, w.data
    if x.qcodes is not None and w.qcodes is not None:
        data = (x.qscale * w.qscale) * (x.qcodes @ w.qcodes)
    else:
        data = xd @ wd
    parents = [x, w]
    if b is not None:
        data = data + b.data
        parents.append(b)

    def backward(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make(data, parents, backward, "quant_linear")


def quant_conv2d(x, k, b=None, stride=1, padding="valid"):
    """Convolution counterpart of :func:`quant_linear` (NHWC, im2col)."""
    from .tensor import conv_output_hw, conv_padding, pad_nhwc

    n, h, w, c = x.shape
    kh, kw, c2, f = k.shape
    if c != c2:
        from .errors import DimensionError
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    pads = conv_padding(h, w, kh, kw, stride, padding)
    xpad = pad_nhwc(x.data, pads)
    cols = kernels.im2col(xpad, kh, kw, stride)
    kmat = k.data.reshape(-1, f)
    if x.qcodes is not None and k.qcodes is not None:
        ccols = kernels.im2col(pad_nhwc(x.qcodes, pads), kh, kw, stride)
        data = (x.qscale * k.qscale) * (ccols.T @ k.qcodes.reshape(-1, f))
    else:
        data = cols.T @ kmat
    parents = [x, k]
    if b is not None:
        data = data + b.data
        parents.append(b)
    data = data.reshape(n, ho, wo, f)
    hp, wp = xpad.shape[1:3]

    def backward(g):
        g2 = g.reshape(-1, f)
        dx = None
        if x.requires_grad:
            dxpad = kernels.col2im(kmat @ g2.T, n, hp, wp, c, kh, kw, stride)
            dx = dxpad[:, pads[0]:pads[0] + h, pads[2]:pads[2] + w, :]
        grads = [dx, (cols @ g2).reshape(k.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make(data, parents, backward, "quant_conv2d")


@dataclass
class GlobalVariableSet:
    """Shared quantization state for a group of layers.

    ``X``/``Y``/``W``/``B`` are the input, activation, weight and bias ranges.
    ``A_g`` are the two activation-mix logits, ``th_g`` the tanh shift,
    ``do_q`` gates every quant node bound to the set and ``alpha`` is the
    weight blending factor.
    """

    X: Range
    Y: Range
    W: Range
    B: Range
    A_g: Tensor = field(default_factory=lambda: Tensor([0.0, 0.0], requires_grad=True))
    th_g: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    do_q: int = 1
    alpha: float = 1.0
    name: str = "global"

    def __post_init__(self):
        self._range_tensors = {}
        self.validate()

    def validate(self):
        for kind in RANGE_KINDS:
            r = getattr(self, kind)
            if not r.min < r.max:
                raise RangeError(f"{self.name}.{kind}: min {r.min} >= max {r.max}")
        if self.W.fixed_min and self.W.min != 0.0:
            raise RangeError(f"{self.name}.W is pinned unipolar but min = {self.W.min}")
        if self.do_q not in (0, 1):
            raise ValueError(f"do_q must be 0 or 1, got {self.do_q}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    def range(self, kind):
        return getattr(self, kind)

    def grid(self, kind):
        return make_grid(getattr(self, kind))

    def range_tensors(self, kind):
        """``(lo, hi)`` scalar tensors for a trainable range, else ``(None, None)``."""
        r = getattr(self, kind)
        if not r.trainable:
            return None, None
        pair = self._range_tensors.get(kind)
        if pair is None:
            pair = (Tensor(r.min, requires_grad=not r.fixed_min, name=f"{self.name}.{kind}.min"),
                    Tensor(r.max, requires_grad=True, name=f"{self.name}.{kind}.max"))
            self._range_tensors[kind] = pair
        pair[0].data[...] = r.min
        pair[1].data[...] = r.max
        return pair

    def trainable_tensors(self):
        out = []
        for kind in RANGE_KINDS:
            lo, hi = self.range_tensors(kind)
            if lo is not None:
                out += [t for t in (lo, hi) if t.requires_grad]
        return out

    def sync_from_tensors(self):
        """Copy optimizer-updated range tensors back into the ranges."""
        for kind, (lo, hi) in self._range_tensors.items():
            r = getattr(self, kind)
            new_lo = 0.0 if r.fixed_min else float(lo.data)
            new_hi = float(hi.data)
            if new_hi - new_lo < 1e-6:
                new_hi = new_lo + 1e-6
            r.min, r.max = new_lo, new_hi

    def activation_weights(self):
        """``softmax(A_g)`` as a plain array."""
        a = self.A_g.data
        e = np.exp(a - np.max(a))
        return e / np.sum(e)

    def to_dict(self):
        d = {k: getattr(self, k).to_dict() for k in RANGE_KINDS}
        d.update(A_g=[float(v) for v in self.A_g.data], th_g=float(self.th_g.data),
                 do_q=int(self.do_q), alpha=float(self.alpha), name=self.name)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {k: Range.from_dict(d[k]) for k in RANGE_KINDS}
        return cls(A_g=Tensor(d.get("A_g", [0.0, 0.0]), requires_grad=True),
                   th_g=Tensor(d.get("th_g", 0.0), requires_grad=True),
                   do_q=int(d.get("do_q", 1)), alpha=float(d.get("alpha", 1.0)),
                   name=d.get("name", "global"), **kw)

    @classmethod
    def default(cls, bits_w=4, bits_x=4, bits_b=8, bits_y=None, unipolar=False, name="global"):
        bits_y = bits_x if bits_y is None else bits_y
        return cls(X=Range(-1.0, 1.0, bits_x), Y=Range(-1.0, 1.0, bits_y),
                   W=Range(0.0 if unipolar else -1.0, 1.0, bits_w, fixed_min=unipolar),
                   B=Range(-1.0, 1.0, bits_b), name=name)


@dataclass
class RangePolicy:
    """How non-trainable ranges follow the layer statistics.

    ``kind="ema"``: ``new = decay * old + (1 - decay) * envelope`` where the
    envelope is the min (max) over every bound layer. ``kind="gradient"``:
    ranges are optimizer-trained scalars and :func:`update_global_ranges`
    leaves them alone.
    """

    kind: str = "ema"
    decay: float = 0.99

    def __post_init__(self):
        if self.kind not in ("ema", "gradient"):
            raise ValueError(f"unknown range policy {self.kind!r}")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must be in [0, 1], got {self.decay}")


def tensor_stats(a):
    a = np.asarray(a)
    return {"min": float(a.min()), "max": float(a.max()),
            "mean": float(a.mean()), "std": float(a.std())}


def ema_range(rng, stats, decay):
    """EMA update of one range from the stats of every layer bound to it."""
    if not stats:
        raise ValueError("empty layer statistics")
    lo = min(s["min"] for s in stats)
    hi = max(s["max"] for s in stats)
    new_min = rng.min if rng.fixed_min else decay * rng.min + (1.0 - decay) * lo
    new_max = decay * rng.max + (1.0 - decay) * hi
    if new_max - new_min < 1e-6:
        new_max = new_min + 1e-6
    rng.min, rng.max = new_min, new_max
    return rng


def update_global_ranges(gvs, layer_stats, policy):
    """Recompute the non-differentiable ranges of ``gvs``.

    ``layer_stats`` maps a range kind (``"X"``, ``"Y"``, ``"W"``, ``"B"``) to
    the list of per-layer ``{min, max, mean, std}`` dicts gathered this step.
    Trainable ranges are skipped; so is everything under the gradient policy.
    """
    if not layer_stats or not any(layer_stats.values()):
        raise ValueError("empty layer statistics")
    if policy.kind == "gradient":
        return gvs
    for kind, stats in layer_stats.items():
        r = getattr(gvs, kind)
        if r.trainable or not stats:
            continue
        ema_range(r, stats, policy.decay)
    return gvs
