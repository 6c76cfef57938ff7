"""Mapping quantized networks onto NVM crossbar tiles and simulating inference.

Inputs are encoded as row voltages by a DAC, weights as conductances, each
bitline accumulates ``sum(v * g)`` plus a bias current and an ADC turns the
column current back into an activation.

Scale factors are carried symbolically. Voltages are multiples of the DAC
step ``v_unit`` and conductances multiples of the device step ``g_unit``
above ``g_off``; the simulation accumulates in those units and only the
reported physical currents are multiplied out. With an ideal device the
accumulated unit currents are exact integers, so the analog path reproduces
the integer-code products of the digital quantized forward bit for bit. The
``g_off`` baseline current never enters the unit domain, which is the same
as subtracting it digitally.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import DeploymentError, MappingError
from .nn import apply_activation
from .quant import GlobalVariableSet, make_grid, quantize


@dataclass
class DeviceModel:
    g_off: float = 0.0
    g_on: float = 100e-6
    conductance_bits: int = 8
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.g_off < self.g_on:
            raise ValueError(f"need 0 <= g_off < g_on, got {self.g_off}, {self.g_on}")
        if not 2 <= self.conductance_bits <= 8:
            raise ValueError(f"conductance_bits {self.conductance_bits} outside [2, 8]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def max_index(self):
        return 2 ** self.conductance_bits - 1

    @property
    def g_unit(self):
        return (self.g_on - self.g_off) / self.max_index

    def snap(self, g):
        k = np.clip(np.rint((np.asarray(g) - self.g_off) / self.g_unit), 0, self.max_index)
        return self.g_off + k * self.g_unit


def weight_to_conductance(w, w_range, dev, scheme="unipolar", snap=True):
    """Conductance for weight ``w``; ``w_range.max`` is the full-scale weight ``w1``.

    Unipolar returns one conductance, bipolar a ``(g_pos, g_neg)`` pair with the
    unused side at ``g_off``.
    """
    w1 = float(w_range.max)
    tol = 1e-12 * max(1.0, abs(w1))

    def f(mag):
        g = dev.g_off + mag / w1 * (dev.g_on - dev.g_off)
        return float(dev.snap(g)) if snap else g

    if scheme == "unipolar":
        if w < -tol or w > w1 + tol:
            raise MappingError(f"weight {w} outside unipolar range [0, {w1}]")
        return f(max(w, 0.0))
    if scheme == "bipolar":
        if abs(w) > w1 + tol:
            raise MappingError(f"weight {w} outside bipolar range [-{w1}, {w1}]")
        return (f(w), dev.g_off) if w >= 0 else (dev.g_off, f(-w))
    raise ValueError(f"unknown scheme {scheme!r}")


def dac_encode(x, x_range, dac_bits, v_max=1.0):
    """Quantize ``x`` on the input grid and return the row voltage."""
    grid = make_grid(x_range, dac_bits)
    _, codes = quantize(np.asarray(x, dtype=np.float64), grid)
    return (codes + grid.zero_point) * (v_max / (grid.levels - 1))


@dataclass
class Tile:
    """One crossbar block.

    ``G`` holds conductances in device steps above ``g_off``. ``pos_cols`` and
    ``neg_cols`` list, per logical output, the physical column(s) it reads
    (``-1`` for no negative column); ``outputs`` gives the layer output index of
    each logical output. ``bias`` is a per-column current in unit currents.
    """

    rows: int
    cols: int
    G: np.ndarray
    g_off: float
    g_unit: float
    pos_cols: np.ndarray
    neg_cols: np.ndarray
    outputs: np.ndarray
    bias: np.ndarray
    layer: str = ""
    block: tuple = (0, 0)
    row_span: tuple = (0, 0)
    v_unit: float = 1.0

    @property
    def scheme(self):
        paired = self.neg_cols >= 0
        if paired.all():
            return "bipolar_paired"
        if not paired.any():
            return "unipolar"
        return "mixed"

    @property
    def used_columns(self):
        return int(len(self.pos_cols) + np.count_nonzero(self.neg_cols >= 0))

    @property
    def subtractors(self):
        return int(np.count_nonzero(self.neg_cols >= 0))

    def conductances(self):
        """Physical conductance matrix in siemens."""
        return self.g_off + self.G * self.g_unit

    def bias_currents(self):
        """Per-column bias in amperes."""
        return self.bias * (self.v_unit * self.g_unit)

    @classmethod
    def from_conductances(cls, g, dev, pairs=None, bias=None):
        """Tile from a physical conductance matrix (voltages in volts, ``bias``
        in amperes). ``pairs`` is a list of ``(pos, neg)`` column pairs;
        without it every column is unipolar."""
        g = np.asarray(g, dtype=np.float64)
        rows, cols = g.shape
        if pairs is None:
            pos, neg = np.arange(cols), np.full(cols, -1)
        else:
            pos = np.array([p for p, _ in pairs])
            neg = np.array([n for _, n in pairs])
        b = np.zeros(cols) if bias is None else np.asarray(bias, float) / dev.g_unit
        return cls(rows, cols, (g - dev.g_off) / dev.g_unit, dev.g_off, dev.g_unit, pos, neg,
                   np.arange(len(pos)), b)


def tile_mac(tile, v):
    """Physical currents of every logical output for row voltages ``v``.

    Each column carries ``sum(v * g) + bias``; paired columns are subtracted
    (``i_pos - i_neg``). ``v`` may be a vector or a batch of row vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != tile.rows:
        raise ValueError(f"expected {tile.rows} row voltages, got {v.shape[-1]}")
    i = v @ tile.conductances() + tile.bias_currents()
    return _combine(tile, i)


def tile_mac_units(tile, vcodes):
    """Column sums in unit currents (``v_unit * g_unit``), ``g_off`` excluded."""
    return _combine(tile, vcodes @ tile.G + tile.bias)


def _combine(tile, i):
    out = i[..., tile.pos_cols]
    paired = tile.neg_cols >= 0
    if paired.any():
        out = out.copy()
        out[..., paired] = out[..., paired] - i[..., tile.neg_cols[paired]]
    return out


def column_layout(unipolar_mask):
    """Physical column plan for a layer: bipolar pairs first, then single
    unipolar columns, so that with an even tile width no pair straddles two
    tiles. Returns ``(pos, neg, outputs)`` over the flattened column space."""
    unipolar_mask = np.asarray(unipolar_mask, dtype=bool)
    bip = np.flatnonzero(~unipolar_mask)
    uni = np.flatnonzero(unipolar_mask)
    pos = np.concatenate([2 * np.arange(len(bip)), 2 * len(bip) + np.arange(len(uni))])
    neg = np.concatenate([2 * np.arange(len(bip)) + 1, np.full(len(uni), -1)])
    outputs = np.concatenate([bip, uni])
    return pos.astype(int), neg.astype(int), outputs.astype(int)


def tile_count(rows, outputs, tile_shape=(128, 128), unipolar=0):
    """Tiles needed for a ``rows x outputs`` matrix with ``unipolar`` single-column outputs."""
    r, c = tile_shape
    if r <= 0 or c <= 0:
        raise ValueError(f"tile shape must be positive, got {tile_shape}")
    ncols = unipolar + 2 * (outputs - unipolar)
    return math.ceil(rows / r) * math.ceil(ncols / c)


def partition_layer(codes, unipolar_mask, tile_shape=(128, 128), dev=None, ratio=1,
                    x_zero_point=0, layer="", v_unit=1.0):
    """Split a ``rows x F`` matrix of signed weight codes into tiles.

    Code ``m`` becomes ``|m| * ratio`` device steps on the positive column
    (``m > 0``) or the negative column of its pair. Unipolar outputs use a
    single column and must have no negative codes. The input zero-point
    correction ``-x_zero_point * ratio * sum_k m_k`` is placed on the bias of
    the first row block. Unused rows and columns stay at ``g_off``.
    """
    r, c = tile_shape
    if r <= 0 or c <= 0:
        raise ValueError(f"tile shape must be positive, got {tile_shape}")
    dev = dev or DeviceModel()
    codes = np.asarray(codes, dtype=np.float64)
    rows, f = codes.shape
    unipolar_mask = np.asarray(unipolar_mask, dtype=bool)
    if np.any(codes[:, unipolar_mask] < 0):
        raise MappingError(f"{layer}: negative weights in unipolar channels")
    pos, neg, outputs = column_layout(unipolar_mask)
    ncols = int(len(pos) + np.count_nonzero(neg >= 0))
    if c % 2 and np.any(neg >= 0):
        raise MappingError(f"{layer}: column pairs need an even tile width, got {c}")
    full = np.zeros((rows, ncols))
    m = codes[:, outputs] * ratio
    full[:, pos] = np.maximum(m, 0.0)
    has_neg = neg >= 0
    full[:, neg[has_neg]] = np.maximum(-m[:, has_neg], 0.0)
    colbias = np.zeros(ncols)
    colbias[pos] = -x_zero_point * ratio * codes[:, outputs].sum(axis=0)

    tiles = []
    for bi, r0 in enumerate(range(0, rows, r)):
        r1 = min(r0 + r, rows)
        for bj, c0 in enumerate(range(0, ncols, c)):
            c1 = min(c0 + c, ncols)
            G = np.zeros((r, c))
            G[:r1 - r0, :c1 - c0] = full[r0:r1, c0:c1]
            sel = (pos >= c0) & (pos < c1)
            tneg = neg[sel]
            tneg = np.where(tneg >= 0, tneg - c0, -1)
            bias = np.zeros(c)
            if bi == 0:
                bias[:c1 - c0] = colbias[c0:c1]
            tiles.append(Tile(r, c, G, dev.g_off, dev.g_unit, pos[sel] - c0, tneg, outputs[sel],
                              bias, layer, (bi, bj), (r0, r1), v_unit))
    return tiles


def perturb(tiles, dev, rng):
    """Programming noise: ``g -> g * (1 + sigma * N(0, 1))`` clipped to the device range."""
    for t in tiles:
        g = t.conductances()
        g = g * (1.0 + dev.noise_sigma * rng.standard_normal(g.shape))
        g = np.clip(g, dev.g_off, dev.g_on)
        t.G = (g - dev.g_off) / dev.g_unit
    return tiles


@dataclass
class LayerDeployment:
    index: int
    name: str
    kind: str
    tiles: list
    n_outputs: int
    rows: int
    ratio: float
    exact: bool
    dac: dict
    adc: dict
    scale: float
    bias: np.ndarray
    kernel: int = 0
    stride: int = 1
    padding: str = "valid"
    hidden: bool = True


@dataclass
class CrossbarDeployment:
    input_shape: tuple
    plan: list
    layers: list
    device: DeviceModel
    tile_shape: tuple
    activation_set: GlobalVariableSet
    reconfigurable: bool
    v_max: float = 1.0
    notes: list = field(default_factory=list)

    @property
    def tiles(self):
        return [t for l in self.layers for t in l.tiles]

    @property
    def exact(self):
        return all(l.exact for l in self.layers)

    def component_counts(self):
        """Crossbars, DACs, ADCs and current subtractors of this deployment.

        Reconfigurable: one bank of ``R`` DACs and ``C`` ADCs shared by the
        hidden layers plus ``C`` full-custom ADCs for the output layer.
        Otherwise every layer gets a DAC per input row and an ADC per output.
        A subtractor sits in front of every ADC that reads a column pair.
        """
        r, c = self.tile_shape
        hidden = [l for l in self.layers if l.hidden]
        out = [l for l in self.layers if not l.hidden]
        has_pairs = lambda l: any(t.subtractors for t in l.tiles)
        if self.reconfigurable:
            dacs = r
            adcs = c * ((1 if hidden else 0) + len(out))
            subs = c * ((1 if any(has_pairs(l) for l in hidden) else 0)
                        + sum(1 for l in out if has_pairs(l)))
        else:
            dacs = sum(l.rows for l in self.layers)
            adcs = sum(l.n_outputs for l in self.layers)
            subs = sum(sum(t.subtractors for t in l.tiles) for l in self.layers)
        return {"crossbars": len(self.tiles), "dacs": int(dacs), "adcs": int(adcs),
                "subtractors": int(subs)}

    def to_manifest(self):
        return {
            "input_shape": list(self.input_shape),
            "tile_shape": list(self.tile_shape),
            "device": {"g_off": self.device.g_off, "g_on": self.device.g_on,
                       "conductance_bits": self.device.conductance_bits,
                       "noise_sigma": self.device.noise_sigma},
            "reconfigurable": self.reconfigurable,
            "exact_mapping": self.exact,
            "counts": self.component_counts(),
            "layers": [{
                "name": l.name, "kind": l.kind, "hidden": l.hidden, "rows": l.rows,
                "outputs": l.n_outputs, "dac": l.dac, "adc": l.adc,
                "tiles": [{"block": list(t.block), "scheme": t.scheme,
                           "used_rows": t.row_span[1] - t.row_span[0],
                           "used_columns": t.used_columns, "subtractors": t.subtractors}
                          for t in l.tiles],
            } for l in self.layers],
            "notes": list(self.notes),
        }

    def write_manifest(self, path):
        with open(path, "w") as f:
            json.dump(self.to_manifest(), f, indent=2)


def _grid_dict(grid, bits):
    return {"bits": bits, "min": grid.nudged_min, "max": grid.nudged_max,
            "scale": grid.scale, "zero_point": grid.zero_point}


def build_deployment(net, dev=None, tile_shape=(128, 128), seed=0, v_max=1.0):
    """Map a quantized network onto tiles.

    Weights are taken fully quantized (alpha = 1). Each weight code step is
    mapped to ``ratio`` device steps with ``ratio = floor(max_index / M)`` for
    the largest code magnitude ``M`` of the layer's grid; the mapping is exact
    whenever ``M`` fits in the device range.
    """
    dev = dev or DeviceModel()
    plan, layers = [], []
    hidden = set(net.hidden_indices())
    for i, spec in enumerate(net.layers):
        if spec.kind in ("maxpool", "flatten"):
            plan.append((spec.kind, None))
            continue
        if spec.kind == "activation":
            continue
        s = net.set_for(i)
        gx, gw, gb, gy = (s.grid(k) for k in ("X", "W", "B", "Y"))
        _, wcodes = quantize(net.weight(i).data, gw)
        bq, _ = quantize(net.bias(i).data, gb)
        mmax = max(gw.zero_point, gw.levels - 1 - gw.zero_point)
        exact = mmax <= dev.max_index
        ratio = dev.max_index // mmax if exact else dev.max_index / mmax
        mat = wcodes.reshape(-1, spec.out_channels)
        tiles = partition_layer(mat, spec.channel_mask(), tile_shape, dev, ratio, gx.zero_point,
                                spec.name, v_max / (gx.levels - 1))
        act = net.activation_after(i)
        layers.append(LayerDeployment(
            index=i, name=spec.name, kind=spec.kind, tiles=tiles, n_outputs=spec.out_channels,
            rows=mat.shape[0], ratio=ratio, exact=exact,
            dac=_grid_dict(gx, s.X.bits),
            adc=dict(_grid_dict(gy, s.Y.bits), activation=act.fn if act else "none"),
            scale=gx.scale * gw.scale, bias=bq, kernel=spec.kernel, stride=spec.stride,
            padding=spec.padding, hidden=i in hidden))
        plan.append(("layer", len(layers) - 1))
    hid = [l for l in layers if l.hidden]
    reconfigurable = (len({json.dumps(l.dac, sort_keys=True) for l in hid}) <= 1
                      and len({json.dumps(l.adc, sort_keys=True) for l in hid}) <= 1)
    dep = CrossbarDeployment(net.input_shape, plan, layers, dev, tuple(tile_shape),
                             GlobalVariableSet.from_dict(net.gvs.to_dict()), reconfigurable, v_max)
    if not dep.exact:
        dep.notes.append("device has fewer conductance levels than the weight grid; mapping is lossy")
    if dev.noise_sigma > 0:
        perturb(dep.tiles, dev, np.random.default_rng(seed))
    return dep


def _layer_currents(ldep, vcodes):
    """Accumulate unit currents over all tiles of a layer (``P x F``)."""
    out = np.zeros((vcodes.shape[0], ldep.n_outputs))
    r = ldep.tiles[0].rows
    for t in ldep.tiles:
        r0, r1 = t.row_span
        v = np.zeros((vcodes.shape[0], r))
        v[:, :r1 - r0] = vcodes[:, r0:r1]
        out[:, t.outputs] += tile_mac_units(t, v)
    return out


def crossbar_infer(dep, x):
    """Logits of the deployed network for a batch ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(dep.input_shape):
        raise DeploymentError(f"input shape {x.shape[1:]} does not match deployment {dep.input_shape}")
    h = x
    for op, j in dep.plan:
        if op == "flatten":
            h = h.reshape(h.shape[0], -1)
            continue
        if op == "maxpool":
            h, _ = kernels.maxpool2x2(h)
            continue
        l = dep.layers[j]
        dac = l.dac
        grid = make_grid_from(dac)
        _, codes = quantize(h, grid)
        level = codes + grid.zero_point
        if l.kind == "conv2d":
            if h.ndim != 4:
                raise DeploymentError(f"{l.name}: conv layer got input of shape {h.shape}")
            n, hh, ww, _ = h.shape
            pads = T.conv_padding(hh, ww, l.kernel, l.kernel, l.stride, l.padding)
            lp = T.pad_nhwc(level, pads, value=float(grid.zero_point))
            vcodes = kernels.im2col(lp, l.kernel, l.kernel, l.stride).T
            ho, wo = T.conv_output_hw(hh, ww, l.kernel, l.kernel, l.stride, l.padding)
        else:
            if h.ndim != 2:
                raise DeploymentError(f"{l.name}: dense layer got input of shape {h.shape}")
            vcodes = level
        if vcodes.shape[1] != l.rows:
            raise DeploymentError(f"{l.name}: {vcodes.shape[1]} inputs for {l.rows} crossbar rows")
        counts = _layer_currents(l, vcodes) / l.ratio
        pre = l.scale * counts + l.bias
        if l.kind == "conv2d":
            pre = pre.reshape(n, ho, wo, l.n_outputs)
        with T.no_grad():
            act = apply_activation(T.Tensor(pre), l.adc["activation"], dep.activation_set).data
        h, _ = quantize(act, make_grid_from(l.adc))
    return h


def make_grid_from(cfg):
    """Rebuild a grid from a DAC/ADC config dict."""
    from .quant import QuantGrid
    return QuantGrid(cfg["min"], cfg["max"], cfg["scale"], cfg["zero_point"], 2 ** cfg["bits"])


def digital_reference(net, x):
    """Quantized digital forward used as the exactness oracle."""
    from .nn import predict
    return predict(net, x, mode="quantized")


def verify_exact(dep, net, x):
    """True when the deployment reproduces the digital quantized forward exactly."""
    return bool(np.array_equal(crossbar_infer(dep, x), digital_reference(net, x)))
