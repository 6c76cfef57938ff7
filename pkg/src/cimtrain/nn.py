"""Layer specifications, the parameter store and the reference networks."""
import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import tensor as T
from .errors import DimensionError, FormatError
from .quant import (GlobalVariableSet, Range, alpha_blend_quant, fake_quant_ste,
                    make_grid, quant_conv2d, quant_linear, tensor_stats)

TRAINABLE = ("conv2d", "dense", "output")
KINDS = TRAINABLE + ("maxpool", "flatten", "activation")
ACTIVATIONS = ("relu", "shifted_tanh", "mix", "none")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    filters: int = 0          # conv2d output channels
    kernel: int = 0           # conv2d square kernel size
    stride: int = 1
    padding: str = "same"
    units: int = 0            # dense/output width
    fn: str = "relu"          # activation layers
    quant_binding: str = "global"
    polarity: str = "bipolar"
    fraction: float = 0.0     # unipolar share of output channels, polarity == "fractional"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fn!r}")
        if self.polarity not in ("bipolar", "unipolar", "fractional"):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.kind == "output":
            self.quant_binding = "output"

    @property
    def trainable(self):
        return self.kind in TRAINABLE

    @property
    def out_channels(self):
        return self.filters if self.kind == "conv2d" else self.units

    def unipolar_channels(self):
        """Number of output channels constrained to non-negative weights."""
        if self.polarity == "unipolar":
            return self.out_channels
        if self.polarity == "fractional":
            return int(np.floor(self.fraction * self.out_channels + 0.5))
        return 0

    def channel_mask(self):
        """Boolean mask over output channels; the first ones are unipolar."""
        m = np.zeros(self.out_channels, dtype=bool)
        m[:self.unipolar_channels()] = True
        return m

    def to_dict(self):
        d = asdict(self)
        keep = {"kind", "name"}
        if self.kind == "conv2d":
            keep |= {"filters", "kernel", "stride", "padding"}
        if self.kind in ("dense", "output"):
            keep |= {"units"}
        if self.kind == "activation":
            keep |= {"fn"}
        if self.trainable:
            keep |= {"quant_binding", "polarity"}
            if self.polarity == "fractional":
                keep.add("fraction")
        return {k: v for k, v in d.items() if k in keep}


class ParameterStore(dict):
    """Named parameter tensors; each name is registered once."""

    def register(self, name, data):
        if name in self:
            raise KeyError(f"parameter {name!r} registered twice")
        self[name] = T.Tensor(data, requires_grad=True, name=name)
        return self[name]

    def count(self):
        return int(sum(t.size for t in self.values()))

    def to_npz(self, path):
        np.savez(path, **{k: v.data for k, v in self.items()})

    def load_npz(self, path):
        with np.load(path) as f:
            for k in self:
                if k not in f:
                    raise FormatError(f"{path}: missing parameter {k!r}")
                if f[k].shape != self[k].shape:
                    raise FormatError(f"{path}: {k} has shape {f[k].shape}, expected {self[k].shape}")
                self[k].data[...] = f[k]


def _layer_out_shape(spec, shape):
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise DimensionError(f"{spec.name}: conv2d needs HxWxC input, got {shape}")
        h, w, _ = shape
        ho, wo = T.conv_output_hw(h, w, spec.kernel, spec.kernel, spec.stride, spec.padding)
        return (ho, wo, spec.filters)
    if spec.kind in ("dense", "output"):
        if len(shape) != 1:
            raise DimensionError(f"{spec.name}: {spec.kind} needs a flat input, got {shape}")
        return (spec.units,)
    if spec.kind == "maxpool":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise DimensionError(f"{spec.name}: maxpool needs HxWxC input of at least 2x2, got {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


class NetworkGraph:
    """Ordered layers, their parameters and the attached quantization sets.

    ``quant_mode="global"`` binds every hidden layer to ``gvs``;
    ``"per_layer"`` gives each hidden trainable layer its own ranges (the
    conventional baseline). The last trainable layer always uses ``out_set``.
    """

    def __init__(self, input_shape, layers, gvs=None, out_set=None, quant_mode="global",
                 name="custom", init_seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = [copy.copy(l) for l in layers]
        self.name = name
        if quant_mode not in ("global", "per_layer"):
            raise ValueError(f"unknown quant mode {quant_mode!r}")
        self.quant_mode = quant_mode
        for i, l in enumerate(self.layers):
            if not l.name:
                l.name = f"{l.kind}{i}"
        self._check_bindings()
        self.shapes = self._infer_shapes()
        self.gvs = gvs if gvs is not None else GlobalVariableSet.default()
        self.out_set = out_set if out_set is not None else GlobalVariableSet.default(
            bits_w=8, bits_x=8, bits_y=8, name="output")
        self.layer_sets = {}
        if quant_mode == "per_layer":
            for i in self.hidden_indices():
                s = GlobalVariableSet.from_dict(self.gvs.to_dict())
                s.name = self.layers[i].name
                self.layer_sets[i] = s
        self.params = ParameterStore()
        self._init_params(np.random.default_rng(init_seed))

    def _check_bindings(self):
        idx = self.trainable_indices()
        if not idx:
            raise ValueError("network has no trainable layer")
        for i in idx[:-1]:
            if self.layers[i].quant_binding != "global":
                raise ValueError(f"{self.layers[i].name}: only the last trainable layer may bind to the output set")
        self.layers[idx[-1]].quant_binding = "output"

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(_layer_out_shape(spec, shapes[-1]))
        return shapes

    def _init_params(self, rng):
        for i, spec in enumerate(self.layers):
            shape_in = self.shapes[i]
            if spec.kind == "conv2d":
                fan_in = spec.kernel * spec.kernel * shape_in[2]
                wshape = (spec.kernel, spec.kernel, shape_in[2], spec.filters)
            elif spec.kind in ("dense", "output"):
                fan_in = shape_in[0]
                wshape = (shape_in[0], spec.units)
            else:
                continue
            limit = np.sqrt(6.0 / fan_in)
            self.params.register(f"{spec.name}.w", rng.uniform(-limit, limit, wshape))
            self.params.register(f"{spec.name}.b", np.zeros(spec.out_channels))

    # structure queries -------------------------------------------------
    def trainable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.trainable]

    def hidden_indices(self):
        return self.trainable_indices()[:-1]

    def output_index(self):
        return self.trainable_indices()[-1]

    @property
    def output_shape(self):
        return self.shapes[-1]

    def weight(self, i):
        return self.params[f"{self.layers[i].name}.w"]

    def bias(self, i):
        return self.params[f"{self.layers[i].name}.b"]

    def set_for(self, i):
        """The quantization set bound to trainable layer ``i``."""
        if i == self.output_index():
            return self.out_set
        if self.quant_mode == "per_layer":
            return self.layer_sets[i]
        return self.gvs

    def all_sets(self):
        sets = [self.gvs] if self.quant_mode == "global" else list(self.layer_sets.values())
        return sets + [self.out_set]

    def param_count(self):
        return self.params.count()

    def activation_after(self, i):
        nxt = i + 1
        if nxt < len(self.layers) and self.layers[nxt].kind == "activation":
            return self.layers[nxt]
        return None

    def polarity_mask(self, i):
        """Weight-shaped boolean mask of the unipolar-constrained entries."""
        spec = self.layers[i]
        return np.broadcast_to(spec.channel_mask(), self.weight(i).shape)

    def is_unipolar(self, i):
        return self.layers[i].polarity == "unipolar"

    def copy(self):
        return copy.deepcopy(self)


def apply_activation(x, fn, gvs):
    """Activation of a hidden layer on a tensor."""
    if fn == "relu":
        return T.relu(x)
    if fn == "shifted_tanh":
        return T.tanh(T.sub(x, gvs.th_g))
    if fn == "mix":
        from .training import activation_mix
        return activation_mix(x, gvs.A_g, gvs.th_g)
    return x


def forward(net, x, mode="quantized", stats=None, trace=None):
    """Run the network on ``x`` (batch-first).

    In quantized mode each trainable layer's input, weight, bias and output
    pass through fake-quant nodes on the grids of its bound set; ``do_q = 0``
    turns all of them into exact no-ops. ``stats`` (a dict) collects
    ``{min, max, mean, std}`` per ``(set name, kind)`` for range updates;
    ``trace`` (a list) receives ``(layer name, output array)`` pairs.
    """
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    if mode not in ("float", "quantized"):
        raise ValueError(f"unknown mode {mode!r}")
    quantized = mode == "quantized" and net.gvs.do_q == 1
    h = x
    skip = False
    for i, spec in enumerate(net.layers):
        if skip:
            skip = False
            continue
        if spec.kind == "flatten":
            h = T.flatten(h)
        elif spec.kind == "maxpool":
            h = T.maxpool2d(h)
        elif spec.kind == "activation":
            h = apply_activation(h, spec.fn, net.gvs)
        else:
            s = net.set_for(i)
            w, b = net.weight(i), net.bias(i)
            if stats is not None:
                for kind, arr in (("X", h.data), ("W", w.data), ("B", b.data)):
                    stats.setdefault((s.name, kind), []).append(tensor_stats(arr))
            if quantized:
                h = fake_quant_ste(h, s.grid("X"), *s.range_tensors("X"))
                w = alpha_blend_quant(w, s.grid("W"), net.gvs.alpha, *s.range_tensors("W"))
                b = fake_quant_ste(b, s.grid("B"), *s.range_tensors("B"))
            if spec.kind == "conv2d":
                h = quant_conv2d(h, w, b, spec.stride, spec.padding)
            else:
                h = quant_linear(h, w, b)
            act = net.activation_after(i)
            if act is not None:
                h = apply_activation(h, act.fn, net.gvs)
                skip = True
            if stats is not None:
                stats.setdefault((s.name, "Y"), []).append(tensor_stats(h.data))
            if quantized:
                h = fake_quant_ste(h, s.grid("Y"), *s.range_tensors("Y"))
        if trace is not None:
            trace.append((spec.name, h.data))
    return h


def predict(net, x, mode="quantized", batch_size=512):
    out = []
    with T.no_grad():
        for k in range(0, len(x), batch_size):
            out.append(forward(net, x[k:k + batch_size], mode).data)
    return np.concatenate(out) if out else np.zeros((0,) + net.output_shape)


def accuracy(net, x, y, mode="quantized", batch_size=512):
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(net, x, mode, batch_size), axis=1) == y))


def quantized_weights(net, i, alpha=1.0):
    """Weights of trainable layer ``i`` as deployed (plain array)."""
    s = net.set_for(i)
    with T.no_grad():
        return alpha_blend_quant(net.weight(i), s.grid("W"), alpha).data


def distinct_hidden_weights(net):
    """Number of distinct quantized weight values over all hidden layers."""
    vals = [np.unique(quantized_weights(net, i)) for i in net.hidden_indices()]
    return int(np.unique(np.concatenate(vals)).size) if vals else 0


def hidden_grids(net, kind):
    return [net.set_for(i).grid(kind) for i in net.hidden_indices()]


# reference networks ----------------------------------------------------------

def har_layers(hidden=145, activation="relu", polarity="bipolar"):
    return [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", units=hidden, polarity=polarity),
        LayerSpec("activation", "act1", fn=activation),
        LayerSpec("output", "fc_out", units=12, polarity=polarity),
    ]


def cifar10_layers(activation="relu", polarity="bipolar", fraction=0.0, dense_units=60):
    def conv(name, f):
        return LayerSpec("conv2d", name, filters=f, kernel=3, padding="same",
                         polarity=polarity, fraction=fraction)

    def act(name):
        return LayerSpec("activation", name, fn=activation)

    return [
        conv("conv1", 32), act("act1"), conv("conv2", 32), act("act2"),
        LayerSpec("maxpool", "pool1"),
        conv("conv3", 64), act("act3"), conv("conv4", 64), act("act4"),
        LayerSpec("maxpool", "pool2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", units=dense_units, polarity=polarity, fraction=fraction), act("act5"),
        LayerSpec("output", "fc_out", units=10, polarity=polarity, fraction=fraction),
    ]


def build_reference(name, cfg=None, **kw):
    """Build ``"har"``, ``"cifar10"`` or ``"custom"`` (``cfg`` is a description dict).

    Keyword arguments (``activation``, ``polarity``, ``fraction``, bits...) are
    forwarded to the layer builders and :func:`make_sets`.
    """
    if name == "custom":
        if cfg is None:
            raise ValueError("custom network needs a description")
        return network_from_dict(cfg)
    layer_kw = {k: kw.pop(k) for k in ("activation", "polarity", "fraction", "hidden", "dense_units")
                if k in kw}
    if name == "har":
        layer_kw.pop("fraction", None)
        layer_kw.pop("dense_units", None)
        layers, shape = har_layers(**layer_kw), (9, 100)
    elif name == "cifar10":
        layer_kw.pop("hidden", None)
        layers, shape = cifar10_layers(**layer_kw), (32, 32, 3)
    else:
        raise ValueError(f"unknown reference network {name!r}")
    quant_mode = kw.pop("quant_mode", "global")
    init_seed = kw.pop("init_seed", 0)
    unipolar = layer_kw.get("polarity") == "unipolar"
    gvs, out_set = make_sets(unipolar=unipolar, **kw)
    return NetworkGraph(shape, layers, gvs, out_set, quant_mode, name=name, init_seed=init_seed)


def make_sets(bits_w=4, bits_x=4, bits_y=None, bits_b=8, out_bits=8, unipolar=False,
              trainable_ranges=False):
    """Hidden-layer set plus the output layer's own set.

    The output layer sits on the same NVM devices and reads the hidden
    activations, so it keeps the hidden weight and input bit-widths; its bias
    and logit ranges get ``out_bits``.
    """
    gvs = GlobalVariableSet.default(bits_w=bits_w, bits_x=bits_x, bits_y=bits_y, bits_b=bits_b,
                                    unipolar=unipolar)
    out = GlobalVariableSet.default(bits_w=bits_w, bits_x=bits_x, bits_y=out_bits, bits_b=out_bits,
                                    unipolar=unipolar, name="output")
    for s in (gvs, out):
        for kind in ("X", "Y", "W", "B"):
            getattr(s, kind).trainable = trainable_ranges
    return gvs, out


# description files -----------------------------------------------------------

def network_to_dict(net):
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "quant_mode": net.quant_mode,
        "layers": [l.to_dict() for l in net.layers],
        "global": net.gvs.to_dict(),
        "output": net.out_set.to_dict(),
        "layer_sets": {net.layers[i].name: s.to_dict() for i, s in net.layer_sets.items()},
    }


def network_from_dict(d):
    try:
        layers = [LayerSpec(**l) for l in d["layers"]]
        gvs = GlobalVariableSet.from_dict(d["global"]) if "global" in d else None
        out = GlobalVariableSet.from_dict(d["output"]) if "output" in d else None
        net = NetworkGraph(d["input_shape"], layers, gvs, out, d.get("quant_mode", "global"),
                           name=d.get("name", "custom"))
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed network description: {e}") from e
    by_name = {net.layers[i].name: i for i in net.layer_sets}
    for lname, sd in (d.get("layer_sets") or {}).items():
        if lname not in by_name:
            raise FormatError(f"layer set for unknown layer {lname!r}")
        net.layer_sets[by_name[lname]] = GlobalVariableSet.from_dict(sd)
    return net


def emit_description(net):
    return yaml.safe_dump(network_to_dict(net), sort_keys=False)


def parse_description(text):
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise FormatError(f"network description is not valid YAML: {e}") from e
    if not isinstance(d, dict):
        raise FormatError("network description must be a mapping")
    return network_from_dict(d)


def save_network(net, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "network.yaml").write_text(emit_description(net))
    net.params.to_npz(directory / "params.npz")


def load_network(directory):
    directory = Path(directory)
    net = parse_description((directory / "network.yaml").read_text())
    net.params.load_npz(directory / "params.npz")
    return net
