"""Hard-constrained quantized training.

Each step runs, in order: quantized forward, composite loss, backward,
optimizer update of the weights and the trainable globals (activation
logits, tanh shift, gradient-policy ranges), recomputation of the
non-differentiable ranges, and the alpha/do_Q schedule advance.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import TrainingError
from .nn import accuracy, forward
from .quant import RangePolicy, tensor_stats, update_global_ranges

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "task_loss", "l1", "l2", "constraint", "train_acc", "val_acc",
                  "w_min", "w_max", "alpha", "a0", "a1", "th_g")


@dataclass
class ConstraintConfig:
    alpha_c: float = 1.0
    w_t: float = 0.0
    start_step: int = 0
    ramp: str = "heaviside"

    def __post_init__(self):
        if self.alpha_c < 0:
            raise ValueError("alpha_c must be non-negative")
        if self.ramp not in ("heaviside", "relu"):
            raise ValueError(f"unknown ramp {self.ramp!r}")

    def gate(self, step):
        d = step - self.start_step
        if self.ramp == "heaviside":
            return 1.0 if d >= 0 else 0.0
        return float(max(d, 0))


@dataclass
class LossConfig:
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)

    def __post_init__(self):
        if self.l1_coeff < 0 or self.l2_coeff < 0:
            raise ValueError("regularization coefficients must be non-negative")


def constraint_loss(weights, cfg, step, masks=None):
    """Penalty on constrained weights below ``W_T``.

    ``alpha_C * sum(max(W_T - w, 0)) * gate(step)`` over the entries selected
    by ``masks`` (``None`` selects every entry). ``cfg`` may be a
    :class:`LossConfig` or a bare :class:`ConstraintConfig`.
    """
    c = cfg.constraint if isinstance(cfg, LossConfig) else cfg
    gate = c.gate(step)
    total = T.Tensor(0.0)
    if gate == 0.0 or c.alpha_c == 0.0:
        return total
    masks = masks if masks is not None else [None] * len(weights)
    for w, m in zip(weights, masks):
        w = T.as_tensor(w)
        if m is not None and not np.any(m):
            continue
        pen = T.relu(T.sub(c.w_t, w))
        if m is not None:
            pen = T.mul(pen, np.asarray(m, dtype=np.float64))
        total = T.add(total, T.sum_(pen))
    return T.mul(total, c.alpha_c * gate)


def regularizers(weights, cfg):
    """``(l1_term, l2_term)`` as scalar tensors."""
    l1 = T.Tensor(0.0)
    l2 = T.Tensor(0.0)
    for w in weights:
        if cfg.l1_coeff:
            l1 = T.add(l1, T.sum_(T.abs_(w)))
        if cfg.l2_coeff:
            l2 = T.add(l2, T.sum_(T.square(w)))
    return T.mul(l1, cfg.l1_coeff), T.mul(l2, cfg.l2_coeff)


def total_loss(task_loss, weights, cfg, step, masks=None, parts=None):
    """``L + l2 * sum(w^2) + l1 * sum(|w|) + constraint``.

    If ``parts`` is a dict it receives the value of each term.
    """
    l1, l2 = regularizers(weights, cfg)
    lc = constraint_loss(weights, cfg, step, masks)
    out = T.add(T.add(T.add(task_loss, l2), l1), lc)
    if parts is not None:
        parts.update(task_loss=float(T.as_tensor(task_loss).data), l1=float(l1.data),
                     l2=float(l2.data), constraint=float(lc.data))
    return out


def activation_mix(x, a_g, th_g):
    """``a0 * relu(x) + a1 * tanh(x - th_g)`` with ``(a0, a1) = softmax(A_g)``."""
    x, a_g, th_g = T.as_tensor(x), T.as_tensor(a_g), T.as_tensor(th_g)
    a = T.softmax(a_g)
    return T.add(T.mul(T.take(a, 0), T.relu(x)),
                 T.mul(T.take(a, 1), T.tanh(T.sub(x, th_g))))


def select_activation(a_g):
    """Harden the activation search: ``"relu"`` or ``"shifted_tanh"``.

    An exact tie goes to relu.
    """
    a = np.asarray(T.as_tensor(a_g).data, dtype=np.float64)
    return "shifted_tanh" if a[1] > a[0] else "relu"


def harden_activations(net):
    """Replace every ``mix`` activation layer by the selected branch."""
    choice = select_activation(net.gvs.A_g)
    for spec in net.layers:
        if spec.kind == "activation" and spec.fn == "mix":
            spec.fn = choice
    return choice


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params, self.lr = list(params), lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    quantized: bool = True
    # do_Q stays 0 for this many steps (float warm-up)
    quant_delay: int = 0
    # alpha rises linearly 0 -> 1 over this share of the budget; 0 disables blending
    blend_fraction: float = 0.6
    range_policy: RangePolicy = field(default_factory=RangePolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    train_activation: bool = True
    eval_every: int = 100
    eval_samples: int = 2000


class TrainState:
    """Step counter, optimizer and rng for one run."""

    def __init__(self, params, cfg):
        self.step = 0
        self.rng = np.random.default_rng(cfg.seed)
        if cfg.optimizer == "adam":
            self.optimizer = Adam(params, cfg.lr)
        elif cfg.optimizer == "sgd":
            self.optimizer = SGD(params, cfg.lr)
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def alpha_at(step, cfg):
    if cfg.blend_fraction <= 0:
        return 1.0
    ramp = cfg.blend_fraction * cfg.steps
    return float(min(1.0, step / ramp)) if ramp > 0 else 1.0


def calibrate_ranges(net, x):
    """Initialise every range to the envelope of one float forward pass."""
    stats = {}
    with T.no_grad():
        forward(net, x, mode="float", stats=stats)
    for s in net.all_sets():
        for kind in ("X", "Y", "W", "B"):
            entries = stats.get((s.name, kind))
            r = getattr(s, kind)
            if not entries:
                continue
            lo = min(e["min"] for e in entries)
            hi = max(e["max"] for e in entries)
            if kind == "W":
                # symmetric weight grids keep zero near the centre
                m = max(abs(lo), abs(hi))
                lo, hi = -m, m
            if kind == "B":
                m = max(abs(lo), abs(hi), 0.1)
                lo, hi = -m, m
            if r.fixed_min:
                lo = 0.0
            if hi - lo < 1e-6:
                hi = lo + 1e-6
            r.min, r.max = lo, hi
    return stats


def _trainable(net, cfg):
    params = list(net.params.values())
    if cfg.train_activation and any(l.kind == "activation" and l.fn in ("mix", "shifted_tanh")
                                    for l in net.layers):
        params += [net.gvs.A_g, net.gvs.th_g]
    for s in net.all_sets():
        params += s.trainable_tensors()
    return params


def _weight_masks(net):
    idx = net.trainable_indices()
    # an all-false mask (not None, which means "every entry") leaves bipolar layers free
    return [net.weight(i) for i in idx], [net.polarity_mask(i) for i in idx]


def _diagnose_nan(net, trace):
    for name, arr in trace:
        if not np.all(np.isfinite(arr)):
            return name
    for name, p in net.params.items():
        if not np.all(np.isfinite(p.data)):
            return name
    return "loss"


def train(net, dataset, cfg, log_path=None, val=None):
    """Train ``net`` in place on ``dataset`` (``(x, y)`` arrays).

    ``val`` is an optional ``(x, y)`` pair for validation accuracy. Returns
    ``(net, rows)`` where ``rows`` is the metrics log (list of dicts, also
    written as CSV to ``log_path`` when given).
    """
    x, y = dataset
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    state = TrainState(_trainable(net, cfg), cfg)
    weights, masks = _weight_masks(net)

    calib = x[state.rng.permutation(n)[:min(n, 512)]]
    calibrate_ranges(net, calib)
    net.gvs.do_q = 1 if (cfg.quantized and cfg.quant_delay == 0) else 0
    net.gvs.alpha = alpha_at(0, cfg) if cfg.quantized else 1.0
    mode = "quantized" if cfg.quantized else "float"

    rows = []
    order = state.rng.permutation(n)
    cursor = 0
    while state.step < cfg.steps:
        if cursor + cfg.batch_size > n:
            order = state.rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        xb, yb = x[idx], y[idx]

        # (1) forward
        stats, trace = {}, []
        logits = forward(net, xb, mode, stats=stats, trace=trace)
        # (2) composite loss
        task = T.softmax_crossentropy(logits, yb)
        parts = {}
        loss = total_loss(task, weights, cfg.loss, state.step, masks, parts)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss at step {state.step}; first bad tensor: "
                                f"{_diagnose_nan(net, trace)}")
        # (3) backward
        for p in state.optimizer.params:
            p.grad = None
        loss.backward()
        # (4) update weights and trainable globals
        state.optimizer.step()
        for s in net.all_sets():
            s.sync_from_tensors()
        # (5) non-differentiable globals
        if cfg.quantized:
            for s in net.all_sets():
                per_kind = {k: stats.get((s.name, k), []) for k in ("X", "Y", "W", "B")}
                if any(per_kind.values()):
                    update_global_ranges(s, per_kind, cfg.range_policy)
        # (6) schedules
        state.step += 1
        if cfg.quantized:
            net.gvs.do_q = 1 if state.step >= cfg.quant_delay else 0
            net.gvs.alpha = alpha_at(state.step, cfg)

        if state.step % cfg.eval_every == 0 or state.step == cfg.steps:
            row = _metrics_row(net, state.step, parts, logits.data, yb, val, mode, cfg)
            rows.append(row)
            log.info("step %d loss %.4f train_acc %.3f val_acc %.3f", state.step,
                     row["task_loss"], row["train_acc"], row["val_acc"])
    if log_path is not None:
        write_metrics(rows, log_path)
    return net, rows


def _metrics_row(net, step, parts, logits, yb, val, mode, cfg):
    wall = np.concatenate([net.weight(i).data.ravel() for i in net.trainable_indices()])
    a = net.gvs.activation_weights()
    val_acc = float("nan")
    if val is not None and len(val[0]):
        vx, vy = val[0][:cfg.eval_samples], val[1][:cfg.eval_samples]
        val_acc = accuracy(net, vx, vy, mode)
    return {
        "step": step, **parts,
        "train_acc": float(np.mean(np.argmax(logits, axis=1) == yb)),
        "val_acc": val_acc, "w_min": float(wall.min()), "w_max": float(wall.max()),
        "alpha": float(net.gvs.alpha), "a0": float(a[0]), "a1": float(a[1]),
        "th_g": float(net.gvs.th_g.data),
    }


def write_metrics(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_COLUMNS})


def project_unipolar(net):
    """Clamp constrained weights into ``[0, w1]`` of their weight range."""
    for i in net.trainable_indices():
        spec = net.layers[i]
        if not spec.unipolar_channels():
            continue
        w = net.weight(i).data
        m = net.polarity_mask(i)
        hi = net.set_for(i).W.max
        w[...] = np.where(m, np.clip(w, 0.0, hi), w)
    return net


def finalize(net):
    """Export-time clean-up: harden activations, project unipolar weights,
    switch to fully quantized inference (``alpha = 1``, ``do_q = 1``)."""
    harden_activations(net)
    project_unipolar(net)
    net.gvs.alpha = 1.0
    net.gvs.do_q = 1
    return net


def weight_stats(net):
    return {net.layers[i].name: tensor_stats(net.weight(i).data) for i in net.trainable_indices()}
