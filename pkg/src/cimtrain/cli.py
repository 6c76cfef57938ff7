"""Command line: train, map, estimate, report and sweep.

Exit codes: 0 on success, 2 for configuration errors, 3 when a mapped
deployment does not reproduce the digital quantized network.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import __version__
from . import costmodel as cm
from . import crossbar as xb
from . import data as D
from . import nn
from . import training as tr
from .errors import CimError, ConfigError, FormatError
from .quant import RangePolicy

log = logging.getLogger("cimtrain")

DATA_ENV = "CIMTRAIN_DATA"
EXIT_CONFIG = 2
EXIT_INEXACT = 3


@dataclasses.dataclass
class ExperimentConfig:
    """Everything one run needs. Unknown keys are rejected on load."""

    network: str = "har"
    description: str = ""  # YAML network description when network == "custom"
    dataset: str = "synth_har"  # synth_har | har_csv | cifar10
    data_path: str = ""  # file or directory; relative paths resolve against $CIMTRAIN_DATA
    synth_samples: int = 1200
    synth_noise: float = 1.0
    subset: int = 10000
    test_subset: int = 2000
    bits: dict = dataclasses.field(default_factory=lambda: {"weights": 4, "activations": 4,
                                                           "outputs": 4, "bias": 8, "logits": 8})
    quant_mode: str = "global"
    range_policy: str = "ema"
    ema_decay: float = 0.99
    activation: str = "relu"
    polarity: str = "bipolar"
    fraction: float = 0.0
    fractions: list = dataclasses.field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    hidden_units: int = 0  # 0 keeps the reference width
    tile_shape: list = dataclasses.field(default_factory=lambda: [128, 128])
    frequency: list = dataclasses.field(default_factory=lambda: [10e6, 100e6])
    conductance_bits: int = 8
    noise_sigma: float = 0.0
    catalog: str = ""
    seed: int = 0
    steps: int = 1500
    full_steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    constraint_alpha: float = 1.0
    constraint_threshold: float = 0.0
    constraint_start: float = 0.3  # share of the step budget
    constraint_ramp: str = "heaviside"
    l1: float = 0.0
    l2: float = 0.0
    output_dir: str = "runs/default"

    _BIT_KEYS = ("weights", "activations", "outputs", "bias", "logits")

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls()
        for k, v in raw.items():
            if k == "bits":
                if not isinstance(v, dict):
                    raise ConfigError("bits must be a mapping")
                bad = sorted(set(v) - set(cls._BIT_KEYS))
                if bad:
                    raise ConfigError(f"unknown bits keys: {', '.join(bad)}")
                v = {**cfg.bits, **v}
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(raw)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.network in ("har", "cifar10", "custom"), f"unknown network {self.network!r}")
        need(self.network != "custom" or self.description, "custom network needs 'description'")
        need(self.dataset in ("synth_har", "har_csv", "cifar10"), f"unknown dataset {self.dataset!r}")
        for k in self._BIT_KEYS:
            b = self.bits.get(k)
            need(isinstance(b, int) and 2 <= b <= 8, f"bits.{k} must be an integer in [2, 8], got {b!r}")
        need(self.quant_mode in ("global", "per_layer"), f"unknown quant_mode {self.quant_mode!r}")
        need(self.range_policy in ("ema", "gradient"), f"unknown range_policy {self.range_policy!r}")
        need(self.activation in ("relu", "shifted_tanh", "mix"), f"unknown activation {self.activation!r}")
        need(self.polarity in ("bipolar", "unipolar", "fractional"), f"unknown polarity {self.polarity!r}")
        need(0.0 <= float(self.fraction) <= 1.0, "fraction must lie in [0, 1]")
        need(all(0.0 <= float(p) <= 1.0 for p in self.fractions), "fractions must lie in [0, 1]")
        need(len(self.tile_shape) == 2 and all(int(t) > 0 for t in self.tile_shape),
             "tile_shape must be two positive integers")
        freqs = self.frequency if isinstance(self.frequency, list) else [self.frequency]
        need(all(float(f) in cm.FREQUENCIES for f in freqs), "frequency must be 10e6 and/or 100e6")
        need(int(self.steps) > 0 and int(self.batch_size) > 0, "steps and batch_size must be positive")
        need(float(self.lr) > 0, "lr must be positive")
        need(self.constraint_ramp in ("heaviside", "relu"), "constraint_ramp must be heaviside or relu")
        need(2 <= int(self.conductance_bits) <= 8, "conductance_bits must lie in [2, 8]")
        need(float(self.noise_sigma) >= 0, "noise_sigma must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()


# building blocks -------------------------------------------------------------

def _data_path(cfg):
    p = cfg.data_path
    root = os.environ.get(DATA_ENV, "")
    if not p:
        p = os.path.join(root, "cifar-10-batches-bin" if cfg.dataset == "cifar10" else "har.csv")
    elif not os.path.isabs(p) and root:
        p = os.path.join(root, p)
    return p


def load_dataset(cfg, full=False):
    """Return ``(train (x, y), val (x, y), split info)``."""
    if cfg.dataset == "synth_har":
        ds = D.synth_har(cfg.seed, cfg.synth_samples, noise=cfg.synth_noise)
        return ds.split("train"), ds.split("val"), {"kind": "synthetic", **ds.norm}
    path = _data_path(cfg)
    if cfg.dataset == "har_csv":
        ds = D.load_har_csv(path, seed=cfg.seed)
        return ds.split("train"), ds.split("val"), {"kind": ds.norm["split"], "path": path}
    ds = D.load_cifar10(path, None if full else cfg.subset, None if full else cfg.test_subset, cfg.seed)
    return ds.split("train"), ds.split("test"), {"kind": "cifar10", "path": path,
                                                 "train": len(ds.splits["train"]),
                                                 "test": len(ds.splits["test"])}


def build_network(cfg, fraction=None):
    polarity = cfg.polarity
    if fraction is not None:
        polarity = "fractional"
    frac = cfg.fraction if fraction is None else fraction
    if cfg.network == "custom":
        with open(cfg.description) as f:
            return nn.parse_description(f.read())
    kw = dict(activation=cfg.activation, polarity=polarity, quant_mode=cfg.quant_mode,
              init_seed=cfg.seed, bits_w=cfg.bits["weights"], bits_x=cfg.bits["activations"],
              bits_y=cfg.bits["outputs"], bits_b=cfg.bits["bias"], out_bits=cfg.bits["logits"],
              trainable_ranges=cfg.range_policy == "gradient")
    if cfg.network == "cifar10":
        kw["fraction"] = frac
        if cfg.hidden_units:
            kw["dense_units"] = cfg.hidden_units
    elif cfg.hidden_units:
        kw["hidden"] = cfg.hidden_units
    net = nn.build_reference(cfg.network, **kw)
    if polarity == "fractional":
        for l in net.layers:
            if l.trainable:
                l.polarity, l.fraction = "fractional", float(frac)
    return net


def train_config(cfg, full=False):
    steps = cfg.full_steps if full else cfg.steps
    return tr.TrainConfig(
        steps=int(steps), batch_size=int(cfg.batch_size), lr=float(cfg.lr), seed=int(cfg.seed),
        range_policy=RangePolicy(cfg.range_policy, float(cfg.ema_decay)),
        loss=tr.LossConfig(float(cfg.l1), float(cfg.l2), tr.ConstraintConfig(
            float(cfg.constraint_alpha), float(cfg.constraint_threshold),
            int(cfg.constraint_start * steps), cfg.constraint_ramp)),
        eval_every=max(1, int(steps) // 10))


def write_run_manifest(out_dir, cfg, command, extra=None):
    m = {"command": command, "version": __version__, "config_hash": cfg.digest(),
         "seed": cfg.seed, "config": cfg.to_dict(), **(extra or {})}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(m, f, indent=2, default=float)
    return m


def run_training(cfg, out_dir, full=False, fraction=None):
    """Train, finalize and save one network; returns a summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    train_set, val_set, split = load_dataset(cfg, full)
    net = build_network(cfg, fraction)
    tcfg = train_config(cfg, full)
    net, rows = tr.train(net, train_set, tcfg, os.path.join(out_dir, "metrics.csv"), val_set)
    tr.finalize(net)
    nn.save_network(net, out_dir)
    acc = nn.accuracy(net, *val_set)
    summary = {"val_accuracy": acc, "distinct_hidden_weights": nn.distinct_hidden_weights(net),
               "params": net.param_count(), "split": split}
    write_run_manifest(out_dir, cfg, "train", summary)
    return net, summary


def _probe_inputs(net, cfg, n=64):
    """Inputs for the exactness check: validation samples when available,
    otherwise uniform draws over the first layer's input range."""
    try:
        _, (vx, _), _ = load_dataset(cfg)
        if len(vx):
            return vx[:n]
    except (OSError, CimError):
        pass
    r = net.set_for(net.trainable_indices()[0]).X
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(r.min, r.max, (n,) + net.input_shape)


def map_network(net, cfg, probe=None):
    dev = xb.DeviceModel(conductance_bits=int(cfg.conductance_bits), noise_sigma=0.0)
    dep = xb.build_deployment(net, dev, tuple(cfg.tile_shape), seed=cfg.seed)
    probe = _probe_inputs(net, cfg) if probe is None else probe
    ok = xb.verify_exact(dep, net, probe)
    return dep, ok


def _catalog(cfg):
    return cm.PeripheryCatalog.from_yaml(cfg.catalog) if cfg.catalog else cm.PeripheryCatalog()


def _freqs(cfg):
    f = cfg.frequency if isinstance(cfg.frequency, list) else [cfg.frequency]
    return tuple(float(v) for v in f)


# subcommands -----------------------------------------------------------------

def cmd_train(args, cfg):
    out = args.out or cfg.output_dir
    _, summary = run_training(cfg, out, args.full)
    print(json.dumps({k: v for k, v in summary.items() if k != "split"}, default=float))
    return 0


def cmd_map(args, cfg):
    net = nn.load_network(args.model)
    dep, ok = map_network(net, cfg)
    man = dep.to_manifest()
    man["exactness_check"] = "PASS" if ok else "FAIL"
    if not ok:
        print(f"error: deployment of {args.model} diverges from the digital quantized network",
              file=sys.stderr)
        return EXIT_INEXACT
    path = args.out or os.path.join(args.model, "deployment.json")
    with open(path, "w") as f:
        json.dump(man, f, indent=2)
    print(f"reconfigurable={str(dep.reconfigurable).lower()} exactness=PASS "
          f"crossbars={man['counts']['crossbars']} -> {path}")
    return 0


def cmd_estimate(args, cfg):
    cat = _catalog(cfg)
    freqs = _freqs(cfg)
    if args.preset:
        rep = cm.preset_report(args.preset, cat, freqs, tuple(cfg.tile_shape))
    elif args.counts:
        with open(args.counts) as f:
            spec = yaml.safe_load(f)
        try:
            bits = int(spec.get("bits", 8))
            rep = cm.area_estimate(spec["components"], cat, bits, bits, tuple(cfg.tile_shape),
                                   reconfigurable=bool(spec.get("reconfigurable", False)))
            if "ops" in spec:
                rep = cm.energy_estimate(cm.OpCounts(**spec["ops"]), cat, freqs, bits, bits,
                                         spec.get("scheme", "bipolar"),
                                         bool(spec.get("uniform", True))).merge(rep)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"{args.counts}: {e}") from None
    elif args.model:
        net = nn.load_network(args.model)
        if args.verify:
            dep, ok = map_network(net, cfg)
            if not ok:
                print("error: deployment diverges from the digital quantized network", file=sys.stderr)
                return EXIT_INEXACT
        else:
            dep = xb.build_deployment(net, xb.DeviceModel(conductance_bits=int(cfg.conductance_bits)),
                                      tuple(cfg.tile_shape))
        rep = cm.network_report(net, dep, cat, freqs)
    else:
        raise ConfigError("estimate needs --preset, --counts or --model")
    text = rep.to_json() if args.format == "json" else rep.to_text()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_report(args, cfg):
    run = args.run
    report = {"run": run}
    for name in ("manifest.json", "deployment.json"):
        p = os.path.join(run, name)
        if os.path.exists(p):
            with open(p) as f:
                report[name.split(".")[0]] = json.load(f)
    metrics = os.path.join(run, "metrics.csv")
    if os.path.exists(metrics):
        with open(metrics) as f:
            rows = list(csv.DictReader(f))
        report["final_metrics"] = rows[-1] if rows else {}
    cost = None
    if os.path.exists(os.path.join(run, "network.yaml")):
        net = nn.load_network(run)
        dep = xb.build_deployment(net, xb.DeviceModel(conductance_bits=int(cfg.conductance_bits)),
                                  tuple(cfg.tile_shape))
        cost = cm.network_report(net, dep, _catalog(cfg), _freqs(cfg))
        report["cost"] = cost.to_dict()
    with open(os.path.join(run, "report.json"), "w") as f:
        json.dump(report, f, indent=2, default=float)
    lines = [f"run: {run}"]
    if "manifest" in report:
        m = report["manifest"]
        lines.append(f"  version {m.get('version')}  seed {m.get('seed')}  config {m.get('config_hash', '')[:12]}")
        if "val_accuracy" in m:
            lines.append(f"  validation accuracy {m['val_accuracy']:.4f}")
    if "deployment" in report:
        d = report["deployment"]
        lines.append(f"  reconfigurable {d['reconfigurable']}  exactness {d.get('exactness_check', 'n/a')}")
    if cost is not None:
        lines.append(cost.to_text())
    text = "\n".join(lines)
    with open(os.path.join(run, "report.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    return 0


SWEEP_COLUMNS = ["fraction", "accuracy", "crossbar_area", "total_area", "crossbars",
                 "nvm_reads", "nvm_energy_10mhz"]


def sweep_point(cfg_dict, fraction, out_dir, full=False):
    """One isolated sweep run (separate process friendly)."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    net, summary = run_training(cfg, out_dir, full, fraction=fraction)
    dep = xb.build_deployment(net, xb.DeviceModel(conductance_bits=int(cfg.conductance_bits)),
                              tuple(cfg.tile_shape))
    cat = _catalog(cfg)
    area = cm.area_estimate(dep, cat, cfg.bits["activations"], cfg.bits["outputs"])
    counts = cm.count_ops(net)
    return {"fraction": fraction, "accuracy": summary["val_accuracy"],
            "crossbar_area": area.area_parts["nvm"], "total_area": area.total_area,
            "crossbars": area.counts["crossbars"], "nvm_reads": counts.nvm_reads,
            "nvm_energy_10mhz": counts.nvm_reads * cat.nvm_read_power / 10e6}


def run_sweep(cfg, fractions, out_dir, jobs=1, full=False):
    os.makedirs(out_dir, exist_ok=True)
    tasks = [(cfg.to_dict(), float(p), os.path.join(out_dir, f"fraction_{float(p):.3f}"), full)
             for p in fractions]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(sweep_point, *zip(*tasks)))
    else:
        rows = [sweep_point(*t) for t in tasks]
    rows.sort(key=lambda r: r["fraction"])
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_run_manifest(out_dir, cfg, "sweep", {"fractions": [float(p) for p in fractions]})
    return rows, path


def cmd_sweep(args, cfg):
    fractions = cfg.fractions
    if args.fractions:
        try:
            fractions = [float(v) for v in args.fractions.split(",")]
        except ValueError:
            raise ConfigError(f"bad --fractions {args.fractions!r}") from None
        if not all(0.0 <= p <= 1.0 for p in fractions):
            raise ConfigError("fractions must lie in [0, 1]")
    _, path = run_sweep(cfg, fractions, args.out or cfg.output_dir, args.jobs, args.full)
    with open(path) as f:
        sys.stdout.write(f.read())
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="cimtrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cimtrain {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (YAML)")
        sp.add_argument("--out", help="output path or directory")
        return sp

    t = common(sub.add_parser("train", help="train a network"))
    t.add_argument("--full", action="store_true", help="full data and step budget")
    m = common(sub.add_parser("map", help="map a trained network onto crossbar tiles"))
    m.add_argument("--model", required=True, help="directory written by train")
    e = common(sub.add_parser("estimate", help="energy and area estimate"))
    g = e.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(cm.PRESETS))
    g.add_argument("--counts", help="YAML with components (and optionally ops, bits, scheme)")
    g.add_argument("--model", help="directory written by train")
    e.add_argument("--verify", action="store_true", help="also run the exactness check")
    e.add_argument("--format", choices=("text", "json"), default="text")
    r = common(sub.add_parser("report", help="summarize a run directory"))
    r.add_argument("--run", required=True)
    s = common(sub.add_parser("sweep", help="unipolar-fraction study"))
    s.add_argument("--fractions", help="comma separated, e.g. 0,0.25,0.5")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--full", action="store_true")
    return p


COMMANDS = {"train": cmd_train, "map": cmd_map, "estimate": cmd_estimate,
            "report": cmd_report, "sweep": cmd_sweep}


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
