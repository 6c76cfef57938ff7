"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary section at
the end lists every criterion with the measured values.
"""
import os
import time

import numpy as np
import pytest

from cimtrain import costmodel as cm
from cimtrain import crossbar as xb
from cimtrain import nn, training as tr
from cimtrain import tensor as T
from cimtrain.data import synth_har
from cimtrain.nn import LayerSpec, NetworkGraph, make_sets
from cimtrain.quant import Range, alpha_blend_quant, fake_quant_ste, make_grid, quantize
from conftest import central_fd, record
from randnets import random_net
from test_costmodel import brute_force_ops


def _rel(a, b):
    return abs(a - b) / abs(b)


# 1 -----------------------------------------------------------------------------

AREA_ROWS = [("cifar10-tf8", 8.05, 0.02), ("cifar10-tf4", 1.1, 0.02), ("har-tf8", 2.51, 0.03),
             ("har-tf4", 0.35, 0.03), ("har-ours4", 0.28, 0.03)]


def test_criterion_1_area_goldens():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, published, tol in AREA_ROWS:
        got = cm.preset_report(name).total_area
        good = _rel(got, published) <= tol
        ok &= good
        parts.append(f"{name} {got:.3f} vs {published} mm2{'' if good else ' (OUT)'}")
    ms = (time.perf_counter() - t0) * 1e3
    record(1, ok, f"area goldens ({ms:.1f} ms): " + "; ".join(parts))
    assert ok


# 2 -----------------------------------------------------------------------------

NVM_ROWS = {  # total NVM energy for CIFAR, per polarity for HAR, (10 MHz, 100 MHz) in J
    "cifar10-tf8": (1.55e-6, 0.16e-6), "cifar10-tf4": (1.55e-6, 0.16e-6),
    "cifar10-ours4": (1.55e-6, 0.16e-6),
    "har-tf8": (0.7e-9, 0.07e-9), "har-tf4": (0.7e-9, 0.07e-9), "har-ours4": (0.7e-9, 0.07e-9),
}
DAC_ROWS = {
    "cifar10-tf8": (32.9e-9, 10.1e-9), "cifar10-tf4": (23.9e-9, 8.7e-9),
    "cifar10-ours4": (23.9e-9, 8.7e-9),
    "har-tf8": (0.17e-9, 0.05e-9), "har-tf4": (0.12e-9, 0.04e-9), "har-ours4": (0.12e-9, 0.04e-9),
}
ADC_ROWS = {
    "cifar10-tf8": (22.6e-9, 22.6e-9), "cifar10-tf4": (18.4e-9, 18.1e-9),
    "cifar10-ours4": (16.5e-9, 16.2e-9),
    "har-tf8": (0.052e-9, 0.05e-9), "har-tf4": (0.04e-9, 0.03e-9), "har-ours4": (0.03e-9, 0.03e-9),
}


def test_criterion_2_energy_goldens():
    t0 = time.perf_counter()
    failures, worst = [], {"nvm": 0.0, "dac": 0.0, "adc": 0.0}
    for name in cm.PRESETS:
        rep = cm.preset_report(name)
        for k, f in enumerate(cm.FREQUENCIES):
            e = rep.energy[f]
            nvm = e["nvm_pos"] + e["nvm_neg"] if name.startswith("cifar") else e["nvm_pos"]
            checks = [("nvm", nvm, NVM_ROWS[name][k], 0.05), ("dac", e["dac"], DAC_ROWS[name][k], 0.05),
                      ("adc", e["adc"], ADC_ROWS[name][k], 0.25)]
            if name.startswith("har") and name != "har-ours4":
                checks.append(("nvm", e["nvm_neg"], NVM_ROWS[name][k], 0.05))
            for comp, got, published, tol in checks:
                err = _rel(got, published)
                worst[comp] = max(worst[comp], err)
                if err > tol:
                    failures.append(f"{name} {comp}@{f / 1e6:g}MHz {got * 1e9:.4g} vs {published * 1e9:.4g} nJ "
                                    f"({err:.1%} > {tol:.0%})")
    har = cm.preset_report("har-ours4")
    neg_zero = har.energy[10e6]["nvm_neg"] == 0.0 and har.energy[100e6]["nvm_neg"] == 0.0
    if not neg_zero:
        failures.append("HAR unipolar NVM(-) energy is not zero")
    saving = cm.savings_report(cm.preset_report("har-tf8"), har)["energy"][10e6]["total"]["saving"]
    if saving < 0.40:
        failures.append(f"HAR energy reduction {saving:.1%} < 40%")
    ms = (time.perf_counter() - t0) * 1e3
    detail = (f"worst rel. error nvm {worst['nvm']:.1%}, dac {worst['dac']:.1%}, adc {worst['adc']:.1%}; "
              f"HAR NVM(-)=0 {neg_zero}; HAR reduction {saving:.1%} ({ms:.1f} ms)")
    if failures:
        detail += "; out of tolerance: " + "; ".join(failures)
    record(2, not failures, detail)
    assert not failures, detail


# 3 -----------------------------------------------------------------------------

def test_criterion_3_crossbar_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    kinds = {"conv": 0, "dense": 0, "unipolar": 0, "bipolar": 0, "fractional": 0}
    for _ in range(1000):
        net, x = random_net(rng)
        trainable = [net.layers[i] for i in net.trainable_indices()]
        kinds["conv" if any(l.kind == "conv2d" for l in trainable) else "dense"] += 1
        kinds[trainable[0].polarity] += 1
        dep = xb.build_deployment(net)
        if not np.array_equal(xb.crossbar_infer(dep, x), nn.predict(net, x)):
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 120
    record(3, ok, f"1000 random nets, {mismatches} mismatches, {dt:.1f} s; mix {kinds}")
    assert ok


# 4 -----------------------------------------------------------------------------

def _rel_norm(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _check(build, arrays, probe_shape_rng):
    """Worst relative error of reverse mode vs central FD for ``sum(build * probe)``."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    probe = probe_shape_rng.normal(size=out.shape)
    T.sum_(T.mul(out, T.Tensor(probe))).backward()

    def f():
        with T.no_grad():
            return float(np.sum(build(*[T.Tensor(a) for a in arrays]).data * probe))

    return max(_rel_norm(t.grad, central_fd(f, a)) for t, a in zip(ts, arrays))


def _off_boundary(rng, g, shape):
    """Values inside the clip range, at least a tenth of a step from rounding midpoints,
    plus a share of values well outside the range."""
    n = int(np.prod(shape))
    out = np.empty(n)
    for k in range(n):
        if k % 4 == 3:
            out[k] = rng.choice([-1, 1]) * rng.uniform(0.2, 1.0) * g.scale * 10 + (
                g.nudged_max + 3 * g.scale if out[k - 1] > 0 else g.nudged_min - 3 * g.scale)
            continue
        while True:
            v = rng.uniform(g.nudged_min + 0.1 * g.scale, g.nudged_max - 0.1 * g.scale)
            frac = (v - g.nudged_min) / g.scale % 1.0
            if abs(frac - 0.5) > 0.1:
                break
        out[k] = v
    return out.reshape(shape)


def test_criterion_4_gradient_oracle():
    rng = np.random.default_rng(99)
    t0 = time.perf_counter()
    worst = {}

    def run(name, fn, tol=1e-4):
        errs = [fn() for _ in range(100)]
        worst[name] = (max(errs), tol)

    u = lambda *s: rng.uniform(-2, 2, s)
    away = lambda *s: rng.uniform(0.05, 2, s) * rng.choice([-1, 1], s)
    run("add", lambda: _check(T.add, [u(3, 4), u(4)], rng))
    run("sub", lambda: _check(T.sub, [u(3, 4), u(3, 4)], rng))
    run("mul", lambda: _check(T.mul, [u(3, 4), u()], rng))
    run("neg", lambda: _check(T.neg, [u(5)], rng))
    run("matmul", lambda: _check(T.matmul, [u(3, 4), u(4, 2)], rng))
    run("relu", lambda: _check(T.relu, [away(6)], rng))
    run("abs", lambda: _check(T.abs_, [away(6)], rng))
    run("tanh", lambda: _check(T.tanh, [u(6)], rng))
    run("square", lambda: _check(T.square, [u(6)], rng))
    run("sum", lambda: _check(lambda a: T.reshape(T.sum_(a), (1,)), [u(2, 3)], rng))
    run("mean", lambda: _check(lambda a: T.reshape(T.mean(a), (1,)), [u(2, 3)], rng))
    run("reshape", lambda: _check(lambda a: T.reshape(a, (3, 2)), [u(2, 3)], rng))
    run("softmax", lambda: _check(T.softmax, [u(5)], rng))
    def ce_case():
        labels = rng.integers(0, 4, 3)
        return _check(lambda a: T.reshape(T.softmax_crossentropy(a, labels), (1,)), [u(3, 4)], rng)

    run("softmax_crossentropy", ce_case)
    def conv_case():
        stride, pad = int(rng.integers(1, 3)), str(rng.choice(["same", "valid"]))
        return _check(lambda a, k: T.conv2d(a, k, stride, pad), [u(1, 4, 4, 2), u(2, 2, 2, 2)], rng)

    run("conv2d", conv_case)
    run("maxpool2d", lambda: _check(T.maxpool2d, [rng.permutation(32).reshape(1, 4, 4, 2) * 0.1], rng))
    run("activation_mix", lambda: _check(tr.activation_mix, [away(5), u(2), u()], rng))

    def quant_case(alpha):
        bits = int(rng.integers(2, 9))
        lo, hi = -rng.uniform(0.2, 2), rng.uniform(0.2, 2)
        g = make_grid(Range(lo, hi, bits))
        t = _off_boundary(rng, g, (8,))
        codes = quantize(t, g)[1]
        n1 = g.levels - 1
        # reverse mode vs FD of the STE surrogate (clamp, blended by alpha) in t,
        # and of q = codes * (hi - lo) / (n - 1) in the range ends
        lt, ht = T.Tensor(lo, requires_grad=True), T.Tensor(hi, requires_grad=True)
        tt = T.Tensor(t, requires_grad=True)
        probe = rng.normal(size=8)
        T.sum_(T.mul(alpha_blend_quant(tt, g, alpha, lt, ht), T.Tensor(probe))).backward()
        f_t = lambda: float(np.sum(probe * (alpha * np.clip(t, g.nudged_min, g.nudged_max) + (1 - alpha) * t)))
        arr = np.array([lo, hi])
        f_r = lambda: float(np.sum(probe * (alpha * codes * (arr[1] - arr[0]) / n1 + (1 - alpha) * t)))
        return max(_rel_norm(tt.grad, central_fd(f_t, t)),
                   _rel_norm([lt.grad, ht.grad], central_fd(f_r, arr)))

    run("fake_quant_ste", lambda: quant_case(1.0))
    run("alpha_blend_quant", lambda: quant_case(float(rng.uniform(0.05, 0.95))))

    def composite():
        net = NetworkGraph((4,), [LayerSpec("dense", units=5), LayerSpec("activation", fn="mix"),
                                  LayerSpec("output", units=3)], init_seed=int(rng.integers(1000)))
        net.gvs.A_g.data[:] = u(2)
        net.gvs.th_g.data[...] = rng.uniform(-0.5, 0.5)
        x, y = u(4, 4), rng.integers(0, 3, 4)
        cfg = tr.LossConfig(0.01, 0.02, tr.ConstraintConfig(0.5))
        ws = [net.weight(i) for i in net.trainable_indices()]
        masks = [np.ones(w.shape, bool) for w in ws]
        leaves = ws + [net.bias(i) for i in net.trainable_indices()] + [net.gvs.A_g, net.gvs.th_g]
        for t in leaves:
            t.requires_grad = True

        def value():
            with T.no_grad():
                return tr.total_loss(T.softmax_crossentropy(nn.forward(net, x, "float"), y),
                                     ws, cfg, 5, masks).item()

        tr.total_loss(T.softmax_crossentropy(nn.forward(net, x, "float"), y), ws, cfg, 5, masks).backward()
        return max(_rel_norm(t.grad, central_fd(value, t.data)) for t in leaves)

    run("composite loss", composite, 1e-3)
    bad = {k: v for k, v in worst.items() if v[0] >= v[1]}
    dt = time.perf_counter() - t0
    top = sorted(worst.items(), key=lambda kv: -kv[1][0])[:3]
    detail = (f"{len(worst)} ops x 100 points, {dt:.1f} s; largest errors "
              + ", ".join(f"{k} {v[0]:.1e}" for k, v in top))
    if bad:
        detail += "; over tolerance: " + ", ".join(bad)
    record(4, not bad, detail)
    assert not bad


# 5 -----------------------------------------------------------------------------

def _deep_har(depth, quant_mode, seed=0):
    layers = [LayerSpec("flatten")]
    for d in range(depth):
        layers += [LayerSpec("dense", f"fc{d}", units=32), LayerSpec("activation", fn="relu")]
    layers.append(LayerSpec("output", "out", units=12))
    gvs, out = make_sets(bits_w=4, bits_x=4)
    return NetworkGraph((9, 100), layers, gvs, out, quant_mode, init_seed=seed)


def test_criterion_5_global_quantization():
    ds = synth_har(seed=5, n=600, noise=1.0)
    train = ds.split("train")
    cfg = tr.TrainConfig(steps=200, eval_every=10 ** 9, loss=tr.LossConfig(constraint=tr.ConstraintConfig(0.0)))
    glob_counts, per_counts, grids_same = [], [], True
    for depth in (1, 2, 3, 4):
        g = _deep_har(depth, "global")
        tr.train(g, train, cfg)
        tr.finalize(g)
        glob_counts.append(nn.distinct_hidden_weights(g))
        for kind in ("W", "X", "Y", "B"):
            grids = nn.hidden_grids(g, kind)
            grids_same &= all(x == grids[0] for x in grids)
        p = _deep_har(depth, "per_layer")
        tr.train(p, train, cfg)
        tr.finalize(p)
        per_counts.append(nn.distinct_hidden_weights(p))
    monotone = all(b >= a for a, b in zip(per_counts, per_counts[1:])) and per_counts[-1] > 16
    ok = max(glob_counts) <= 16 and grids_same and monotone
    record(5, ok, f"global distinct hidden weights by depth 1-4 {glob_counts} (<= 16), identical grids "
                  f"{grids_same}; per-layer baseline {per_counts} (monotone growth {monotone})")
    assert ok


# 6 -----------------------------------------------------------------------------

def test_criterion_6_unipolar_har():
    t0 = time.perf_counter()
    ds = synth_har(seed=0, n=1200, noise=1.0)
    (xt, yt), (xv, yv) = ds.split("train"), ds.split("val")
    steps = 1500
    fnet = nn.build_reference("har")
    tr.train(fnet, (xt, yt), tr.TrainConfig(steps=steps, quantized=False, eval_every=10 ** 9))
    float_acc = nn.accuracy(fnet, xv, yv, "float")
    unet = nn.build_reference("har", polarity="unipolar", bits_w=2)
    cfg = tr.TrainConfig(steps=steps, eval_every=10 ** 9,
                         loss=tr.LossConfig(constraint=tr.ConstraintConfig(start_step=int(0.3 * steps))))
    tr.train(unet, (xt, yt), cfg)
    tr.finalize(unet)
    uni_acc = nn.accuracy(unet, xv, yv)
    nonneg = all(np.all(nn.quantized_weights(unet, i) >= 0) and np.all(unet.weight(i).data >= 0)
                 for i in unet.trainable_indices())
    dt = time.perf_counter() - t0
    ok = nonneg and float_acc >= 0.95 and uni_acc >= 0.85 and float_acc - uni_acc <= 0.10 and dt < 600
    record(6, ok, f"float {float_acc:.2%}, unipolar 2-bit {uni_acc:.2%}, all weights >= 0 {nonneg}, "
                  f"{dt:.0f} s")
    assert ok


# 7 -----------------------------------------------------------------------------

FRACTIONS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]


def test_criterion_7_fraction_sweep_structure():
    rng = np.random.default_rng(7)
    areas, reads, cols = [], [], []
    for p in FRACTIONS:
        net = nn.build_reference("cifar10", polarity="fractional", fraction=p)
        tr.calibrate_ranges(net, rng.uniform(0, 1, (2, 32, 32, 3)))
        tr.project_unipolar(net)
        dep = xb.build_deployment(net)
        rep = cm.area_estimate(dep, dac_bits=4, adc_bits=4)
        cols.append(sum(t.used_columns for t in dep.tiles))
        areas.append(rep.area_parts["nvm"])
        reads.append(cm.count_ops(net).nvm_reads)
    monotone = all(b <= a for a, b in zip(areas, areas[1:]))
    cut = reads[FRACTIONS.index(0.5)] / reads[0]
    ok = monotone and cut == 0.75
    record("7 (structure)", ok, f"crossbar area {areas[0]:.4f} -> {areas[-1]:.4f} mm2 monotone {monotone} "
                                f"(occupied columns {cols[0]} -> {cols[-1]}); "
                                f"read energy at fraction 0.5 is {cut:.4f} of bipolar (-{1 - cut:.0%})")
    assert ok


def _cifar_dir():
    root = os.environ.get("CIMTRAIN_DATA", "")
    d = os.path.join(root, "cifar-10-batches-bin")
    return d if root and os.path.exists(os.path.join(d, "data_batch_1.bin")) else None


@pytest.mark.slow
def test_criterion_7_fraction_sweep_accuracy(tmp_path):
    d = _cifar_dir()
    if d is None:
        record("7 (accuracy)", None, "CIFAR-10 binary batches not found under $CIMTRAIN_DATA; "
                                     "accuracy parts not evaluated")
        pytest.skip("CIFAR-10 data not available")
    from cimtrain import cli
    t0 = time.perf_counter()
    base = dict(network="cifar10", dataset="cifar10", data_path=d, subset=10000, test_subset=2000,
                steps=3000, batch_size=32)
    cfg = cli.ExperimentConfig.from_dict(base)
    rows, _ = cli.run_sweep(cfg, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], str(tmp_path / "sweep"))
    acc = {r["fraction"]: r["accuracy"] for r in rows}
    areas = [r["crossbar_area"] for r in rows]
    _, ref = cli.run_training(cli.ExperimentConfig.from_dict({**base, "quant_mode": "per_layer"}),
                              str(tmp_path / "per_layer"))
    monotone_area = all(b <= a for a, b in zip(areas, areas[1:]))
    tail = [acc[p] for p in (0.6, 0.8, 1.0)]
    non_increasing = all(b <= a for a, b in zip(tail, tail[1:]))
    gap = ref["val_accuracy"] - acc[0.0]
    dt = time.perf_counter() - t0
    ok = monotone_area and non_increasing and gap <= 0.03 and dt < 3600
    record("7 (accuracy)", ok, f"accuracy by fraction {acc}; per-layer baseline {ref['val_accuracy']:.2%} "
                               f"(gap {gap:+.2%}); area monotone {monotone_area}; {dt / 60:.0f} min")
    assert ok


# 8 -----------------------------------------------------------------------------

def test_criterion_8_count_ops_oracle():
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(200):
        net, _ = random_net(rng, calibrate=False)
        scheme = rng.choice([None, "bipolar", "unipolar", "fractional"])
        frac = float(rng.uniform(0, 1)) if scheme == "fractional" else None
        bad += cm.count_ops(net, scheme, frac) != brute_force_ops(net, scheme, frac)
    dt = time.perf_counter() - t0
    record(8, bad == 0, f"200 random architectures, {bad} disagreements, {dt:.1f} s")
    assert bad == 0
