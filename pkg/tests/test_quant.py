import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimtrain import tensor as T
from cimtrain.errors import RangeError
from cimtrain.quant import (GlobalVariableSet, Range, RangePolicy, alpha_blend_quant, ema_range,
                            fake_quant_ste, make_grid, quantize, update_global_ranges)
from conftest import central_fd, rel_err

G4 = make_grid(Range(-1.0, 1.0, 4))


def brute_nearest(t, g):
    levels = g.nudged_min + np.arange(g.levels) * g.scale
    c = np.clip(t, g.nudged_min, g.nudged_max)
    return levels[np.argmin(np.abs(levels - c))]


def test_grid_examples():
    assert abs(G4.scale - 2 / 15) < 1e-15
    assert G4.zero_point == 8
    assert abs(G4.nudged_min + 1.0666666666666667) < 1e-12
    assert abs(G4.nudged_max - 0.9333333333333333) < 1e-12
    g = make_grid(Range(0.0, 1.0, 2))
    assert g.zero_point == 0 and np.allclose(g.values(), [0, 1 / 3, 2 / 3, 1])


@settings(max_examples=200, deadline=None)
@given(lo=st.floats(-10, 0), span=st.floats(1e-3, 20), bits=st.integers(2, 8))
def test_zero_always_on_grid(lo, span, bits):
    hi = lo + span
    if hi < 0:
        return
    g = make_grid(Range(lo, hi, bits))
    assert 0 <= g.zero_point <= g.levels - 1
    assert g.nudged_min == -g.zero_point * g.scale
    assert quantize(np.array([0.0]), g)[0][0] == 0.0
    assert 0.0 in g.values()


def test_degenerate_and_bad_bits():
    with pytest.raises(RangeError):
        make_grid(Range(1.0, 1.0, 4))
    with pytest.raises(RangeError):
        make_grid(Range(-1.0, 1.0, 9))


def test_fake_quant_examples():
    assert abs(quantize(np.array([0.26]), G4)[0][0] - 0.2666666666666667) < 1e-12
    assert quantize(np.array([0.0]), G4)[0][0] == 0.0
    t = T.Tensor(np.array([5.0]), requires_grad=True)
    T.sum_(fake_quant_ste(t, G4)).backward()
    assert t.grad[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.integers(2, 8),
       st.floats(-2, 0), st.floats(0.01, 3))
def test_quantizer_properties(vals, bits, lo, span):
    g = make_grid(Range(lo, max(lo + span, 1e-3), bits))
    t = np.sort(np.array(vals))
    q, _ = quantize(t, g)
    assert np.array_equal(quantize(q, g)[0], q)  # idempotent
    assert np.all(np.diff(q) >= 0)  # monotone
    c = np.clip(t, g.nudged_min, g.nudged_max)
    assert np.all(np.abs(q - c) <= g.scale / 2 + 1e-12)
    assert len(np.unique(q)) <= 2 ** bits
    for v, qv in zip(t, q):
        assert abs(qv - brute_nearest(v, g)) <= 1e-12 or abs(abs(v - qv) - g.scale / 2) < 1e-9


def test_ties_to_even():
    g = make_grid(Range(0.0, 3.0, 2))  # levels 0, 1, 2, 3
    q, _ = quantize(np.array([0.5, 1.5, 2.5]), g)
    assert q.tolist() == [0.0, 2.0, 2.0]


def test_alpha_blend_examples():
    t = T.Tensor(np.array([0.26]))
    assert abs(alpha_blend_quant(t, G4, 0.5).data[0] - 0.2633333333333333) < 1e-12
    x = np.array([0.26, -3.0, 0.7])
    assert np.array_equal(alpha_blend_quant(T.Tensor(x), G4, 1.0).data, fake_quant_ste(T.Tensor(x), G4).data)
    a = T.Tensor(x, requires_grad=True)
    T.sum_(alpha_blend_quant(a, G4, 0.0)).backward()
    assert np.array_equal(a.grad, np.ones(3))
    with pytest.raises(ValueError):
        alpha_blend_quant(t, G4, 1.5)


def _away_from_boundaries(rng, g, n):
    """Points inside the clip range at least a tenth of a step from rounding midpoints."""
    out = []
    while len(out) < n:
        v = rng.uniform(g.nudged_min, g.nudged_max)
        frac = (v - g.nudged_min) / g.scale % 1.0
        if 0.1 < abs(frac - 0.5) < 0.4:
            out.append(v)
    return np.array(out)


def test_ste_gradient_matches_surrogate_fd(rng):
    # Oracle: finite differences of the surrogate the STE differentiates, clamp(t)
    t = np.concatenate([_away_from_boundaries(rng, G4, 50), rng.uniform(1.1, 3, 25),
                        rng.uniform(-3, -1.2, 25)])
    for alpha in (1.0, 0.3):
        a = T.Tensor(t, requires_grad=True)
        T.sum_(alpha_blend_quant(a, G4, alpha)).backward()
        f = lambda: float(np.sum(alpha * np.clip(t, G4.nudged_min, G4.nudged_max) + (1 - alpha) * t))
        assert rel_err(a.grad, central_fd(f, t)) < 1e-4


def test_range_gradients_match_fd(rng):
    # with level indices and zero point held fixed, q = codes * (hi - lo) / (n - 1)
    lo, hi = -0.8, 1.1
    g0 = make_grid(Range(lo, hi, 3))
    t = rng.uniform(-1.5, 1.5, 100)
    codes = quantize(t, g0)[1]
    probe = rng.normal(size=100)
    for alpha in (1.0, 0.6):
        lt = T.Tensor(lo, requires_grad=True)
        ht = T.Tensor(hi, requires_grad=True)
        out = alpha_blend_quant(T.Tensor(t), g0, alpha, lt, ht)
        T.sum_(T.mul(out, T.Tensor(probe))).backward()
        arr = np.array([lo, hi])
        f = lambda: float(np.sum(probe * (alpha * codes * (arr[1] - arr[0]) / 7 + (1 - alpha) * t)))
        fd = central_fd(f, arr)
        assert rel_err([lt.grad, ht.grad], fd) < 1e-4


def test_do_q_zero_is_identity(rng):
    from cimtrain import nn
    net = nn.build_reference("har")
    x = rng.normal(size=(3, 9, 100))
    net.gvs.do_q = 0
    assert np.array_equal(nn.forward(net, x, "quantized").data, nn.forward(net, x, "float").data)


def test_ema_examples():
    r = Range(-1.0, 1.0, 4)
    ema_range(r, [{"min": -0.4, "max": 0.2}, {"min": -0.9, "max": 0.5}], 1.0)
    assert (r.min, r.max) == (-1.0, 1.0)
    ema_range(r, [{"min": -0.4, "max": 0.2}, {"min": -0.9, "max": 0.5}], 0.0)
    assert r.min == -0.9 and r.max == 0.5
    r = Range(-1.0, 1.0, 4)
    ema_range(r, [{"min": -0.5, "max": 1.0}], 0.9)
    assert abs(r.min + 0.95) < 1e-12
    with pytest.raises(ValueError):
        ema_range(r, [], 0.9)


def test_gradient_policy_is_noop():
    gvs = GlobalVariableSet.default()
    before = gvs.to_dict()
    update_global_ranges(gvs, {"X": [{"min": -5, "max": 5, "mean": 0, "std": 1}]},
                         RangePolicy("gradient"))
    assert gvs.to_dict() == before


def test_unipolar_set_pins_min():
    gvs = GlobalVariableSet.default(unipolar=True)
    assert gvs.W.min == 0.0
    update_global_ranges(gvs, {"W": [{"min": -0.3, "max": 0.8, "mean": 0, "std": 1}]},
                         RangePolicy("ema", 0.0))
    assert gvs.W.min == 0.0 and gvs.W.max == 0.8


def test_set_round_trip():
    gvs = GlobalVariableSet.default(bits_w=3)
    gvs.A_g.data[:] = [0.25, -1.0]
    back = GlobalVariableSet.from_dict(gvs.to_dict())
    assert back.to_dict() == gvs.to_dict()
