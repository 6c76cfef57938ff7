"""Kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions from ``_kernels_py`` are used. Set ``CIMTRAIN_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("CIMTRAIN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"


def im2col(xpad, kh, kw, stride):
    return _impl.im2col(np.ascontiguousarray(xpad, dtype=np.float64), kh, kw, stride)


def col2im(cols, n, hp, wp, c, kh, kw, stride):
    return _impl.col2im(cols, n, hp, wp, c, kh, kw, stride)


def fake_quant(t, nudged_min, nudged_max, scale, zero_point):
    return _impl.fake_quant(np.asarray(t, dtype=np.float64), float(nudged_min),
                            float(nudged_max), float(scale), float(zero_point))


def maxpool2x2(x):
    return _impl.maxpool2x2(np.ascontiguousarray(x, dtype=np.float64))


def maxpool2x2_backward(grad, arg, h, w):
    return _impl.maxpool2x2_backward(grad, arg, h, w)
