"""Pure numpy kernels.

These are the reference implementations. ``_ckernels.pyx`` mirrors each
function and must reproduce its output bit for bit; the test suite checks
both against each other.

Layout conventions
------------------
Images are NHWC. ``im2col`` returns a ``(kh*kw*C, N*Ho*Wo)`` matrix: row
``(i*kw + j)*C + c`` holds input channel ``c`` at kernel offset ``(i, j)``,
column ``(n*Ho + y)*Wo + x`` is one output position. The row order is the
C-order flattening of a ``(kh, kw, C, F)`` kernel, so ``kernel.reshape(-1, F)``
lines up with it directly.
"""
import numpy as np


def im2col(xpad, kh, kw, stride):
    n, hp, wp, c = xpad.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xpad[:, i:i + stride * (ho - 1) + 1:stride,
                         j:j + stride * (wo - 1) + 1:stride, :]
            cols[i, j] = patch.transpose(3, 0, 1, 2)
    return cols.reshape(kh * kw * c, n * ho * wo)


def col2im(cols, n, hp, wp, c, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols6 = cols.reshape(kh, kw, c, n, ho, wo)
    out = np.zeros((n, hp, wp, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride, :] += cols6[i, j].transpose(1, 2, 3, 0)
    return out


def fake_quant(t, nudged_min, nudged_max, scale, zero_point):
    """Return ``(values, codes)`` with ``values == codes * scale``.

    ``codes`` are signed level offsets from the zero point, stored as float64.
    """
    clipped = np.minimum(np.maximum(t, nudged_min), nudged_max)
    codes = np.rint((clipped - nudged_min) / scale) - zero_point
    return codes * scale, codes


def maxpool2x2(x):
    """2x2/stride-2 max pooling. Returns ``(out, argmax)``; ties go to the first
    element in row-major window order."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def maxpool2x2_backward(grad, arg, h, w):
    n, ho, wo, c = grad.shape
    scat = np.zeros((n, ho, wo, c, 4), dtype=np.float64)
    np.put_along_axis(scat, arg[..., None], grad[..., None], axis=-1)
    scat = scat.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    out = np.zeros((n, h, w, c), dtype=np.float64)
    out[:, :2 * ho, :2 * wo, :] = scat.reshape(n, 2 * ho, 2 * wo, c)
    return out
