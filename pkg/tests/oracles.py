"""Independent reference implementations used to compute expected values.

Everything here is deliberately naive (scalar loops, direct summation) and
shares no code with the package, so tests compare two independent routes.
"""

import math

import numpy as np


def conv2d_direct(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct-summation cross-correlation oracle (float64, scalar loops)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bn, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    ho = (h + 2 * padding - span_h) // stride + 1
    wo = (wd + 2 * padding - span_w) // stride + 1
    out = np.zeros((bn, o, ho, wo))
    for bi in range(bn):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                r = i * stride + ki * dilation - padding
                                s = j * stride + kj * dilation - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, ci, r, s] * w[oi, ci, ki, kj]
                    out[bi, oi, i, j] = acc
            if b is not None:
                out[bi, oi] += np.asarray(b).reshape(-1)[oi]
    return out


def _lrelu_s(v, slope):
    return v if v >= 0 else slope * v


def dsa_scalar(weights, s0, s1, slope=0.2):
    """Scalar re-implementation of the double-state aggregation module.

    ``weights`` maps w1l..w4r to (c, c, 3, 3) kernels and b1..b4 to length-c
    biases. States are (c, h, w). Same-size zero padding of 1.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    s1 = np.asarray(s1, dtype=np.float64)
    c, h, w = s0.shape

    def pair(wl, wr, bias):
        out = np.zeros((c, h, w))
        for co in range(c):
            for i in range(h):
                for j in range(w):
                    acc = float(bias[co])
                    for ci in range(c):
                        for ki in range(3):
                            for kj in range(3):
                                r, s = i + ki - 1, j + kj - 1
                                if 0 <= r < h and 0 <= s < w:
                                    acc += s0[ci, r, s] * wl[co, ci, ki, kj]
                                    acc += s1[ci, r, s] * wr[co, ci, ki, kj]
                    out[co, i, j] = acc
        return out

    pre = pair(weights["w1l"], weights["w1r"], weights["b1"])
    mod_pos = np.tanh(pair(weights["w2l"], weights["w2r"], weights["b2"]))
    mod_neg = np.tanh(pair(weights["w3l"], weights["w3r"], weights["b3"]))
    gate = 1.0 / (1.0 + np.exp(-pair(weights["w4l"], weights["w4r"], weights["b4"])))
    out = np.zeros((c, h, w))
    for co in range(c):
        for i in range(h):
            for j in range(w):
                e1 = _lrelu_s(pre[co, i, j], slope) * mod_pos[co, i, j]
                e2 = _lrelu_s(-pre[co, i, j], slope) * mod_neg[co, i, j]
                e3 = gate[co, i, j] * math.tanh(s1[co, i, j])
                out[co, i, j] = e1 + e2 + e3
    return out


def ssim_constant_oracle(a, b, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Closed-form SSIM of two constant images: only the luminance term
    differs from 1 (variances and covariance vanish)."""
    c1 = (k1 * dynamic_range) ** 2
    return (2 * a * b + c1) / (a * a + b * b + c1)


def gaussian_kernel_direct(sigma):
    """1-D normalized Gaussian tap values at offsets 0..ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    k /= k.sum()
    return k


def psnr_direct(x, y, peak=1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mse = np.mean((x - y) ** 2)
    return 10.0 * math.log10(peak * peak / mse)
