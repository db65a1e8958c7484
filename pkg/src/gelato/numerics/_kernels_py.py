"""Pure-numpy implementations of the hot row-wise kernels.

Same call signatures as the compiled extension; all arrays are float64 and
C-contiguous. Matrix products are not here: those go through BLAS in both
backends.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layernorm_bwd(x, mean, rstd, gamma, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gy = g * gamma
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    m1 = gy.mean(axis=1)
    m2 = (gy * xhat).mean(axis=1)
    dx = rstd[:, None] * (gy - m1[:, None] - xhat * m2[:, None])
    return dx, dgamma, dbeta


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(p, g):
    s = (p * g).sum(axis=1, keepdims=True)
    return p * (g - s)


def masked_softmax_fwd(x, limits):
    # Row i is a softmax over columns [0, limits[i]); the rest stay zero.
    mask = np.arange(x.shape[1]) < limits[:, None]
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_bwd(p, limits, g):
    # p is already zero outside each row's limit, so the dense formula holds.
    s = (p * g).sum(axis=1, keepdims=True)
    return p * (g - s)


def rotary(x, cos, sin, sign):
    # Rotates consecutive (even, odd) column pairs; sign -1 inverts (used
    # for the backward pass).
    e = x[:, 0::2]
    o = x[:, 1::2]
    s = sign * sin
    y = np.empty_like(x)
    y[:, 0::2] = e * cos - o * s
    y[:, 1::2] = e * s + o * cos
    return y
