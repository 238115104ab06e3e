"""NumPy fallback for the compiled kernels.

Same math, same operation order as `_kernels.pyx`, so both backends agree to
floating-point roundoff on identical inputs.
"""

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

NAME = "python"


def softmax_forward(x, inv_tau):
    """Row softmax over the last axis of `x`, logits scaled by `inv_tau`."""
    z = x * inv_tau
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_backward(y, gy, inv_tau):
    dot = np.sum(y * gy, axis=-1, keepdims=True)
    return (y * (gy - dot)) * inv_tau


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gy * (cdf + x * pdf)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """One decoupled-weight-decay Adam step, in place on param/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    if weight_decay != 0.0:
        param *= 1.0 - lr * weight_decay
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
