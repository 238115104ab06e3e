# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused row softmax, GELU, and the AdamW update.

Mirrors `_kernels_py` exactly; `backend` picks whichever is importable.
"""

import numpy as np

from libc.math cimport erf, exp, sqrt

NAME = "compiled"

ctypedef fused floating:
    float
    double

cdef double _INV_SQRT2 = 0.7071067811865475244
cdef double _INV_SQRT2PI = 0.3989422804014326779


cdef void _softmax_rows(floating[:, ::1] z, floating[:, ::1] out,
                        double inv_tau) nogil:
    cdef Py_ssize_t r, c, rows = z.shape[0], cols = z.shape[1]
    cdef double mx, s, v
    for r in range(rows):
        mx = z[r, 0] * inv_tau
        for c in range(1, cols):
            v = z[r, c] * inv_tau
            if v > mx:
                mx = v
        s = 0.0
        for c in range(cols):
            v = exp(z[r, c] * inv_tau - mx)
            out[r, c] = <floating> v
            s += v
        for c in range(cols):
            out[r, c] = <floating> (out[r, c] / s)


def softmax_forward(x, double inv_tau):
    """Row softmax over the last axis of `x`, logits scaled by `inv_tau`."""
    arr = np.ascontiguousarray(x)
    out = np.empty_like(arr)
    # Positive index: wraparound is disabled module-wide.
    cols = arr.shape[arr.ndim - 1]
    flat = arr.reshape(-1, cols)
    oflat = out.reshape(-1, cols)
    cdef double[:, ::1] xd, od
    cdef float[:, ::1] xf, of
    if arr.dtype == np.float64:
        xd = flat
        od = oflat
        _softmax_rows(xd, od, inv_tau)
    elif arr.dtype == np.float32:
        xf = flat
        of = oflat
        _softmax_rows(xf, of, inv_tau)
    else:
        raise TypeError(f"softmax_forward: unsupported dtype {arr.dtype}")
    return out


cdef void _softmax_bw_rows(floating[:, ::1] y, floating[:, ::1] gy,
                           floating[:, ::1] out, double inv_tau) nogil:
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * gy[r, c]
        for c in range(cols):
            out[r, c] = <floating> ((y[r, c] * (gy[r, c] - dot)) * inv_tau)


def softmax_backward(y, gy, double inv_tau):
    ya = np.ascontiguousarray(y)
    ga = np.ascontiguousarray(gy, dtype=ya.dtype)
    out = np.empty_like(ya)
    cols = ya.shape[ya.ndim - 1]
    yf2 = ya.reshape(-1, cols)
    gf2 = ga.reshape(-1, cols)
    of2 = out.reshape(-1, cols)
    cdef double[:, ::1] yd, gd, od
    cdef float[:, ::1] yf, gf, of
    if ya.dtype == np.float64:
        yd = yf2
        gd = gf2
        od = of2
        _softmax_bw_rows(yd, gd, od, inv_tau)
    elif ya.dtype == np.float32:
        yf = yf2
        gf = gf2
        of = of2
        _softmax_bw_rows(yf, gf, of, inv_tau)
    else:
        raise TypeError(f"softmax_backward: unsupported dtype {ya.dtype}")
    return out


cdef void _gelu_fw(floating[::1] x, floating[::1] out) nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <floating> (0.5 * v * (1.0 + erf(v * _INV_SQRT2)))


def gelu_forward(x):
    arr = np.ascontiguousarray(x)
    out = np.empty_like(arr)
    xr = arr.reshape(-1)
    orr = out.reshape(-1)
    cdef double[::1] xd, od
    cdef float[::1] xf, of
    if arr.dtype == np.float64:
        xd = xr
        od = orr
        _gelu_fw(xd, od)
    elif arr.dtype == np.float32:
        xf = xr
        of = orr
        _gelu_fw(xf, of)
    else:
        raise TypeError(f"gelu_forward: unsupported dtype {arr.dtype}")
    return out


cdef void _gelu_bw(floating[::1] x, floating[::1] gy, floating[::1] out) nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = exp(-0.5 * v * v) * _INV_SQRT2PI
        out[i] = <floating> (gy[i] * (cdf + v * pdf))


def gelu_backward(x, gy):
    arr = np.ascontiguousarray(x)
    ga = np.ascontiguousarray(gy, dtype=arr.dtype)
    out = np.empty_like(arr)
    xr = arr.reshape(-1)
    gr = ga.reshape(-1)
    orr = out.reshape(-1)
    cdef double[::1] xd, gd, od
    cdef float[::1] xf, gf, of
    if arr.dtype == np.float64:
        xd = xr
        gd = gr
        od = orr
        _gelu_bw(xd, gd, od)
    elif arr.dtype == np.float32:
        xf = xr
        gf = gr
        of = orr
        _gelu_bw(xf, gf, of)
    else:
        raise TypeError(f"gelu_backward: unsupported dtype {arr.dtype}")
    return out


cdef void _adamw(floating[::1] p, floating[::1] g, floating[::1] m,
                 floating[::1] v, double lr, double beta1, double beta2,
                 double eps, double wd, double bc1, double bc2) nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = <floating> mi
        v[i] = <floating> vi
        if wd != 0.0:
            p[i] = <floating> (p[i] * (1.0 - lr * wd))
        p[i] = <floating> (p[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def adamw_update(param, grad, m, v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, long step):
    """One decoupled-weight-decay Adam step, in place on param/m/v."""
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    pr = param.reshape(-1)
    gr = np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1)
    mr = m.reshape(-1)
    vr = v.reshape(-1)
    cdef double[::1] pd, gd, md, vd
    cdef float[::1] pf, gf, mf, vf
    if param.dtype == np.float64:
        pd = pr
        gd = gr
        md = mr
        vd = vr
        _adamw(pd, gd, md, vd, lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    elif param.dtype == np.float32:
        pf = pr
        gf = gr
        mf = mr
        vf = vr
        _adamw(pf, gf, mf, vf, lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    else:
        raise TypeError(f"adamw_update: unsupported dtype {param.dtype}")
