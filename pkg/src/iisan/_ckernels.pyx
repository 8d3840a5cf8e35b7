# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled counterparts of the kernels in ``_pykernels``. float64 only."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


cdef inline double _tanh(double u) nogil:
    # libm tanh is several times slower than exp on common targets
    if u > 20.0:
        return 1.0
    if u < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


def layernorm_forward(const double[:, ::1] x, const double[::1] gamma,
                      const double[::1] beta, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    y_arr = np.empty((m, n), dtype=np.float64)
    xhat_arr = np.empty((m, n), dtype=np.float64)
    rstd_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    with nogil:
        for i in range(m):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                d = (x[i, j] - mean) * r
                xhat[i, j] = d
                y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t m = gy.shape[0], n = gy.shape[1], i, j
    gx_arr = np.empty((m, n), dtype=np.float64)
    gg_arr = np.zeros(n, dtype=np.float64)
    gb_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, g
    with nogil:
        for i in range(m):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                g = gy[i, j]
                gg[j] += g * xhat[i, j]
                gb[j] += g
                g = g * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
            m1 /= n
            m2 /= n
            for j in range(n):
                gx[i, j] = (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def gelu_forward(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_K * v * v * v)))
    return out_arr


def gelu_backward(const double[::1] x, const double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(GELU_C * (v + GELU_K * v * v * v))
            out[i] = gy[i] * (0.5 * (1.0 + t)
                              + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out_arr


def debiased_ce(const double[:, :, ::1] scores, const double[::1] logp,
                const long[:, ::1] targets, const unsigned char[:, ::1] valid,
                const unsigned char[:, ::1] admit):
    cdef Py_ssize_t B = scores.shape[0], P = scores.shape[1], C = scores.shape[2]
    cdef Py_ssize_t u, p, c, t
    grad_arr = np.zeros((B, P, C), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef double top, z, denom, total = 0.0
    cdef long count = 0
    with nogil:
        for u in range(B):
            for p in range(P):
                if not valid[u, p]:
                    continue
                t = targets[u, p]
                top = -INFINITY
                for c in range(C):
                    if c == t or admit[u, c]:
                        z = scores[u, p, c] - logp[c]
                        if z > top:
                            top = z
                denom = 0.0
                for c in range(C):
                    if c == t or admit[u, c]:
                        z = exp(scores[u, p, c] - logp[c] - top)
                        grad[u, p, c] = z
                        denom += z
                for c in range(C):
                    grad[u, p, c] /= denom
                grad[u, p, t] -= 1.0
                total += log(denom) + top - (scores[u, p, t] - logp[t])
                count += 1
    return total, count, grad_arr


def rank_targets(const double[:, ::1] scores, const long[::1] targets):
    cdef Py_ssize_t U = scores.shape[0], V = scores.shape[1], u, c, t
    ranks_arr = np.empty(U, dtype=np.int64)
    cdef long[::1] ranks = ranks_arr
    cdef double st, s
    cdef long r
    with nogil:
        for u in range(U):
            t = targets[u]
            st = scores[u, t]
            r = 1
            for c in range(V):
                s = scores[u, c]
                if s > st or (s == st and c < t):
                    r += 1
            ranks[u] = r
    return ranks_arr
