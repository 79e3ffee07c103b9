# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the window-MLP policy.

Same contract as ``ltelab._pykernels``; see that module for the parameter
layout.  All loops run in a fixed order so results are reproducible.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh

cnp.import_array()


cdef inline void _slot_table(const double[::1] theta, int W, int d, int V, int H,
                             double[:, :, ::1] T) noexcept nogil:
    cdef Py_ssize_t j, v, k, h
    cdef Py_ssize_t oW1 = V * d
    cdef double e
    for j in range(W):
        for v in range(V):
            for h in range(H):
                T[j, v, h] = 0.0
            for k in range(d):
                e = theta[v * d + k]
                for h in range(H):
                    T[j, v, h] += e * theta[oW1 + (j * d + k) * H + h]


cdef inline double _hidden_logits(const double[::1] theta, int W, int d, int V, int H,
                                  double[:, :, ::1] T, const cnp.int64_t* win,
                                  double* hbuf, double* zbuf) noexcept nogil:
    """Fill hidden and logits for one window; return log-sum-exp of the logits."""
    cdef Py_ssize_t j, h, v
    cdef Py_ssize_t ob1 = V * d + W * d * H
    cdef Py_ssize_t oW2 = ob1 + H
    cdef Py_ssize_t ob2 = oW2 + H * V
    cdef double a, zmax, s
    for h in range(H):
        a = theta[ob1 + h]
        for j in range(W):
            a += T[j, win[j], h]
        hbuf[h] = tanh(a)
    for v in range(V):
        zbuf[v] = theta[ob2 + v]
    for h in range(H):
        a = hbuf[h]
        for v in range(V):
            zbuf[v] += a * theta[oW2 + h * V + v]
    zmax = zbuf[0]
    for v in range(1, V):
        if zbuf[v] > zmax:
            zmax = zbuf[v]
    s = 0.0
    for v in range(V):
        s += exp(zbuf[v] - zmax)
    return zmax + log(s)


def param_count(int W, int d, int V, int H):
    return V * d + W * d * H + H + H * V + V


def forward(const double[::1] theta, int W, int d, int V, int H, windows):
    cdef const cnp.int64_t[:, ::1] win = np.ascontiguousarray(windows, dtype=np.int64)
    cdef Py_ssize_t N = win.shape[0]
    hidden_arr = np.empty((N, H))
    logp_arr = np.empty((N, V))
    cdef double[:, ::1] hid = hidden_arr
    cdef double[:, ::1] lp = logp_arr
    cdef double[:, :, ::1] T = np.empty((W, V, H))
    cdef Py_ssize_t n, v
    cdef double lse
    with nogil:
        _slot_table(theta, W, d, V, H, T)
        for n in range(N):
            lse = _hidden_logits(theta, W, d, V, H, T, &win[n, 0], &hid[n, 0], &lp[n, 0])
            for v in range(V):
                lp[n, v] = lp[n, v] - lse
    return hidden_arr, logp_arr


def backward(const double[::1] theta, int W, int d, int V, int H, windows,
             const double[:, ::1] hidden, const double[:, ::1] dlogits):
    cdef const cnp.int64_t[:, ::1] win = np.ascontiguousarray(windows, dtype=np.int64)
    cdef Py_ssize_t N = win.shape[0]
    cdef Py_ssize_t oW1 = V * d
    cdef Py_ssize_t ob1 = oW1 + W * d * H
    cdef Py_ssize_t oW2 = ob1 + H
    cdef Py_ssize_t ob2 = oW2 + H * V
    grad_arr = np.zeros(theta.shape[0])
    cdef double[::1] g = grad_arr
    cdef double[:, :, ::1] dT = np.zeros((W, V, H))
    cdef double[::1] da = np.empty(H)
    cdef Py_ssize_t n, h, v, j, k, t
    cdef double acc, hv, dz
    with nogil:
        for n in range(N):
            for v in range(V):
                g[ob2 + v] += dlogits[n, v]
            for h in range(H):
                hv = hidden[n, h]
                acc = 0.0
                for v in range(V):
                    dz = dlogits[n, v]
                    g[oW2 + h * V + v] += hv * dz
                    acc += dz * theta[oW2 + h * V + v]
                da[h] = acc * (1.0 - hv * hv)
                g[ob1 + h] += da[h]
            for j in range(W):
                t = win[n, j]
                for h in range(H):
                    dT[j, t, h] += da[h]
        for j in range(W):
            for v in range(V):
                for k in range(d):
                    acc = 0.0
                    for h in range(H):
                        dz = dT[j, v, h]
                        g[oW1 + (j * d + k) * H + h] += theta[v * d + k] * dz
                        acc += dz * theta[oW1 + (j * d + k) * H + h]
                    g[v * d + k] += acc
    return grad_arr


cdef inline void _sort_desc(const double* key, Py_ssize_t* order, Py_ssize_t V) noexcept nogil:
    """Stable insertion sort of indices by descending key."""
    cdef Py_ssize_t i, j, cur
    for i in range(V):
        order[i] = i
    for i in range(1, V):
        cur = order[i]
        j = i - 1
        while j >= 0 and key[order[j]] < key[cur]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = cur


def sample(const double[::1] theta, int W, int d, int V, int H, prompts, prompt_offsets,
           const double[:, ::1] uniforms, double temperature, int top_k, double top_p,
           int end_token):
    cdef const cnp.int64_t[::1] pr = np.ascontiguousarray(prompts, dtype=np.int64)
    cdef const cnp.int64_t[::1] off = np.ascontiguousarray(prompt_offsets, dtype=np.int64)
    cdef Py_ssize_t N = uniforms.shape[0]
    cdef Py_ssize_t L = uniforms.shape[1]
    cdef Py_ssize_t P = 0
    cdef Py_ssize_t n, i, t, v, choice, last_kept, pl
    for n in range(N):
        if off[n + 1] - off[n] > P:
            P = off[n + 1] - off[n]
    tokens_arr = np.zeros((N, L), dtype=np.int64)
    logp_arr = np.zeros((N, L))
    lengths_arr = np.zeros(N, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] tok = tokens_arr
    cdef double[:, ::1] lpo = logp_arr
    cdef cnp.int64_t[::1] lens = lengths_arr
    cdef cnp.int64_t[::1] buf = np.zeros(W + P + L, dtype=np.int64)
    cdef double[:, :, ::1] T = np.empty((W, V, H))
    cdef double[::1] hbuf = np.empty(H)
    cdef double[::1] z = np.empty(V)
    cdef double[::1] q = np.empty(V)
    cdef double[::1] qs = np.empty(V)
    cdef Py_ssize_t[::1] order = np.empty(V, dtype=np.intp)
    cdef double lse, zmax, total, cum, before, thresh
    with nogil:
        _slot_table(theta, W, d, V, H, T)
        for n in range(N):
            pl = off[n + 1] - off[n]
            for i in range(W + P + L):
                buf[i] = 0
            for i in range(pl):
                buf[W + P - pl + i] = pr[off[n] + i]
            for t in range(L):
                lse = _hidden_logits(theta, W, d, V, H, T, &buf[P + t], &hbuf[0], &z[0])
                zmax = z[0]
                for v in range(1, V):
                    if z[v] > zmax:
                        zmax = z[v]
                for v in range(V):
                    q[v] = exp((z[v] - zmax) / temperature)
                if 0 < top_k < V:
                    _sort_desc(&z[0], &order[0], V)
                    for i in range(top_k, V):
                        q[order[i]] = 0.0
                if top_p < 1.0:
                    _sort_desc(&q[0], &order[0], V)
                    total = 0.0
                    for i in range(V):
                        qs[i] = q[order[i]]
                        total += qs[i]
                    before = 0.0
                    for i in range(V):
                        cum = before + qs[i]
                        if before >= top_p * total:
                            q[order[i]] = 0.0
                        before = cum
                cum = 0.0
                for v in range(V):
                    cum += q[v]
                thresh = uniforms[n, t] * cum
                cum = 0.0
                choice = 0
                last_kept = 0
                for v in range(V):
                    cum += q[v]
                    if cum <= thresh:
                        choice += 1
                    if q[v] > 0.0:
                        last_kept = v
                if choice > last_kept:
                    choice = last_kept
                buf[W + P + t] = choice
                tok[n, t] = choice
                lpo[n, t] = z[choice] - lse
                lens[n] = t + 1
                if choice == end_token:
                    break
    return tokens_arr, lengths_arr, logp_arr
