# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

Function-for-function mirror of ``_kernels_py``.  The softmax uses the
same max-shift, qh is accumulated as sum_t alpha_t (q . e_t), and
``substitution_scores`` produces its final dot product via np.dot on
the pooled vector so it is bit-identical to pool() + np.dot within
this backend.  Callers guarantee float64 C-contiguous arrays, int64
ids, and in-range indices.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _attn(const double[:, ::1] E, const double[::1] w, double scale,
                const cnp.int64_t[::1] ids, double[::1] a) noexcept nogil:
    cdef Py_ssize_t T = ids.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    cdef Py_ssize_t t, j
    cdef double s, smax, tot
    for t in range(T):
        s = 0.0
        for j in range(D):
            s += E[ids[t], j] * w[j]
        a[t] = s * scale
    smax = a[0]
    for t in range(1, T):
        if a[t] > smax:
            smax = a[t]
    tot = 0.0
    for t in range(T):
        a[t] = exp(a[t] - smax)
        tot += a[t]
    for t in range(T):
        a[t] /= tot


cdef void _pool(const double[:, ::1] E, const double[::1] w, double scale,
                const cnp.int64_t[::1] ids, double[::1] a,
                double[::1] h) noexcept nogil:
    cdef Py_ssize_t T = ids.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    cdef Py_ssize_t t, j
    _attn(E, w, scale, ids, a)
    for j in range(D):
        h[j] = 0.0
    for t in range(T):
        for j in range(D):
            h[j] += a[t] * E[ids[t], j]


def pool(E, w, double scale, ids):
    E = np.ascontiguousarray(E, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t T = ids.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    a_arr = np.empty(T, dtype=np.float64)
    h_arr = np.empty(D, dtype=np.float64)
    cdef const double[:, ::1] Ev = E
    cdef const double[::1] wv = w
    cdef const cnp.int64_t[::1] iv = ids
    cdef double[::1] av = a_arr
    cdef double[::1] hv = h_arr
    with nogil:
        _pool(Ev, wv, scale, iv, av, hv)
    return h_arr, a_arr


def grad_norms(E, w, double scale, ids, q):
    E = np.ascontiguousarray(E, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t T = ids.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    a_arr = np.empty(T, dtype=np.float64)
    qe_arr = np.empty(T, dtype=np.float64)
    out = np.empty(T, dtype=np.float64)
    cdef const double[:, ::1] Ev = E
    cdef const double[::1] wv = w
    cdef const double[::1] qv = q
    cdef const cnp.int64_t[::1] iv = ids
    cdef double[::1] av = a_arr
    cdef double[::1] qe = qe_arr
    cdef double[::1] ov = out
    cdef Py_ssize_t t, j
    cdef double qh, c, qq, ww, qw, sq
    with nogil:
        _attn(Ev, wv, scale, iv, av)
        for t in range(T):
            c = 0.0
            for j in range(D):
                c += Ev[iv[t], j] * qv[j]
            qe[t] = c
        qh = 0.0
        for t in range(T):
            qh += av[t] * qe[t]
        qq = 0.0
        ww = 0.0
        qw = 0.0
        for j in range(D):
            qq += qv[j] * qv[j]
            ww += wv[j] * wv[j]
            qw += qv[j] * wv[j]
        for t in range(T):
            c = av[t] * (qe[t] - qh) * scale
            sq = av[t] * av[t] * qq + 2.0 * av[t] * c * qw + c * c * ww
            if sq < 0.0:
                sq = 0.0
            ov[t] = sqrt(sq)
    return out


def grad_at(E, w, double scale, ids, q, Py_ssize_t pos):
    E = np.ascontiguousarray(E, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t T = ids.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    a_arr = np.empty(T, dtype=np.float64)
    out = np.empty(D, dtype=np.float64)
    cdef const double[:, ::1] Ev = E
    cdef const double[::1] wv = w
    cdef const double[::1] qv = q
    cdef const cnp.int64_t[::1] iv = ids
    cdef double[::1] av = a_arr
    cdef double[::1] ov = out
    cdef Py_ssize_t t, j
    cdef double qh, c, qp
    with nogil:
        _attn(Ev, wv, scale, iv, av)
        qh = 0.0
        for t in range(T):
            c = 0.0
            for j in range(D):
                c += Ev[iv[t], j] * qv[j]
            qh += av[t] * c
        qp = 0.0
        for j in range(D):
            qp += Ev[iv[pos], j] * qv[j]
        c = av[pos] * (qp - qh) * scale
        for j in range(D):
            ov[j] = av[pos] * qv[j] + c * wv[j]
    return out


def substitution_scores(E, w, double scale, ids, Py_ssize_t pos, cand, q):
    E = np.ascontiguousarray(E, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    work = np.array(ids, dtype=np.int64, copy=True)
    cdef Py_ssize_t T = work.shape[0]
    cdef Py_ssize_t D = E.shape[1]
    cdef Py_ssize_t C = cand.shape[0]
    a_arr = np.empty(T, dtype=np.float64)
    h_arr = np.empty(D, dtype=np.float64)
    out = np.empty(C, dtype=np.float64)
    cdef const double[:, ::1] Ev = E
    cdef const double[::1] wv = w
    cdef const cnp.int64_t[::1] cv = cand
    cdef cnp.int64_t[::1] wk = work
    cdef double[::1] av = a_arr
    cdef double[::1] hv = h_arr
    cdef Py_ssize_t i
    for i in range(C):
        wk[pos] = cv[i]
        with nogil:
            _pool(Ev, wv, scale, wk, av, hv)
        # np.dot keeps the objective bit-identical to the pool() path
        out[i] = float(np.dot(q, h_arr))
    return out
