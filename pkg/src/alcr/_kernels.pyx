# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrent-scan and edit-distance kernels.

Same signatures and results as ``alcr._fallback``; the per-step matrix
products go through BLAS dgemm and the gate arithmetic is fused into one
loop per step.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) noexcept nogil:
    # exp overflow gives inf and a clean 0.0
    return 1.0 / (1.0 + exp(-x))


cdef inline double _tanh(double x) noexcept nogil:
    return 2.0 * _sig(2.0 * x) - 1.0


cdef void _gemm_rm(int rows, int inner, int cols, double *a, double *b,
                   double *c, double beta, bint trans_b) noexcept nogil:
    # row-major c[rows, cols] = a[rows, inner] @ (b or b.T) + beta * c
    cdef double alpha = 1.0
    cdef char ta = b'N'
    cdef char tb = b'N'
    cdef int ldb
    if trans_b:
        ta = b'T'
        ldb = inner
    else:
        ldb = cols
    dgemm(&ta, &tb, &cols, &rows, &inner, &alpha, b, &ldb, a, &inner, &beta, c, &cols)


def gru_scan_forward(xg_, h0_, w_h_, b_h_, mask_):
    cdef double[:, :, ::1] xg = np.ascontiguousarray(xg_, dtype=np.float64)
    cdef double[:, ::1] w_h = np.ascontiguousarray(w_h_, dtype=np.float64)
    cdef double[::1] b_h = np.ascontiguousarray(b_h_, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_, dtype=np.float64)
    cdef int batch = xg.shape[0], steps = xg.shape[1], size = xg.shape[2] // 3
    hs_ = np.empty((batch, steps, size))
    r_ = np.empty((batch, steps, size))
    z_ = np.empty((batch, steps, size))
    n_ = np.empty((batch, steps, size))
    hn_ = np.empty((batch, steps, size))
    cdef double[:, :, ::1] hs = hs_, r = r_, z = z_, n = n_, hn = hn_
    cdef double[:, ::1] h = np.array(h0_, dtype=np.float64, order="C")
    cdef double[:, ::1] hg = np.empty((batch, 3 * size))
    cdef int b, t, k
    cdef double m, rt, zt, nt, hnt, hnew
    with nogil:
        for t in range(steps):
            _gemm_rm(batch, size, 3 * size, &h[0, 0], &w_h[0, 0], &hg[0, 0], 0.0, False)
            for b in range(batch):
                m = mask[b, t]
                for k in range(size):
                    rt = _sig(xg[b, t, k] + hg[b, k] + b_h[k])
                    zt = _sig(xg[b, t, size + k] + hg[b, size + k] + b_h[size + k])
                    hnt = hg[b, 2 * size + k] + b_h[2 * size + k]
                    nt = _tanh(xg[b, t, 2 * size + k] + rt * hnt)
                    hnew = (1.0 - zt) * nt + zt * h[b, k]
                    h[b, k] = m * hnew + (1.0 - m) * h[b, k]
                    hs[b, t, k] = h[b, k]
                    r[b, t, k] = rt
                    z[b, t, k] = zt
                    n[b, t, k] = nt
                    hn[b, t, k] = hnt
    return hs_, (r_, z_, n_, hn_)


def gru_scan_backward(dhs_, xg_, h0_, w_h_, mask_, hs_, cache):
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhs_, dtype=np.float64)
    cdef double[:, ::1] h0 = np.ascontiguousarray(h0_, dtype=np.float64)
    cdef double[:, ::1] w_h = np.ascontiguousarray(w_h_, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_, dtype=np.float64)
    cdef double[:, :, ::1] r = cache[0], z = cache[1], n = cache[2], hn = cache[3]
    cdef int batch = hs.shape[0], steps = hs.shape[1], size = hs.shape[2]
    dxg_ = np.empty((batch, steps, 3 * size))
    dhg_all_ = np.empty((batch, steps, 3 * size))
    dh_ = np.zeros((batch, size))
    cdef double[:, :, ::1] dxg = dxg_, dhg_all = dhg_all_
    cdef double[:, ::1] dh = dh_
    cdef double[:, ::1] dhg = np.empty((batch, 3 * size))
    cdef double[:, ::1] carry = np.empty((batch, size))
    cdef int b, t, k
    cdef double m, g, hp, rt, zt, nt, dan, dar, daz
    with nogil:
        for t in range(steps - 1, -1, -1):
            for b in range(batch):
                m = mask[b, t]
                for k in range(size):
                    hp = hs[b, t - 1, k] if t > 0 else h0[b, k]
                    g = (dh[b, k] + dhs[b, t, k]) * m
                    rt = r[b, t, k]
                    zt = z[b, t, k]
                    nt = n[b, t, k]
                    dan = g * (1.0 - zt) * (1.0 - nt * nt)
                    dar = dan * hn[b, t, k] * rt * (1.0 - rt)
                    daz = g * (hp - nt) * zt * (1.0 - zt)
                    dxg[b, t, k] = dar
                    dxg[b, t, size + k] = daz
                    dxg[b, t, 2 * size + k] = dan
                    dhg[b, k] = dar
                    dhg[b, size + k] = daz
                    dhg[b, 2 * size + k] = dan * rt
                    dhg_all[b, t, k] = dar
                    dhg_all[b, t, size + k] = daz
                    dhg_all[b, t, 2 * size + k] = dan * rt
                    carry[b, k] = (dh[b, k] + dhs[b, t, k]) * (1.0 - m) + g * zt
            # dh = carry + dhg @ w_h.T
            for b in range(batch):
                for k in range(size):
                    dh[b, k] = carry[b, k]
            _gemm_rm(batch, 3 * size, size, &dhg[0, 0], &w_h[0, 0], &dh[0, 0], 1.0, True)
    h_prev_all = np.concatenate([np.asarray(h0)[:, None], np.asarray(hs)[:, :-1]], axis=1)
    dw = h_prev_all.reshape(-1, size).T @ dhg_all_.reshape(-1, 3 * size)
    db = dhg_all_.sum(axis=(0, 1))
    return dxg_, dh_, dw, db


def edit_distance(a, b):
    ids = {}
    x_ = np.asarray([ids.setdefault(c, len(ids)) for c in a], dtype=np.int64)
    y_ = np.asarray([ids.setdefault(c, len(ids)) for c in b], dtype=np.int64)
    if x_.shape[0] < y_.shape[0]:
        x_, y_ = y_, x_
    cdef long[::1] x = x_, y = y_
    cdef int nx = x.shape[0], ny = y.shape[0], i, j
    cdef long best, cand
    buf_ = np.empty((2, ny + 1), dtype=np.int64)
    cdef long[:, ::1] buf = buf_
    cdef long *prev = &buf[0, 0]
    cdef long *cur = &buf[1, 0]
    cdef long *tmp
    with nogil:
        for j in range(ny + 1):
            prev[j] = j
        for i in range(1, nx + 1):
            cur[0] = i
            for j in range(1, ny + 1):
                best = prev[j] + 1
                cand = cur[j - 1] + 1
                if cand < best:
                    best = cand
                cand = prev[j - 1] + (0 if x[i - 1] == y[j - 1] else 1)
                if cand < best:
                    best = cand
                cur[j] = best
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[ny])
