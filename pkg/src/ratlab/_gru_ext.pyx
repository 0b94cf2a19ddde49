# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence (forward scan and BPTT).

Same contract as ``ratlab._gru_py``. Matrix products go through BLAS dgemm on
row-major buffers by treating them as transposed column-major operands.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double v) nogil:
    if v >= 0:
        return 1.0 / (1.0 + exp(-v))
    cdef double e = exp(v)
    return e / (1.0 + e)


cdef void _gemm_rm(char* ta, char* tb, int M, int N, int K, double alpha,
                   double* A, int lda, double* B, int ldb, double beta,
                   double* C, int ldc) nogil:
    # Row-major C(M,N) = op(A) @ op(B): swap operands for column-major BLAS.
    dgemm(tb, ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


def gru_forward(double[:, :, ::1] gx, double[:, ::1] U):
    cdef int B = gx.shape[0], L = gx.shape[1], H3 = gx.shape[2]
    cdef int H = H3 // 3
    hs_a = np.empty((B, L, H))
    z_a = np.empty((B, L, H))
    r_a = np.empty((B, L, H))
    n_a = np.empty((B, L, H))
    cdef double[:, :, ::1] hs = hs_a, z = z_a, r = r_a, n = n_a
    cdef double[:, ::1] h = np.zeros((B, H))
    cdef double[:, ::1] rh = np.zeros((B, H))
    cdef double[:, ::1] a = np.zeros((B, H3))
    cdef int t, b, j
    cdef double zt, rt, nt, hp
    with nogil:
        for t in range(L):
            # a[:, :2H] = h @ U[:, :2H] ; stored in a with row stride 3H
            _gemm_rm(b"N", b"N", B, 2 * H, H, 1.0, &h[0, 0], H, &U[0, 0], H3, 0.0, &a[0, 0], H3)
            for b in range(B):
                for j in range(H):
                    z[b, t, j] = _sig(gx[b, t, j] + a[b, j])
                    rt = _sig(gx[b, t, H + j] + a[b, H + j])
                    r[b, t, j] = rt
                    rh[b, j] = rt * h[b, j]
            _gemm_rm(b"N", b"N", B, H, H, 1.0, &rh[0, 0], H, &U[0, 2 * H], H3, 0.0, &a[0, 2 * H], H3)
            for b in range(B):
                for j in range(H):
                    nt = tanh(gx[b, t, 2 * H + j] + a[b, 2 * H + j])
                    n[b, t, j] = nt
                    zt = z[b, t, j]
                    hp = (1.0 - zt) * h[b, j] + zt * nt
                    h[b, j] = hp
                    hs[b, t, j] = hp
    return hs_a, z_a, r_a, n_a


def gru_backward(double[:, :, ::1] dhs, double[:, ::1] U, double[:, :, ::1] hs,
                 double[:, :, ::1] z, double[:, :, ::1] r, double[:, :, ::1] n):
    cdef int B = hs.shape[0], L = hs.shape[1], H = hs.shape[2]
    cdef int H3 = 3 * H
    dgx_a = np.empty((B, L, H3))
    dU_a = np.zeros((H, H3))
    cdef double[:, :, ::1] dgx = dgx_a
    cdef double[:, ::1] dU = dU_a
    cdef double[:, ::1] dh = np.zeros((B, H))
    cdef double[:, ::1] hprev = np.zeros((B, H))
    cdef double[:, ::1] rh = np.zeros((B, H))
    cdef double[:, ::1] drh = np.zeros((B, H))
    cdef double[:, ::1] step = np.zeros((B, H3))
    cdef double[:, ::1] back = np.zeros((B, H))
    cdef int t, b, j
    cdef double zt, rt, nt, hp, g, dn
    with nogil:
        for t in range(L - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    dh[b, j] += dhs[b, t, j]
                    hprev[b, j] = hs[b, t - 1, j] if t > 0 else 0.0
                    zt = z[b, t, j]
                    nt = n[b, t, j]
                    g = dh[b, j]
                    dn = g * zt * (1.0 - nt * nt)
                    step[b, 2 * H + j] = dn
                    step[b, j] = g * (nt - hprev[b, j]) * zt * (1.0 - zt)
                    rh[b, j] = r[b, t, j] * hprev[b, j]
            # drh = dn @ Un^T
            _gemm_rm(b"N", b"T", B, H, H, 1.0, &step[0, 2 * H], H3, &U[0, 2 * H], H3, 0.0, &drh[0, 0], H)
            for b in range(B):
                for j in range(H):
                    rt = r[b, t, j]
                    step[b, H + j] = drh[b, j] * hprev[b, j] * rt * (1.0 - rt)
                for j in range(H3):
                    dgx[b, t, j] = step[b, j]
            # dU[:, :2H] += hprev^T @ dzr ; dU[:, 2H:] += rh^T @ dn
            _gemm_rm(b"T", b"N", H, 2 * H, B, 1.0, &hprev[0, 0], H, &step[0, 0], H3, 1.0, &dU[0, 0], H3)
            _gemm_rm(b"T", b"N", H, H, B, 1.0, &rh[0, 0], H, &step[0, 2 * H], H3, 1.0, &dU[0, 2 * H], H3)
            # back = dzr @ Uzr^T
            _gemm_rm(b"N", b"T", B, H, 2 * H, 1.0, &step[0, 0], H3, &U[0, 0], H3, 0.0, &back[0, 0], H)
            for b in range(B):
                for j in range(H):
                    dh[b, j] = dh[b, j] * (1.0 - z[b, t, j]) + drh[b, j] * r[b, t, j] + back[b, j]
    return dgx_a, dU_a
