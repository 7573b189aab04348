# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for stride-1, same-padded convolution."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col_impl(const real* x, real* cols, Py_ssize_t N, Py_ssize_t C,
                       Py_ssize_t H, Py_ssize_t W, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t HW = H * W
    cdef Py_ssize_t n, c, dy, dx, i, si, j0, j1
    cdef const real* src
    cdef real* dst
    for n in range(N):
        for c in range(C):
            src = x + (n * C + c) * HW
            for dy in range(k):
                for dx in range(k):
                    dst = cols + ((n * C + c) * k * k + dy * k + dx) * HW
                    # valid output columns j satisfy 0 <= j + dx - p < W
                    j0 = p - dx if dx < p else 0
                    j1 = W + p - dx if dx > p else W
                    for i in range(H):
                        si = i + dy - p
                        if si < 0 or si >= H:
                            memset(dst + i * W, 0, W * sizeof(real))
                            continue
                        if j0 > 0:
                            memset(dst + i * W, 0, j0 * sizeof(real))
                        memcpy(dst + i * W + j0, src + si * W + j0 + dx - p,
                               (j1 - j0) * sizeof(real))
                        if j1 < W:
                            memset(dst + i * W + j1, 0, (W - j1) * sizeof(real))


cdef void _col2im_impl(const real* cols, real* out, Py_ssize_t N, Py_ssize_t C,
                       Py_ssize_t H, Py_ssize_t W, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t HW = H * W
    cdef Py_ssize_t n, c, dy, dx, i, j, si, j0, j1, off
    cdef const real* src
    cdef real* dst
    for n in range(N):
        for c in range(C):
            dst = out + (n * C + c) * HW
            for dy in range(k):
                for dx in range(k):
                    src = cols + ((n * C + c) * k * k + dy * k + dx) * HW
                    j0 = p - dx if dx < p else 0
                    j1 = W + p - dx if dx > p else W
                    off = dx - p
                    for i in range(H):
                        si = i + dy - p
                        if si < 0 or si >= H:
                            continue
                        for j in range(j0, j1):
                            dst[si * W + j + off] += src[i * W + j]


def im2col(x, Py_ssize_t k):
    """(N, C, H, W) -> (N, C*k*k, H*W) patch matrix with zero same-padding."""
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cols = np.empty((N, C * k * k, H * W), dtype=x.dtype)
    cdef double[:, :, :, ::1] xd
    cdef double[:, :, ::1] cd
    cdef float[:, :, :, ::1] xf
    cdef float[:, :, ::1] cf
    if x.dtype == np.float64:
        xd = x
        cd = cols
        if cols.size:
            _im2col_impl[double](&xd[0, 0, 0, 0], &cd[0, 0, 0], N, C, H, W, k)
    elif x.dtype == np.float32:
        xf = x
        cf = cols
        if cols.size:
            _im2col_impl[float](&xf[0, 0, 0, 0], &cf[0, 0, 0], N, C, H, W, k)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, Py_ssize_t k, shape):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    cols = np.ascontiguousarray(cols)
    N, C, H, W = shape
    out = np.zeros((N, C, H, W), dtype=cols.dtype)
    cdef double[:, :, ::1] cd
    cdef double[:, :, :, ::1] od
    cdef float[:, :, ::1] cf
    cdef float[:, :, :, ::1] of
    if cols.dtype == np.float64:
        cd = cols
        od = out
        if out.size:
            _col2im_impl[double](&cd[0, 0, 0], &od[0, 0, 0, 0], N, C, H, W, k)
    elif cols.dtype == np.float32:
        cf = cols
        of = out
        if out.size:
            _col2im_impl[float](&cf[0, 0, 0], &of[0, 0, 0, 0], N, C, H, W, k)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
