# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and confusion counting.

Same contracts as ``_pykernels``; the test suite checks both agree.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()

cdef extern from *:
    """
    /* restrict lets the compiler vectorise the unit-stride scatter-add */
    static inline void _acc_f(float* restrict d, const float* restrict s, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; ++i) d[i] += s[i];
    }
    static inline void _acc_d(double* restrict d, const double* restrict s, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; ++i) d[i] += s[i];
    }
    static inline void _count_u8(const unsigned char* restrict p, const unsigned char* restrict g,
                                 Py_ssize_t n, long long* tp, long long* np_, long long* ng) {
        Py_ssize_t start, i, stop;
        for (start = 0; start < n; start += 1 << 20) {
            unsigned int a = 0, b = 0, c = 0;
            stop = n - start < (1 << 20) ? n : start + (1 << 20);
            for (i = start; i < stop; ++i) {
                unsigned int x = p[i] != 0, y = g[i] != 0;
                a += x & y; b += x; c += y;
            }
            *tp += a; *np_ += b; *ng += c;
        }
    }
    """
    void _acc_f(float* d, const float* s, Py_ssize_t n) nogil
    void _acc_d(double* d, const double* s, Py_ssize_t n) nogil
    void _count_u8(const unsigned char* p, const unsigned char* g, Py_ssize_t n,
                   long long* tp, long long* np_, long long* ng) nogil

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


cdef inline Py_ssize_t _max(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _min(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


cdef inline void _valid_range(Py_ssize_t w, Py_ssize_t wo, int j, int stride, int pad,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns xx with 0 <= xx*stride + j - pad < w
    cdef Py_ssize_t top = w - 1 + pad - j
    lo[0] = _max(0, (pad - j + stride - 1) // stride) if pad - j > 0 else 0
    hi[0] = _min(wo, top // stride + 1) if top >= 0 else 0
    if hi[0] < lo[0]:
        hi[0] = lo[0]


cdef void _im2col_plane(const real* src, real* dst, Py_ssize_t h, Py_ssize_t w,
                        Py_ssize_t ho, Py_ssize_t wo, int k, int stride, int pad) noexcept nogil:
    # src: one (h, w) channel plane; dst: k*k rows of ho*wo
    cdef Py_ssize_t i, j, y, xx, iy, lo, hi
    cdef real* row
    cdef const real* line
    for i in range(k):
        for j in range(k):
            row = dst + (i * k + j) * ho * wo
            _valid_range(w, wo, j, stride, pad, &lo, &hi)
            for y in range(ho):
                iy = y * stride + i - pad
                if iy < 0 or iy >= h:
                    memset(row + y * wo, 0, wo * sizeof(real))
                    continue
                line = src + iy * w + j - pad
                if lo > 0:
                    memset(row + y * wo, 0, lo * sizeof(real))
                if hi < wo:
                    memset(row + y * wo + hi, 0, (wo - hi) * sizeof(real))
                if stride == 1:
                    memcpy(row + y * wo + lo, line + lo, (hi - lo) * sizeof(real))
                else:
                    for xx in range(lo, hi):
                        row[y * wo + xx] = line[xx * stride]


cdef void _col2im_plane(const real* src, real* dst, Py_ssize_t h, Py_ssize_t w,
                        Py_ssize_t ho, Py_ssize_t wo, int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t i, j, y, xx, iy, lo, hi
    cdef const real* row
    cdef real* line
    for i in range(k):
        for j in range(k):
            row = src + (i * k + j) * ho * wo
            _valid_range(w, wo, j, stride, pad, &lo, &hi)
            for y in range(ho):
                iy = y * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                line = dst + iy * w + j - pad
                if stride == 1:
                    if real is float:
                        _acc_f(line + lo, row + y * wo + lo, hi - lo)
                    else:
                        _acc_d(line + lo, row + y * wo + lo, hi - lo)
                else:
                    for xx in range(lo, hi):
                        line[xx * stride] += row[y * wo + xx]


def _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] out, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = _out(h, k, stride, pad), wo = _out(w, k, stride, pad)
    cdef Py_ssize_t b, ch
    with nogil:
        for b in range(n):
            for ch in range(c):
                _im2col_plane(&x[b, ch, 0, 0], &out[b, ch * k * k, 0], h, w, ho, wo, k, stride, pad)


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out, int k, int stride, int pad):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = _out(h, k, stride, pad), wo = _out(w, k, stride, pad)
    cdef Py_ssize_t b, ch
    with nogil:
        for b in range(n):
            for ch in range(c):
                _col2im_plane(&cols[b, ch * k * k, 0], &out[b, ch, 0, 0], h, w, ho, wo, k, stride, pad)


def im2col(x, int k, int stride, int pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo), rows ordered (c, ki, kj)."""
    x = np.ascontiguousarray(x)
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}")
    n, c, h, w = x.shape
    ho, wo = _out(h, k, stride, pad), _out(w, k, stride, pad)
    out = np.empty((n, c * k * k, ho * wo), dtype=x.dtype)
    _im2col(x, out, k, stride, pad)
    return out


def col2im(cols, x_shape, int k, int stride, int pad):
    n, c, h, w = x_shape
    cols = np.ascontiguousarray(cols).reshape(n, c * k * k, -1)
    if cols.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {cols.dtype}")
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, k, stride, pad)
    return out


def confusion_counts(pred, gt):
    """Single pass TP/FP/FN/TN over two equally sized masks (nonzero = foreground)."""
    cdef const cnp.uint8_t[::1] p = _as_bytes(pred)
    cdef const cnp.uint8_t[::1] g = _as_bytes(gt)
    if p.shape[0] != g.shape[0]:
        raise ValueError("size mismatch")
    cdef Py_ssize_t m = p.shape[0]
    cdef long long tp = 0, np_ = 0, ng = 0
    if m:
        with nogil:
            _count_u8(&p[0], &g[0], m, &tp, &np_, &ng)
    return int(tp), int(np_ - tp), int(ng - tp), int(m - np_ - ng + tp)


cdef _as_bytes(a):
    # bool and uint8 are read in place; other dtypes are reduced to a 0/1 mask
    a = np.asarray(a)
    if a.dtype != np.bool_ and a.dtype != np.uint8:
        a = a != 0
    return np.ascontiguousarray(a).reshape(-1).view(np.uint8)
