# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled hot kernels: direct convolution, stereo cost volumes, SAD costs.

Every kernel assigns each output element to exactly one thread and accumulates
its contributions in a fixed order, so results are bit-identical for any
thread count.
"""

from cython.parallel cimport prange

from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

INT32_INVALID = 2147483647

cdef int _INVALID = 2147483647
DEF ROW_CHUNK = 1024


def conv2d(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
           const float[::1] bias, int stride, int padding, int groups,
           int num_threads, float[:, :, :, ::1] out):
    """Direct cross-correlation; out must be preallocated with the right shape.

    Accumulation per output element starts from the bias, then adds
    contributions in (channel, ky, kx) order; zero-padding terms are skipped
    (adding 0.0 is exact for finite floats).
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], cpg = w.shape[1], Kh = w.shape[2], Kw = w.shape[3]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t copg = Cout // groups
    cdef Py_ssize_t nrows = B * Cout * Ho
    cdef Py_ssize_t r, b, co, oy, ci, cin_base, ky, kx, ox, ox0, ox1, iy, ibase
    cdef Py_ssize_t c0, c1, j, n
    cdef float wv, bv
    cdef float* buf
    cdef int nt = num_threads if num_threads > 0 else 1

    for r in prange(nrows, nogil=True, schedule='static', num_threads=nt):
        buf = <float*> malloc(ROW_CHUNK * sizeof(float))
        if buf == NULL:
            with gil:
                raise MemoryError("conv2d row buffer allocation failed")
        b = r // (Cout * Ho)
        co = (r // Ho) % Cout
        oy = r % Ho
        cin_base = (co // copg) * cpg
        bv = bias[co]
        c0 = 0
        while c0 < Wo:
            c1 = c0 + ROW_CHUNK
            if c1 > Wo:
                c1 = Wo
            n = c1 - c0
            for j in range(n):
                buf[j] = bv
            for ci in range(cpg):
                for ky in range(Kh):
                    iy = oy * stride + ky - padding
                    if iy < 0 or iy >= H:
                        continue
                    for kx in range(Kw):
                        wv = w[co, ci, ky, kx]
                        if kx >= padding:
                            ox0 = 0
                        else:
                            ox0 = (padding - kx + stride - 1) // stride
                        if ox0 < c0:
                            ox0 = c0
                        ox1 = (W - 1 - kx + padding) // stride + 1
                        if ox1 > c1:
                            ox1 = c1
                        ibase = kx - padding
                        for ox in range(ox0, ox1):
                            buf[ox - c0] += wv * x[b, cin_base + ci, iy, ox * stride + ibase]
            for j in range(n):
                out[b, co, oy, c0 + j] = buf[j]
            c0 = c1
        free(buf)
    return None


def correlation_volume(const float[:, :, :, ::1] ln, const float[:, :, :, ::1] rn,
                       int num_threads, float[:, :, :, ::1] out):
    """Per-pixel dot products of pre-normalized features over shifted columns.

    out has shape [B, D, H, W]; positions x < d are zero-filled.
    """
    cdef Py_ssize_t B = ln.shape[0], C = ln.shape[1], H = ln.shape[2], W = ln.shape[3]
    cdef Py_ssize_t D = out.shape[1]
    cdef Py_ssize_t r, b, y, d, c, xx, x0
    cdef int nt = num_threads if num_threads > 0 else 1

    for r in prange(B * H, nogil=True, schedule='static', num_threads=nt):
        b = r // H
        y = r % H
        for d in range(D):
            for xx in range(W):
                out[b, d, y, xx] = 0.0
            x0 = d if d < W else W
            for c in range(C):
                for xx in range(x0, W):
                    out[b, d, y, xx] += ln[b, c, y, xx] * rn[b, c, y, xx - d]
    return None


def concatenation_volume(const float[:, :, :, ::1] left, const float[:, :, :, ::1] right,
                         int num_threads, float[:, :, :, :, ::1] out):
    """Stacked left / shifted-right features; out shape [B, 2C, D, H, W]."""
    cdef Py_ssize_t B = left.shape[0], C = left.shape[1], H = left.shape[2], W = left.shape[3]
    cdef Py_ssize_t D = out.shape[2]
    cdef Py_ssize_t r, b, c, d, y, fill
    cdef int nt = num_threads if num_threads > 0 else 1

    for r in prange(B * C * D, nogil=True, schedule='static', num_threads=nt):
        b = r // (C * D)
        c = (r // D) % C
        d = r % D
        fill = d if d < W else W
        for y in range(H):
            memcpy(&out[b, c, d, y, 0], &left[b, c, y, 0], W * sizeof(float))
            if fill > 0:
                memset(&out[b, C + c, d, y, 0], 0, fill * sizeof(float))
            if fill < W:
                memcpy(&out[b, C + c, d, y, fill], &right[b, c, y, 0], (W - fill) * sizeof(float))
    return None


def sad_cost_volume(const unsigned char[:, ::1] left, const unsigned char[:, ::1] right,
                    int window, int search_range, int num_threads,
                    int[:, :, ::1] out):
    """Box-filtered sums of absolute differences per disparity hypothesis.

    out has shape [search_range + 1, H, W]; positions whose window leaves
    either image carry INT32_INVALID. Integer arithmetic, hence exact.
    """
    cdef Py_ssize_t H = left.shape[0], W = left.shape[1]
    cdef Py_ssize_t D = out.shape[0]
    cdef Py_ssize_t hw = window // 2
    cdef Py_ssize_t d, y, xx, x_lo, x_hi, y_lo, y_hi
    cdef int acc, diff
    cdef int* hsum
    cdef int nt = num_threads if num_threads > 0 else 1

    for d in prange(D, nogil=True, schedule='static', num_threads=nt):
        for y in range(H):
            for xx in range(W):
                out[d, y, xx] = _INVALID
        x_lo = d + hw
        x_hi = W - 1 - hw
        y_lo = hw
        y_hi = H - 1 - hw
        if x_lo <= x_hi and y_lo <= y_hi:
            hsum = <int*> malloc(H * W * sizeof(int))
            if hsum == NULL:
                with gil:
                    raise MemoryError("sad_cost_volume scratch allocation failed")
            else:
                # horizontal window sums of |left - shifted right| per row
                for y in range(H):
                    acc = 0
                    for xx in range(x_lo - hw, x_lo + hw + 1):
                        diff = <int> left[y, xx] - <int> right[y, xx - d]
                        acc = acc + (diff if diff >= 0 else -diff)
                    hsum[y * W + x_lo] = acc
                    for xx in range(x_lo + 1, x_hi + 1):
                        diff = <int> left[y, xx + hw] - <int> right[y, xx + hw - d]
                        acc = acc + (diff if diff >= 0 else -diff)
                        diff = <int> left[y, xx - hw - 1] - <int> right[y, xx - hw - 1 - d]
                        acc = acc - (diff if diff >= 0 else -diff)
                        hsum[y * W + xx] = acc
                # vertical window sums over the horizontal sums per column
                for xx in range(x_lo, x_hi + 1):
                    acc = 0
                    for y in range(0, window):
                        acc = acc + hsum[y * W + xx]
                    out[d, y_lo, xx] = acc
                    for y in range(y_lo + 1, y_hi + 1):
                        acc = acc + hsum[(y + hw) * W + xx] - hsum[(y - hw - 1) * W + xx]
                        out[d, y, xx] = acc
                free(hsum)
    return None
