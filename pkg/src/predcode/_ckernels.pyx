# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see _pykernels.py for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int32_t, int64_t
from libc.math cimport floor, fabs
from libc.stdlib cimport malloc, free, realloc

cnp.import_array()

ctypedef fused real:
    float
    double


# ---------------------------------------------------------------------------
# convolution helpers (NHWC, 3x3, zero padding 1)

def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((b * h * w, 9 * c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t n, yy, xx, ky, kx, sy, sx, ch, row, col0
    with nogil:
        for n in range(b):
            for yy in range(h):
                for xx in range(w):
                    row = (n * h + yy) * w + xx
                    for ky in range(3):
                        sy = yy + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= w:
                                continue
                            col0 = (ky * 3 + kx) * c
                            for ch in range(c):
                                out[row, col0 + ch] = x[n, sy, sx, ch]
    return out_arr


def col2im3x3(real[:, ::1] dcols, Py_ssize_t b, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c):
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((b, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, yy, xx, ky, kx, sy, sx, ch, row, col0
    with nogil:
        for n in range(b):
            for yy in range(h):
                for xx in range(w):
                    row = (n * h + yy) * w + xx
                    for ky in range(3):
                        sy = yy + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= w:
                                continue
                            col0 = (ky * 3 + kx) * c
                            for ch in range(c):
                                out[n, sy, sx, ch] += dcols[row, col0 + ch]
    return out_arr


# ---------------------------------------------------------------------------
# adaptive model (Fenwick tree)

cdef struct Model:
    int alphabet
    int increment
    int limit
    int64_t total
    int64_t *counts
    int64_t *tree
    int top_step


cdef int model_init(Model *m, int alphabet, int increment, int limit) nogil:
    cdef int i
    m.alphabet = alphabet
    m.increment = increment
    m.limit = limit
    m.counts = <int64_t *> malloc(alphabet * sizeof(int64_t))
    m.tree = <int64_t *> malloc((alphabet + 1) * sizeof(int64_t))
    if m.counts == NULL or m.tree == NULL:
        return -1
    for i in range(alphabet):
        m.counts[i] = 1
    m.total = alphabet
    m.top_step = 1
    while m.top_step <= alphabet:
        m.top_step <<= 1
    model_rebuild(m)
    return 0


cdef void model_free(Model *m) nogil:
    free(m.counts)
    free(m.tree)


cdef void model_rebuild(Model *m) nogil:
    cdef int i, j
    for i in range(m.alphabet + 1):
        m.tree[i] = 0
    for i in range(1, m.alphabet + 1):
        m.tree[i] += m.counts[i - 1]
        j = i + (i & -i)
        if j <= m.alphabet:
            m.tree[j] += m.tree[i]


cdef inline int64_t model_cum(Model *m, int symbol) nogil:
    cdef int64_t total = 0
    cdef int i = symbol
    while i > 0:
        total += m.tree[i]
        i -= i & -i
    return total


cdef inline int model_find(Model *m, int64_t target) nogil:
    cdef int pos = 0, nxt
    cdef int step = m.top_step
    while step:
        nxt = pos + step
        if nxt <= m.alphabet and m.tree[nxt] <= target:
            pos = nxt
            target -= m.tree[nxt]
        step >>= 1
    return pos


cdef inline void model_update(Model *m, int symbol) nogil:
    cdef int i
    cdef int64_t t = 0
    m.counts[symbol] += m.increment
    m.total += m.increment
    if m.total > m.limit:
        for i in range(m.alphabet):
            m.counts[i] >>= 1
            if m.counts[i] < 1:
                m.counts[i] = 1
            t += m.counts[i]
        m.total = t
        model_rebuild(m)
        return
    i = symbol + 1
    while i <= m.alphabet:
        m.tree[i] += m.increment
        i += i & -i


# ---------------------------------------------------------------------------
# arithmetic coder

cdef uint64_t TOP = 0xFFFFFFFFULL
cdef uint64_t HALF = 0x80000000ULL
cdef uint64_t QUARTER = 0x40000000ULL


cdef struct BitWriter:
    uint8_t *buf
    Py_ssize_t cap
    Py_ssize_t nbytes
    int nbits
    uint8_t cur


cdef int bw_put(BitWriter *bw, int bit) nogil:
    cdef uint8_t *grown
    bw.cur = (bw.cur << 1) | bit
    bw.nbits += 1
    if bw.nbits == 8:
        if bw.nbytes == bw.cap:
            grown = <uint8_t *> realloc(bw.buf, bw.cap * 2)
            if grown == NULL:
                return -1
            bw.buf = grown
            bw.cap *= 2
        bw.buf[bw.nbytes] = bw.cur
        bw.nbytes += 1
        bw.cur = 0
        bw.nbits = 0
    return 0


cdef int bw_emit(BitWriter *bw, int bit, int64_t *pending) nogil:
    if bw_put(bw, bit) < 0:
        return -1
    while pending[0] > 0:
        if bw_put(bw, bit ^ 1) < 0:
            return -1
        pending[0] -= 1
    return 0


def encode_symbols(symbols, int alphabet, int increment, int limit):
    cdef int32_t[::1] syms = np.ascontiguousarray(symbols, dtype=np.int32)
    cdef Py_ssize_t n = syms.shape[0], i
    cdef Model m
    cdef BitWriter bw
    cdef uint64_t low = 0, high = TOP, span
    cdef int64_t pending = 0, lo, hi
    cdef int s, err = 0
    for i in range(n):
        if syms[i] < 0 or syms[i] >= alphabet:
            raise ValueError(f"symbol {syms[i]} outside alphabet of {alphabet}")
    if model_init(&m, alphabet, increment, limit) < 0:
        model_free(&m)
        raise MemoryError()
    bw.cap = 1024
    bw.buf = <uint8_t *> malloc(bw.cap)
    bw.nbytes = 0
    bw.nbits = 0
    bw.cur = 0
    if bw.buf == NULL:
        model_free(&m)
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                s = syms[i]
                lo = model_cum(&m, s)
                hi = lo + m.counts[s]
                span = high - low + 1
                high = low + span * <uint64_t> hi // <uint64_t> m.total - 1
                low = low + span * <uint64_t> lo // <uint64_t> m.total
                while True:
                    if high < HALF:
                        err |= bw_emit(&bw, 0, &pending)
                    elif low >= HALF:
                        err |= bw_emit(&bw, 1, &pending)
                        low -= HALF
                        high -= HALF
                    elif low >= QUARTER and high < HALF + QUARTER:
                        pending += 1
                        low -= QUARTER
                        high -= QUARTER
                    else:
                        break
                    low <<= 1
                    high = (high << 1) | 1
                model_update(&m, s)
            pending += 1
            err |= bw_emit(&bw, 0 if low < QUARTER else 1, &pending)
            while bw.nbits != 0:
                err |= bw_put(&bw, 0)
        if err:
            raise MemoryError()
        return bytes((<char *> bw.buf)[:bw.nbytes])
    finally:
        free(bw.buf)
        model_free(&m)


def decode_symbols(data, Py_ssize_t count, int alphabet, int increment, int limit):
    cdef const uint8_t[::1] buf = np.frombuffer(bytes(data), dtype=np.uint8) if len(data) else np.zeros(0, np.uint8)
    cdef Py_ssize_t nbits_total = buf.shape[0] * 8, pos = 0, i
    cdef int64_t overrun = 0
    out_arr = np.empty(count, dtype=np.int32)
    cdef int32_t[::1] out = out_arr
    cdef Model m
    cdef uint64_t low = 0, high = TOP, code = 0, span, target
    cdef int64_t lo, hi
    cdef int s, k, bad = 0
    if model_init(&m, alphabet, increment, limit) < 0:
        model_free(&m)
        raise MemoryError()
    try:
        with nogil:
            for k in range(32):
                code <<= 1
                if pos < nbits_total:
                    code |= (buf[pos >> 3] >> (7 - (pos & 7))) & 1
                    pos += 1
                else:
                    overrun += 1
            for i in range(count):
                span = high - low + 1
                if code < low or code > high:
                    bad = 1
                    break
                target = ((code - low + 1) * <uint64_t> m.total - 1) // span
                if target >= <uint64_t> m.total:
                    bad = 1
                    break
                s = model_find(&m, <int64_t> target)
                lo = model_cum(&m, s)
                hi = lo + m.counts[s]
                high = low + span * <uint64_t> hi // <uint64_t> m.total - 1
                low = low + span * <uint64_t> lo // <uint64_t> m.total
                while True:
                    if high < HALF:
                        pass
                    elif low >= HALF:
                        low -= HALF
                        high -= HALF
                        code -= HALF
                    elif low >= QUARTER and high < HALF + QUARTER:
                        low -= QUARTER
                        high -= QUARTER
                        code -= QUARTER
                    else:
                        break
                    low <<= 1
                    high = (high << 1) | 1
                    code <<= 1
                    if pos < nbits_total:
                        code |= (buf[pos >> 3] >> (7 - (pos & 7))) & 1
                        pos += 1
                    else:
                        overrun += 1
                out[i] = s
                model_update(&m, s)
        if bad:
            raise ArithmeticError("code value outside the coding interval")
        return out_arr, overrun
    finally:
        model_free(&m)


# ---------------------------------------------------------------------------
# GAP

cdef inline double gap_at(const uint8_t[:, ::1] img, Py_ssize_t x, Py_ssize_t y, Py_ssize_t width) nogil:
    cdef double W, N, NW, NE, WW, NN, NNE, dh, dv, diff, p
    if y == 0:
        if x == 0:
            return 128.0
        W = img[y, x - 1]
        WW = img[y, x - 2] if x >= 2 else W
        N = NW = NE = NN = NNE = W
    else:
        N = img[y - 1, x]
        if x == 0:
            W = NW = WW = N
        else:
            W = img[y, x - 1]
            NW = img[y - 1, x - 1]
            WW = img[y, x - 2] if x >= 2 else W
        NE = img[y - 1, x + 1] if x + 1 < width else N
        if y >= 2:
            NN = img[y - 2, x]
            NNE = img[y - 2, x + 1] if x + 1 < width else NE
        else:
            NN = N
            NNE = NE
    dh = fabs(W - WW) + fabs(N - NW) + fabs(N - NE)
    dv = fabs(W - NW) + fabs(N - NN) + fabs(NE - NNE)
    diff = dv - dh
    if diff > 80:
        return W
    if diff < -80:
        return N
    p = (W + N) / 2 + (NE - NW) / 4
    if diff > 32:
        p = (p + W) / 2
    elif diff > 8:
        p = (3 * p + W) / 4
    elif diff < -32:
        p = (p + N) / 2
    elif diff < -8:
        p = (3 * p + N) / 4
    return p


def gap_predict_image(img_in):
    cdef const uint8_t[:, ::1] img = np.ascontiguousarray(img_in, dtype=np.uint8)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], x, y
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for y in range(h):
            for x in range(w):
                out[y, x] = gap_at(img, x, y, w)
    return out_arr


def gap_reconstruct(residuals):
    cdef const int32_t[:, ::1] res = np.ascontiguousarray(residuals, dtype=np.int32)
    cdef Py_ssize_t h = res.shape[0], w = res.shape[1], x, y
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef uint8_t[:, ::1] out = out_arr
    cdef int p, v, bad = 0
    cdef Py_ssize_t bx = 0, by = 0
    with nogil:
        for y in range(h):
            for x in range(w):
                p = <int> floor(gap_at(out, x, y, w) + 0.5)
                if p < 0:
                    p = 0
                elif p > 255:
                    p = 255
                v = res[y, x] + p
                if v < 0 or v > 255:
                    bad = 1
                    bx = x
                    by = y
                    break
                out[y, x] = <uint8_t> v
            if bad:
                break
    if bad:
        raise ValueError(f"reconstructed sample out of range at ({bx}, {by})")
    return out_arr


def fnv1a64(data):
    cdef const uint8_t[::1] buf = np.frombuffer(bytes(data), dtype=np.uint8) if len(data) else np.zeros(0, np.uint8)
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    with nogil:
        for i in range(buf.shape[0]):
            h ^= buf[i]
            h *= 0x100000001B3ULL
    return int(h)


# ---------------------------------------------------------------------------
# batch normalization over rows of an [N, C] (channels-last) array

def bn_train_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c), dtype=dtype)
    xhat_arr = np.empty((n, c), dtype=dtype)
    mean_arr = np.zeros(c, dtype=np.float64)
    var_arr = np.zeros(c, dtype=np.float64)
    inv_arr = np.empty(c, dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef real[::1] inv = inv_arr
    cdef double d
    cdef real xc
    with nogil:
        for i in range(n):
            for j in range(c):
                mean[j] += x[i, j]
        for j in range(c):
            mean[j] /= n
        for i in range(n):
            for j in range(c):
                d = <real> (x[i, j] - <real> mean[j])
                var[j] += d * d
        for j in range(c):
            var[j] /= n
            inv[j] = <real> (1.0 / (var[j] + eps) ** 0.5)
        for i in range(n):
            for j in range(c):
                xc = <real> (x[i, j] - <real> mean[j]) * inv[j]
                xhat[i, j] = xc
                out[i, j] = gamma[j] * xc + beta[j]
    return out_arr, xhat_arr, mean_arr, var_arr, inv_arr


def bn_train_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] gamma, real[::1] inv):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, c), dtype=dtype)
    dgamma_arr = np.zeros(c, dtype=np.float64)
    dbeta_arr = np.zeros(c, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef real a, s1, s2
    with nogil:
        for i in range(n):
            for j in range(c):
                dbeta[j] += g[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
        for i in range(n):
            for j in range(c):
                a = gamma[j] * inv[j] / n
                s1 = <real> dbeta[j]
                s2 = <real> dgamma[j]
                dx[i, j] = a * (n * g[i, j] - s1 - xhat[i, j] * s2)
    return dx_arr, dgamma_arr.astype(dtype), dbeta_arr.astype(dtype)


def leaky_relu_forward(real[::1] x, double slope):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real s = <real> slope
    with nogil:
        for i in range(n):
            out[i] = x[i] if x[i] >= 0 else x[i] * s
    return out_arr


def leaky_relu_backward(real[::1] g, real[::1] x, double slope):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real s = <real> slope
    with nogil:
        for i in range(n):
            out[i] = g[i] if x[i] >= 0 else g[i] * s
    return out_arr


def column_sums(real[:, ::1] a):
    cdef Py_ssize_t n = a.shape[0], c = a.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    acc_arr = np.zeros(c, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    with nogil:
        for i in range(n):
            for j in range(c):
                acc[j] += a[i, j]
    return acc_arr.astype(dtype)
