# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Every routine here has a numpy twin in ``_pykernels``
that produces bitwise-identical results."""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def conv_accumulate(const real[:, ::1] w, const real[:, ::1] cols, real[:, ::1] out):
    """out[o, p] += w[o, k] * cols[k, p], k ascending for every element.

    Vectorised across p only, so the per-element accumulation order is the
    plain sequential one.
    """
    cdef Py_ssize_t O = w.shape[0], K = w.shape[1], P = cols.shape[1]
    cdef Py_ssize_t PB = 512
    cdef Py_ssize_t p0, p1, o, k, p
    cdef real w0, w1, w2, w3, c
    cdef real *r0
    cdef real *r1
    cdef real *r2
    cdef real *r3
    cdef const real *cr
    if cols.shape[0] != K or out.shape[0] != O or out.shape[1] != P:
        raise ValueError("conv_accumulate: incompatible operand shapes")
    if O == 0 or K == 0 or P == 0:
        return
    with nogil:
        p0 = 0
        while p0 < P:
            p1 = min(p0 + PB, P)
            o = 0
            while o + 4 <= O:
                r0 = &out[o, 0]
                r1 = &out[o + 1, 0]
                r2 = &out[o + 2, 0]
                r3 = &out[o + 3, 0]
                for k in range(K):
                    w0 = w[o, k]
                    w1 = w[o + 1, k]
                    w2 = w[o + 2, k]
                    w3 = w[o + 3, k]
                    cr = &cols[k, 0]
                    for p in range(p0, p1):
                        c = cr[p]
                        r0[p] = r0[p] + w0 * c
                        r1[p] = r1[p] + w1 * c
                        r2[p] = r2[p] + w2 * c
                        r3[p] = r3[p] + w3 * c
                o += 4
            while o < O:
                r0 = &out[o, 0]
                for k in range(K):
                    w0 = w[o, k]
                    cr = &cols[k, 0]
                    for p in range(p0, p1):
                        r0[p] = r0[p] + w0 * cr[p]
                o += 1
            p0 += PB


def col2im_add(const real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] xpad,
               Py_ssize_t stride, Py_ssize_t dilation):
    """Scatter-add cols (C, k, k, N, Ho, Wo) into xpad (N, C, Hp, Wp).

    Loop order (c, ki, kj, n, y, x) matches the numpy twin.
    """
    cdef Py_ssize_t C = cols.shape[0], KH = cols.shape[1], KW = cols.shape[2]
    cdef Py_ssize_t N = cols.shape[3], Ho = cols.shape[4], Wo = cols.shape[5]
    cdef Py_ssize_t c, ki, kj, n, y, x, yy
    with nogil:
        for c in range(C):
            for ki in range(KH):
                for kj in range(KW):
                    for n in range(N):
                        for y in range(Ho):
                            yy = y * stride + ki * dilation
                            for x in range(Wo):
                                xpad[n, c, yy, x * stride + kj * dilation] += cols[c, ki, kj, n, y, x]


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t r = i, t
    while parent[r] != r:
        r = parent[r]
    while parent[i] != r:
        t = parent[i]
        parent[i] = r
        i = t
    return r


cdef inline void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label_components(const cnp.int64_t[:, ::1] labels, cnp.int64_t ignore, int connectivity):
    """Two-pass union-find labelling; ids in first-visit raster order, -1 on ignore."""
    cdef Py_ssize_t H = labels.shape[0], W = labels.shape[1]
    cdef Py_ssize_t y, x, i, r, nid = 0
    cdef cnp.int64_t v
    parent_arr = np.arange(H * W, dtype=np.intp)
    ids_arr = np.full((H, W), -1, dtype=np.int64)
    remap_arr = np.full(H * W, -1, dtype=np.int64)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef cnp.int64_t[:, ::1] ids = ids_arr
    cdef cnp.int64_t[::1] remap = remap_arr
    with nogil:
        for y in range(H):
            for x in range(W):
                v = labels[y, x]
                if v == ignore:
                    continue
                i = y * W + x
                if x > 0 and labels[y, x - 1] == v:
                    _union(parent, i, i - 1)
                if y > 0:
                    if labels[y - 1, x] == v:
                        _union(parent, i, i - W)
                    if connectivity == 8:
                        if x > 0 and labels[y - 1, x - 1] == v:
                            _union(parent, i, i - W - 1)
                        if x + 1 < W and labels[y - 1, x + 1] == v:
                            _union(parent, i, i - W + 1)
        for y in range(H):
            for x in range(W):
                if labels[y, x] == ignore:
                    continue
                r = _find(parent, y * W + x)
                if remap[r] < 0:
                    remap[r] = nid
                    nid += 1
                ids[y, x] = remap[r]
    sizes = np.bincount(ids_arr[ids_arr >= 0], minlength=nid).astype(np.int64)
    return ids_arr, sizes
