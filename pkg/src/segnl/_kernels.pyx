# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. ``segnl._fallback`` holds the pure-Python twins."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport free, malloc

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef struct Entry:
    double prio
    Py_ssize_t order
    Py_ssize_t index


cdef inline bint _before(Entry a, Entry b) noexcept nogil:
    return a.prio < b.prio or (a.prio == b.prio and a.order < b.order)


cdef inline void _push(Entry* heap, Py_ssize_t* size, Entry e) noexcept nogil:
    cdef Py_ssize_t i = size[0]
    cdef Py_ssize_t parent
    size[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if _before(e, heap[parent]):
            heap[i] = heap[parent]
            i = parent
        else:
            break
    heap[i] = e


cdef inline Entry _pop(Entry* heap, Py_ssize_t* size) noexcept nogil:
    cdef Entry top = heap[0]
    cdef Entry last
    cdef Py_ssize_t i = 0, child, n
    size[0] -= 1
    n = size[0]
    if n > 0:
        last = heap[n]
        while True:
            child = 2 * i + 1
            if child >= n:
                break
            if child + 1 < n and _before(heap[child + 1], heap[child]):
                child += 1
            if _before(heap[child], last):
                heap[i] = heap[child]
                i = child
            else:
                break
        heap[i] = last
    return top


def flood(const double[:, :, ::1] surface,
          const unsigned char[:, :, ::1] mask,
          const Py_ssize_t[:, ::1] seeds,
          const unsigned char[::1] seed_labels,
          double level,
          bint record=False):
    """Priority flood from labelled seeds over a 6-connected grid.

    Returns ``(labels, trace)``; ``trace`` holds popped priorities when
    ``record`` is set, else ``None``.
    """
    cdef Py_ssize_t nx = surface.shape[0], ny = surface.shape[1], nz = surface.shape[2]
    cdef Py_ssize_t nvox = nx * ny * nz
    labels_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    pending_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    queued_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    trace_arr = np.empty(nvox if record else 0, dtype=np.float64)
    cdef unsigned char[:, :, ::1] labels = labels_arr
    cdef unsigned char[:, :, ::1] pending = pending_arr
    cdef unsigned char[:, :, ::1] queued = queued_arr
    cdef double[::1] trace = trace_arr

    cdef Entry* heap = <Entry*> malloc((nvox + seeds.shape[0] + 1) * sizeof(Entry))
    if heap == NULL:
        raise MemoryError()
    cdef Py_ssize_t size = 0, order = 0, npop = 0
    cdef Py_ssize_t i, x, y, z, xx, yy, zz, k, nb
    cdef Entry e, top
    cdef double p
    cdef int dx[6]
    cdef int dy[6]
    cdef int dz[6]
    dx[:] = [-1, 1, 0, 0, 0, 0]
    dy[:] = [0, 0, -1, 1, 0, 0]
    dz[:] = [0, 0, 0, 0, -1, 1]

    try:
        with nogil:
            for i in range(seeds.shape[0]):
                x = seeds[i, 0]
                y = seeds[i, 1]
                z = seeds[i, 2]
                labels[x, y, z] = seed_labels[i]
                pending[x, y, z] = seed_labels[i]
                queued[x, y, z] = 1
                e.prio = surface[x, y, z]
                e.order = order
                e.index = (x * ny + y) * nz + z
                order += 1
                _push(heap, &size, e)

            while size > 0:
                if heap[0].prio > level:
                    break
                top = _pop(heap, &size)
                z = top.index % nz
                y = (top.index // nz) % ny
                x = top.index // (ny * nz)
                labels[x, y, z] = pending[x, y, z]
                if record:
                    trace[npop] = top.prio
                npop += 1
                for k in range(6):
                    xx = x + dx[k]
                    yy = y + dy[k]
                    zz = z + dz[k]
                    if xx < 0 or xx >= nx or yy < 0 or yy >= ny or zz < 0 or zz >= nz:
                        continue
                    if not mask[xx, yy, zz] or queued[xx, yy, zz]:
                        continue
                    queued[xx, yy, zz] = 1
                    pending[xx, yy, zz] = pending[x, y, z]
                    p = surface[xx, yy, zz]
                    e.prio = p if p > top.prio else top.prio
                    e.order = order
                    e.index = (xx * ny + yy) * nz + zz
                    order += 1
                    _push(heap, &size, e)
    finally:
        free(heap)

    if record:
        return labels_arr, trace_arr[:npop].copy()
    return labels_arr, None


def im2col3x3(floating[:, :, :, ::1] x):
    """Zero-padded 3x3 patches of an NHWC array, shape ``(N*H*W, 9*C)``.

    Column ``k*C + c`` holds tap ``k = ky*3 + kx`` of channel ``c``.
    """
    cdef Py_ssize_t n_ = x.shape[0], h_ = x.shape[1], w_ = x.shape[2], c_ = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_ * h_ * w_, 9 * c_), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t n, h, w, ky, kx, hs, ws, c, row, col0
    with nogil:
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    row = (n * h_ + h) * w_ + w
                    for ky in range(3):
                        hs = h + ky - 1
                        if hs < 0 or hs >= h_:
                            continue
                        for kx in range(3):
                            ws = w + kx - 1
                            if ws < 0 or ws >= w_:
                                continue
                            col0 = (ky * 3 + kx) * c_
                            for c in range(c_):
                                cols[row, col0 + c] = x[n, hs, ws, c]
    return out


def col2im3x3(floating[:, ::1] cols, Py_ssize_t batch, Py_ssize_t height, Py_ssize_t width):
    """Adjoint of :func:`im2col3x3`: scatter-add patches back to ``(N, H, W, C)``."""
    cdef Py_ssize_t n_ = batch, h_ = height, w_ = width, c_ = cols.shape[1] // 9
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_, h_, w_, c_), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, h, w, ky, kx, hs, ws, c, row, col0
    with nogil:
        for ky in range(3):
            for kx in range(3):
                col0 = (ky * 3 + kx) * c_
                for n in range(n_):
                    for h in range(h_):
                        hs = h + ky - 1
                        if hs < 0 or hs >= h_:
                            continue
                        for w in range(w_):
                            ws = w + kx - 1
                            if ws < 0 or ws >= w_:
                                continue
                            row = (n * h_ + h) * w_ + w
                            for c in range(c_):
                                dx[n, hs, ws, c] += cols[row, col0 + c]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    """2x2/stride-2 max pool over NHWC; ties go to the first element in scan order."""
    cdef Py_ssize_t n_ = x.shape[0], ho = x.shape[1] // 2, wo = x.shape[2] // 2, c_ = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n_, ho, wo, c_), dtype=dtype)
    arg_arr = np.empty((n_, ho, wo, c_), dtype=np.uint8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, i, j, c
    cdef unsigned char best_k, k
    cdef floating best, v
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    for c in range(c_):
                        best = x[n, 2 * i, 2 * j, c]
                        best_k = 0
                        for k in range(1, 4):
                            v = x[n, 2 * i + (k >> 1), 2 * j + (k & 1), c]
                            if v > best:
                                best = v
                                best_k = k
                        out[n, i, j, c] = best
                        arg[n, i, j, c] = best_k
    return out_arr, arg_arr


def maxpool2_backward(floating[:, :, :, ::1] dout, const unsigned char[:, :, :, ::1] arg):
    cdef Py_ssize_t n_ = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c_ = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n_, 2 * ho, 2 * wo, c_), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, i, j, c
    cdef unsigned char k
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    for c in range(c_):
                        k = arg[n, i, j, c]
                        dx[n, 2 * i + (k >> 1), 2 * j + (k & 1), c] = dout[n, i, j, c]
    return dx_arr
