"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Every function here returns results identical to its compiled twin,
including flood tie order and max-pool tie routing.
"""

import heapq

import numpy as np

_OFFSETS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


def flood(surface, mask, seeds, seed_labels, level, record=False):
    nx, ny, nz = surface.shape
    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    pending = np.zeros((nx, ny, nz), dtype=np.uint8)
    queued = np.zeros((nx, ny, nz), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    trace = []
    heap = []
    order = 0
    for (x, y, z), lab in zip(np.asarray(seeds).tolist(), np.asarray(seed_labels).tolist()):
        labels[x, y, z] = lab
        pending[x, y, z] = lab
        queued[x, y, z] = True
        heapq.heappush(heap, (float(surface[x, y, z]), order, x, y, z))
        order += 1

    while heap and heap[0][0] <= level:
        prio, _, x, y, z = heapq.heappop(heap)
        lab = pending[x, y, z]
        labels[x, y, z] = lab
        if record:
            trace.append(prio)
        for dx, dy, dz in _OFFSETS:
            xx, yy, zz = x + dx, y + dy, z + dz
            if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz):
                continue
            if not mask[xx, yy, zz] or queued[xx, yy, zz]:
                continue
            queued[xx, yy, zz] = True
            pending[xx, yy, zz] = lab
            heapq.heappush(heap, (max(float(surface[xx, yy, zz]), prio), order, xx, yy, zz))
            order += 1

    if record:
        return labels, np.asarray(trace, dtype=np.float64)
    return labels, None


def im2col3x3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(n * h * w, 9 * c)


def col2im3x3(cols, batch, height, width):
    c = cols.shape[1] // 9
    cols = cols.reshape(batch, height, width, 9, c)
    dxp = np.zeros((batch, height + 2, width + 2, c), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + height, kx:kx + width] += cols[:, :, :, ky * 3 + kx]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1])


def _blocks(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def maxpool2_forward(x):
    blocks = _blocks(x)
    arg = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dout, arg):
    n, ho, wo, c = dout.shape
    blocks = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    return np.ascontiguousarray(
        blocks.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    )
