"""Pure numpy twins of the compiled kernels (same results, bit for bit)."""

from collections import deque

import numpy as np


def conv_accumulate(w, cols, out):
    if cols.shape[0] != w.shape[1] or out.shape != (w.shape[0], cols.shape[1]):
        raise ValueError("conv_accumulate: incompatible operand shapes")
    for k in range(w.shape[1]):
        # separate multiply and add: no fused rounding
        out += w[:, k : k + 1] * cols[k]


def col2im_add(cols, xpad, stride, dilation):
    _, kh, kw, _, ho, wo = cols.shape
    for ki in range(kh):
        for kj in range(kw):
            y0, x0 = ki * dilation, kj * dilation
            view = xpad[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride]
            view += cols[:, ki, kj].transpose(1, 0, 2, 3)


def label_components(labels, ignore, connectivity):
    h, w = labels.shape
    ids = np.full((h, w), -1, dtype=np.int64)
    if connectivity == 8:
        steps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    else:
        steps = [(-1, 0), (0, -1), (0, 1), (1, 0)]
    lab = labels.tolist()
    out = ids.tolist()
    sizes = []
    for y in range(h):
        for x in range(w):
            v = lab[y][x]
            if v == ignore or out[y][x] >= 0:
                continue
            rid = len(sizes)
            out[y][x] = rid
            count = 0
            queue = deque([(y, x)])
            while queue:
                cy, cx = queue.popleft()
                count += 1
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and out[ny][nx] < 0 and lab[ny][nx] == v:
                        out[ny][nx] = rid
                        queue.append((ny, nx))
            sizes.append(count)
    return np.asarray(out, dtype=np.int64).reshape(h, w), np.asarray(sizes, dtype=np.int64)
