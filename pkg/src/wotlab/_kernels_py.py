"""Pure numpy implementations of the hot kernels.

These mirror the compiled versions in ``_kernels.pyx`` signature for signature
and are used whenever the extension is not built (or ``WOTLAB_PURE_PYTHON=1``).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    # xp: (N, C, Hp, Wp) already padded
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, ho, wo, kh, kw) -> (N, ho, wo, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols, dtype=np.float32)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        hi = i + (ho - 1) * stride + 1
        for j in range(kw):
            wj = j + (wo - 1) * stride + 1
            out[:, :, i:hi:stride, j:wj:stride] += blocks[:, :, i, j]
    return out


def block_inner(grad, deltas, starts, stops, block_ids, n_blocks):
    k = deltas.shape[0]
    out = np.zeros((k, n_blocks), dtype=np.float64)
    g = grad.astype(np.float64)
    for s, e, b in zip(starts, stops, block_ids):
        out[:, b] += deltas[:, s:e].astype(np.float64) @ g[s:e]
    return out


def block_combine(deltas, alpha, starts, stops, block_ids):
    out = np.zeros(deltas.shape[1], dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    for s, e, b in zip(starts, stops, block_ids):
        out[s:e] = a[:, b] @ deltas[:, s:e].astype(np.float64)
    return out
