"""Hot inner loops.

Each kernel has a numba implementation (``*_nb``, event-driven scatter over
nonzero inputs) and a pure-numpy implementation (``*_np``, dense gather plus a
precomputed fan-out map for the SynOp count).  The public names dispatch on
``_accel.USE_NUMBA``.

Weights are passed as small-integer float64 arrays (the int8 code values) so
accumulation is exact and both paths agree bit-for-bit on integer inputs.
"""
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit


# --------------------------------------------------------------------------
# event binning

@njit
def _bin_events_nb(t, x, y, p, window_us, n_frames, height, width):
    out = np.zeros((n_frames, 2, height, width), dtype=np.int32)
    for i in range(t.shape[0]):
        k = t[i] // window_us
        if k < n_frames:
            out[k, p[i], y[i], x[i]] += 1
    return out


def _bin_events_np(t, x, y, p, window_us, n_frames, height, width):
    k = t // np.uint64(window_us)
    keep = k < n_frames
    if not keep.all():
        k, x, y, p = k[keep], x[keep], y[keep], p[keep]
    idx = ((k.astype(np.int64) * 2 + p) * height + y) * width + x
    size = n_frames * 2 * height * width
    counts = np.bincount(idx, minlength=size)
    return counts.astype(np.int32).reshape(n_frames, 2, height, width)


def bin_events(t, x, y, p, window_us, n_frames, height, width):
    """Per-(timestep, polarity, row, column) event counts."""
    if _accel.USE_NUMBA:
        return _bin_events_nb(t, x, y, p, np.uint64(window_us), int(n_frames), int(height), int(width))
    return _bin_events_np(t, x, y, p, window_us, n_frames, height, width)


# --------------------------------------------------------------------------
# geometry helpers

def numba_enabled():
    return _accel.USE_NUMBA


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


@lru_cache(maxsize=256)
def _axis_fanout(size, k, stride, pad, out):
    """Number of output positions along one axis each input position feeds."""
    cnt = np.zeros(size, dtype=np.int64)
    for o in range(out):
        for kk in range(k):
            i = o * stride - pad + kk
            if 0 <= i < size:
                cnt[i] += 1
    cnt.setflags(write=False)
    return cnt


def conv_fanout(in_shape, k, stride, pad, out_hw, per_position):
    """Fan-out map of shape ``in_shape``; ``per_position`` = C_out (conv) or 1 (dw)."""
    c, h, w = in_shape
    fy = _axis_fanout(h, k, stride, pad, out_hw[0])
    fx = _axis_fanout(w, k, stride, pad, out_hw[1])
    plane = np.outer(fy, fx) * per_position
    return np.broadcast_to(plane, (c, h, w))


def _windows(x, k, stride, pad, hout, wout):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :hout, :wout]


# --------------------------------------------------------------------------
# full convolution

@njit
def _conv_scatter_nb(x, wt, stride, pad, hout, wout, acc_only):
    # wt layout: (cin, k, k, cout)
    cin, k, _, cout = wt.shape
    h = x.shape[1]
    wd = x.shape[2]
    z = np.zeros((hout, wout, cout))
    synops = 0
    for c in range(cin):
        for iy in range(h):
            for ix in range(wd):
                v = x[c, iy, ix]
                if v == 0.0:
                    continue
                for ky in range(k):
                    ny = iy + pad - ky
                    if ny < 0 or ny % stride != 0:
                        continue
                    oy = ny // stride
                    if oy >= hout:
                        continue
                    for kx in range(k):
                        nx = ix + pad - kx
                        if nx < 0 or nx % stride != 0:
                            continue
                        ox = nx // stride
                        if ox >= wout:
                            continue
                        synops += cout
                        if acc_only:
                            for co in range(cout):
                                z[oy, ox, co] += wt[c, ky, kx, co]
                        else:
                            for co in range(cout):
                                z[oy, ox, co] += wt[c, ky, kx, co] * v
    return z, synops


def conv_scatter_nb(x, w, stride, pad, hout, wout, acc_only=False, wt=None):
    """``wt``: optional precomputed ``w.transpose(1, 2, 3, 0)`` (contiguous)."""
    if wt is None:
        wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
    z, synops = _conv_scatter_nb(np.ascontiguousarray(x, dtype=np.float64), wt,
                                 stride, pad, hout, wout, acc_only)
    return np.ascontiguousarray(z.transpose(2, 0, 1)), int(synops)


def conv_scatter_np(x, w, stride, pad, hout, wout, acc_only=False):
    k = w.shape[2]
    win = _windows(x, k, stride, pad, hout, wout)
    z = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    fan = conv_fanout(x.shape, k, stride, pad, (hout, wout), w.shape[0])
    synops = int(fan[x != 0].sum())
    return z, synops


def conv_scatter(x, w, stride, pad, hout, wout, acc_only=False, wt=None):
    """Event-driven 2-D convolution; returns ``(z, synops)``."""
    if _accel.USE_NUMBA:
        return conv_scatter_nb(x, w, stride, pad, hout, wout, acc_only, wt)
    return conv_scatter_np(x, w, stride, pad, hout, wout, acc_only)


# --------------------------------------------------------------------------
# depthwise convolution

@njit
def _dw_scatter_nb(x, w, stride, pad, hout, wout, acc_only):
    c_n, k, _ = w.shape
    h = x.shape[1]
    wd = x.shape[2]
    z = np.zeros((c_n, hout, wout))
    synops = 0
    for c in range(c_n):
        for iy in range(h):
            for ix in range(wd):
                v = x[c, iy, ix]
                if v == 0.0:
                    continue
                for ky in range(k):
                    ny = iy + pad - ky
                    if ny < 0 or ny % stride != 0:
                        continue
                    oy = ny // stride
                    if oy >= hout:
                        continue
                    for kx in range(k):
                        nx = ix + pad - kx
                        if nx < 0 or nx % stride != 0:
                            continue
                        ox = nx // stride
                        if ox >= wout:
                            continue
                        synops += 1
                        if acc_only:
                            z[c, oy, ox] += w[c, ky, kx]
                        else:
                            z[c, oy, ox] += w[c, ky, kx] * v
    return z, synops


def dw_scatter_nb(x, w, stride, pad, hout, wout, acc_only=False):
    z, synops = _dw_scatter_nb(np.ascontiguousarray(x, dtype=np.float64),
                               np.ascontiguousarray(w), stride, pad, hout, wout, acc_only)
    return z, int(synops)


def dw_scatter_np(x, w, stride, pad, hout, wout, acc_only=False):
    k = w.shape[1]
    win = _windows(x, k, stride, pad, hout, wout)
    z = np.einsum("chwij,cij->chw", win, w)
    fan = conv_fanout(x.shape, k, stride, pad, (hout, wout), 1)
    return z, int(fan[x != 0].sum())


def dw_scatter(x, w, stride, pad, hout, wout, acc_only=False):
    if _accel.USE_NUMBA:
        return dw_scatter_nb(x, w, stride, pad, hout, wout, acc_only)
    return dw_scatter_np(x, w, stride, pad, hout, wout, acc_only)


# --------------------------------------------------------------------------
# fully connected

@njit
def _fc_scatter_nb(x, wt, acc_only):
    n_in, n_out = wt.shape
    z = np.zeros(n_out)
    synops = 0
    for j in range(n_in):
        v = x[j]
        if v == 0.0:
            continue
        synops += n_out
        if acc_only:
            for i in range(n_out):
                z[i] += wt[j, i]
        else:
            for i in range(n_out):
                z[i] += wt[j, i] * v
    return z, synops


def fc_scatter_nb(x, w, acc_only=False, wt=None):
    if wt is None:
        wt = np.ascontiguousarray(w.T)
    z, synops = _fc_scatter_nb(np.ascontiguousarray(x, dtype=np.float64), wt, acc_only)
    return z, int(synops)


def fc_scatter_np(x, w, acc_only=False):
    nz = np.flatnonzero(x)
    z = w[:, nz] @ x[nz]
    return z, int(nz.size * w.shape[0])


def fc_scatter(x, w, acc_only=False, wt=None):
    if _accel.USE_NUMBA:
        return fc_scatter_nb(x, w, acc_only, wt)
    return fc_scatter_np(x, w, acc_only)
