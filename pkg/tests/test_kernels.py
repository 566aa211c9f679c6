import os
import subprocess
import sys

import numpy as np
import pytest

from evspike import kernels
from evspike.layers import quantize_weights


def sparse(rng, shape, density=0.3):
    x = rng.integers(-4, 5, size=shape).astype(np.float64)
    x[rng.random(shape) > density] = 0
    return x


@pytest.mark.parametrize("acc_only", [False, True])
def test_conv_paths_agree(acc_only):
    rng = np.random.default_rng(0)
    for _ in range(30):
        ci, co, k = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k))
        ho, wo = kernels.conv_out_size(h, k, stride, pad), kernels.conv_out_size(w, k, stride, pad)
        codes = quantize_weights(rng.normal(size=(co, ci, k, k))).codes
        x = sparse(rng, (ci, h, w))
        if acc_only:
            x = (x != 0).astype(np.float64)
        a, sa = kernels.conv_scatter_nb(x, codes, stride, pad, ho, wo, acc_only)
        wt = np.ascontiguousarray(codes.transpose(1, 2, 3, 0))
        a2, sa2 = kernels.conv_scatter_nb(x, codes, stride, pad, ho, wo, acc_only, wt=wt)
        b, sb = kernels.conv_scatter_np(x, codes, stride, pad, ho, wo, acc_only)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a2, b)
        assert sa == sb == sa2


def test_dw_paths_agree():
    rng = np.random.default_rng(1)
    for _ in range(30):
        c, k = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k))
        ho, wo = kernels.conv_out_size(h, k, stride, pad), kernels.conv_out_size(w, k, stride, pad)
        codes = quantize_weights(rng.normal(size=(c, k, k))).codes
        x = sparse(rng, (c, h, w))
        a, sa = kernels.dw_scatter_nb(x, codes, stride, pad, ho, wo)
        b, sb = kernels.dw_scatter_np(x, codes, stride, pad, ho, wo)
        np.testing.assert_array_equal(a, b)
        assert sa == sb


def test_fc_paths_agree():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n, m = int(rng.integers(1, 200)), int(rng.integers(1, 40))
        codes = quantize_weights(rng.normal(size=(m, n))).codes
        x = sparse(rng, (n,))
        a, sa = kernels.fc_scatter_nb(x, codes)
        a2, _ = kernels.fc_scatter_nb(x, codes, wt=np.ascontiguousarray(codes.T))
        b, sb = kernels.fc_scatter_np(x, codes)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a2, b)
        assert sa == sb == np.count_nonzero(x) * m


def test_binning_paths_agree():
    rng = np.random.default_rng(3)
    n = 50_000
    t = np.sort(rng.integers(0, 10**6, n)).astype(np.uint64)
    x = rng.integers(0, 40, n).astype(np.uint16)
    y = rng.integers(0, 30, n).astype(np.uint16)
    p = rng.integers(0, 2, n).astype(np.uint8)
    for frames in (1, 7, 60):
        a = kernels._bin_events_nb(t, x, y, p, np.uint64(20_000), frames, 30, 40)
        b = kernels._bin_events_np(t, x, y, p, 20_000, frames, 30, 40)
        np.testing.assert_array_equal(a, b)


def test_disable_flag_selects_numpy_path():
    code = ("import evspike.kernels as k, evspike.events as e, numpy as np;"
            "s = e.EventStream(4, 4, [0, 10], [1, 2], [1, 3], [0, 1]);"
            "v = e.accumulate(s, e.AccumulationConfig(5, 'graded', 4, 4)).values;"
            "print(k.numba_enabled(), int(v.sum()))")
    env = dict(os.environ, EVSPIKE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "2"]
