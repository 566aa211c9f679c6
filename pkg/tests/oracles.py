"""Independent brute-force references used by the tests."""
import numpy as np

from evspike.layers import conv_layer, fc_layer, quantize_weights


def synapses(spec):
    """Yield ``(in_index, out_index, weight_code)`` for every synapse of a layer."""
    w = spec.weights.codes
    if spec.kind == "fc":
        m, n = w.shape
        for o in range(m):
            for i in range(n):
                yield (i,), (o,), w[o, i]
        return
    ci_n, h, wd = spec.in_shape
    co_n, ho, wo = spec.out_shape
    k = 1 if spec.kind == "pwconv2d" else spec.kernel
    pad = spec.pad
    for co in range(co_n):
        for oy in range(ho):
            for ox in range(wo):
                for ky in range(k):
                    for kx in range(k):
                        iy = oy * spec.stride - pad + ky
                        ix = ox * spec.stride - pad + kx
                        if not (0 <= iy < h and 0 <= ix < wd):
                            continue
                        if spec.kind == "dwconv2d":
                            yield (co, iy, ix), (co, oy, ox), w[co, ky, kx]
                        elif spec.kind == "pwconv2d":
                            for ci in range(ci_n):
                                yield (ci, iy, ix), (co, oy, ox), w[co, ci]
                        else:
                            for ci in range(ci_n):
                                yield (ci, iy, ix), (co, oy, ox), w[co, ci, ky, kx]


def enumerate_layer(spec, x):
    """Pre-activation (without bias, in weight-code units) and SynOp count."""
    z = np.zeros(spec.out_shape)
    count = 0
    for i, o, wv in synapses(spec):
        v = x[i]
        if v != 0:
            z[o] += wv * v
            count += 1
    return z, count


def n_synapses(spec):
    return sum(1 for _ in synapses(spec))


def random_layer(rng, kind=None):
    kind = kind or rng.choice(["conv2d", "dwconv2d", "pwconv2d", "fc"])
    if kind == "fc":
        n, m = int(rng.integers(1, 40)), int(rng.integers(1, 20))
        return fc_layer(n, quantize_weights(rng.normal(size=(m, n))))
    ci = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    stride = int(rng.integers(1, 3))
    padding = str(rng.choice(["valid", "same"]))
    if kind == "conv2d":
        wts = rng.normal(size=(int(rng.integers(1, 4)), ci, k, k))
    elif kind == "dwconv2d":
        wts = rng.normal(size=(ci, k, k))
    else:
        wts = rng.normal(size=(int(rng.integers(1, 4)), ci))
    return conv_layer(kind, (ci, h, w), quantize_weights(wts), stride, padding)


def sparse_input(rng, shape, density):
    x = rng.integers(-3, 4, size=shape).astype(np.float64)
    x[rng.random(shape) > density] = 0.0
    return x
