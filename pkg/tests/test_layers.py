import numpy as np
import pytest
from oracles import enumerate_layer, n_synapses, random_layer, sparse_input

from evspike.errors import AccumulatorOverflowError, ConfigError, ValidationError
from evspike.layers import (
    LINEAR, RELU, FixedPointConfig, LayerSpec, LayerState, NeuronSpec, QuantizedWeights,
    SynOpsLedger, conv_layer, dense_synops, fake_quantize, fanout_map, fc_layer, forward_layer,
    quantize_weights,
)
from evspike.neurons import LifParams


def run(spec, x, fixed=None, skip=None):
    ledger = SynOpsLedger(1)
    y = forward_layer(spec, x, LayerState.fresh(spec), ledger, 0, skip, fixed)
    return y, ledger


# -- worked examples ----------------------------------------------------------

def test_fc_example():
    spec = fc_layer(4, QuantizedWeights(np.ones((3, 4), np.int8), 1.0, np.zeros(3)), RELU)
    y, led = run(spec, np.array([0.0, 1.0, 0.0, 2.0]))
    assert y.tolist() == [3.0, 3.0, 3.0]
    assert led.synops[0] == 6


def test_conv_example():
    spec = conv_layer("conv2d", (1, 3, 3), QuantizedWeights(np.ones((1, 1, 3, 3), np.int8), 1.0))
    x = np.zeros((1, 3, 3))
    x[0, 0, 1] = 2.0
    x[0, 2, 2] = 1.0
    y, led = run(spec, x)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 3.0
    assert led.synops[0] == 2


def test_zero_input_gives_bias_only():
    spec = fc_layer(5, QuantizedWeights(np.full((2, 5), 7, np.int8), 0.5, np.array([0.25, -1.0])))
    y, led = run(spec, np.zeros(5))
    assert y.tolist() == [0.25, -1.0] and led.synops[0] == 0


def test_dense_synops_examples():
    fc = fc_layer(4096, QuantizedWeights(np.zeros((128, 4096), np.int8), 1.0))
    assert dense_synops(fc) == 524_288
    conv = conv_layer("conv2d", (2, 160, 160), QuantizedWeights(np.zeros((16, 2, 3, 3), np.int8), 1.0),
                      stride=2)
    assert conv.out_shape == (16, 79, 79)
    assert dense_synops(conv) == 79 * 79 * 16 * 18 == 1_797_408
    flat = LayerSpec("flatten", (4, 2, 2), (16,))
    assert dense_synops(flat) == 0


def test_dense_synops_closed_forms():
    rng = np.random.default_rng(0)
    for _ in range(50):
        spec = random_layer(rng)
        if spec.padding == "same" and spec.kind != "fc":
            continue
        co, ho, wo = spec.out_shape if spec.kind != "fc" else (spec.out_shape[0], 1, 1)
        expect = {"conv2d": ho * wo * co * spec.kernel ** 2 * spec.in_shape[0],
                  "dwconv2d": ho * wo * co * spec.kernel ** 2,
                  "pwconv2d": ho * wo * co * spec.in_shape[0],
                  "fc": spec.in_shape[0] * spec.out_shape[0]}[spec.kind]
        assert dense_synops(spec) == expect


# -- quantization -------------------------------------------------------------

def test_quantize_example():
    q = quantize_weights([-1.0, 0.5, 1.0])
    assert q.values.tolist() == [-127, 64, 127]
    assert q.scale == pytest.approx(1 / 127, rel=1e-7)


def test_quantize_all_zero():
    q = quantize_weights(np.zeros(5))
    assert q.scale == 1.0 and not q.values.any()


def test_quantize_error_bound():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        w = rng.normal(size=int(rng.integers(1, 20))) * 10 ** rng.uniform(-3, 3)
        q = quantize_weights(w)
        assert np.abs(q.values).max() <= 127
        assert np.all(np.abs(q.dequantize() - w) <= q.scale / 2 * (1 + 1e-6))


def test_fake_quantize_matches_dequantized_codes():
    w = np.random.default_rng(2).normal(size=(4, 5))
    np.testing.assert_array_equal(fake_quantize(w), quantize_weights(w).dequantize())


def test_weight_code_range_enforced():
    with pytest.raises(ValidationError):
        QuantizedWeights(np.array([-128], np.int8), 1.0)
    with pytest.raises(ValidationError):
        QuantizedWeights(np.array([1]), 0.0)


# -- SynOps accounting --------------------------------------------------------

@pytest.mark.parametrize("kind", ["conv2d", "dwconv2d", "pwconv2d", "fc"])
def test_enumeration_oracle(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(25):
        spec = random_layer(rng, kind)
        x = sparse_input(rng, spec.in_shape, rng.uniform(0, 1))
        z_ref, count = enumerate_layer(spec, x)
        y, led = run(spec, x)
        bias = spec.weights.bias
        if bias is not None:
            z_ref = z_ref * spec.weights.scale + (bias[:, None, None] if z_ref.ndim == 3 else bias)
        else:
            z_ref = z_ref * spec.weights.scale
        np.testing.assert_allclose(y, z_ref, rtol=1e-12, atol=1e-12)
        assert led.synops[0] == count


def test_dense_input_equals_dense_synops():
    rng = np.random.default_rng(3)
    for _ in range(40):
        spec = random_layer(rng)
        x = rng.uniform(0.5, 2.0, size=spec.in_shape)
        _, led = run(spec, x)
        assert led.synops[0] == dense_synops(spec) == n_synapses(spec) == led.dense[0]


def test_fanout_sums_to_dense():
    rng = np.random.default_rng(4)
    for _ in range(20):
        spec = random_layer(rng)
        assert fanout_map(spec).sum() == dense_synops(spec)


def test_sparse_equals_dense_path():
    # zeroing inputs must not change the result beyond removing their terms
    rng = np.random.default_rng(5)
    for _ in range(30):
        spec = random_layer(rng)
        x = sparse_input(rng, spec.in_shape, 0.3)
        y_sparse, _ = run(spec, x)
        w = spec.weights.codes * spec.weights.scale
        if spec.kind == "fc":
            dense = w @ x
        else:
            dense, _ = enumerate_layer(spec, x)
            dense = dense * spec.weights.scale
        b = spec.weights.bias
        if b is not None:
            dense = dense + (b[:, None, None] if dense.ndim == 3 else b)
        np.testing.assert_allclose(y_sparse, dense, rtol=1e-12, atol=1e-12)


def test_binary_input_accumulates_without_multiply():
    rng = np.random.default_rng(6)
    spec = random_layer(rng, "conv2d")
    x = (rng.random(spec.in_shape) < 0.4).astype(np.float64)
    y_mul, l1 = run(spec, x)
    y_acc, l2 = run(spec.replace(binary_input=True), x)
    np.testing.assert_array_equal(y_mul, y_acc)
    assert l1.synops[0] == l2.synops[0]


def test_ledger_counters():
    rng = np.random.default_rng(7)
    spec = fc_layer(10, quantize_weights(rng.normal(size=(4, 10))), RELU)
    led = SynOpsLedger(1)
    st = LayerState.fresh(spec)
    for _ in range(3):
        forward_layer(spec, np.ones(10), st, led, 0)
    assert led.synops[0] == 120 and led.timesteps[0] == 3 and led.neuron_updates[0] == 12
    other = led.copy()
    led.merge(other)
    assert led.total_synops == 240
    with pytest.raises(ValidationError):
        led.merge(SynOpsLedger(2))


def test_quantized_inference_is_deterministic():
    rng = np.random.default_rng(8)
    spec = random_layer(rng, "conv2d")
    x = sparse_input(rng, spec.in_shape, 0.5)
    a, _ = run(spec, x)
    b, _ = run(spec, x)
    assert a.tobytes() == b.tobytes()


# -- shapes, residuals, fixed point ---------------------------------------------

def test_shape_mismatch():
    spec = fc_layer(4, quantize_weights(np.ones((2, 4))))
    with pytest.raises(ValidationError, match="input shape"):
        run(spec, np.zeros(5))
    with pytest.raises(ValidationError):
        LayerSpec("fc", (4,), (3,), weights=quantize_weights(np.ones((2, 4))))
    with pytest.raises(ConfigError):
        LayerSpec("maxpool", (1, 2, 2), (1, 1, 1))


def test_residual_add():
    spec = LayerSpec("residual_add", (2, 3, 3), (2, 3, 3), skip=0)
    x = np.ones((2, 3, 3))
    y, led = run(spec, x, skip=np.full((2, 3, 3), 2.0))
    assert (y == 3.0).all() and led.synops[0] == 0
    with pytest.raises(ValidationError):
        run(spec, x, skip=np.ones((2, 3, 2)))


def test_fixed_point_overflow_names_layer():
    spec = fc_layer(3, QuantizedWeights(np.full((1, 3), 127, np.int8), 1.0), name="big")
    with pytest.raises(AccumulatorOverflowError, match="big"):
        run(spec, np.full(3, 1e6), fixed=FixedPointConfig())


def test_fixed_point_close_to_reference():
    rng = np.random.default_rng(9)
    spec = random_layer(rng, "conv2d").replace(neuron=RELU)
    x = rng.uniform(0, 1, spec.in_shape)
    ref, _ = run(spec, x)
    fx, _ = run(spec, x, fixed=FixedPointConfig(act_frac_bits=8))
    step = 2.0 ** -8
    bound = step * (np.abs(spec.weights.dequantize()).sum() + 1)
    assert np.max(np.abs(fx - ref)) <= bound
    np.testing.assert_array_equal(fx, np.round(fx / step) * step)


def test_lif_layer_counts_neuron_updates():
    spec = fc_layer(3, QuantizedWeights(np.ones((2, 3), np.int8), 1.0), NeuronSpec("lif", lif=LifParams()))
    led = SynOpsLedger(1)
    st = LayerState.fresh(spec)
    y1 = forward_layer(spec, np.ones(3), st, led, 0)
    assert y1.tolist() == [3.0, 3.0]
    y2 = forward_layer(spec, np.zeros(3), st, led, 0)
    assert led.neuron_updates[0] == 4 and led.synops[0] == 6
    assert y2.tolist() == [1.5, 1.5]  # hard reset, then u = i = 0.5 * 3
    assert LINEAR.kind == "none"
