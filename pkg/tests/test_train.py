import numpy as np
import pytest

from evspike.bench import ConfusionCounts, SyntheticParams, gen_synthetic, metrics
from evspike.errors import ConfigError, TrainingError
from evspike.layers import RELU, FixedPointConfig, NeuronSpec, fc_layer, quantize_weights
from evspike.models import FALL, InferenceSession, ModelGraph, build_cnn_mlp, build_cnn_s4d, build_s4d_head
from evspike.neurons import LifParams
from evspike.train import (
    AdamState, SurrogateSpec, TrainableModel, TrainConfig, backward, dataset_arrays, finite_diff_check,
    fit, forward, load_checkpoint, predict, save_checkpoint, surrogate_grad, train_step,
)


def mlp(sizes, hidden_neuron=RELU, seed=0, **kw):
    rng = np.random.default_rng(seed)
    layers = []
    for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = j == len(sizes) - 2
        q = quantize_weights(rng.normal(size=(b, a)) / np.sqrt(a), bias=rng.normal(size=b) * 0.1)
        layers.append(fc_layer(a, q, NeuronSpec("none") if last else hidden_neuron))
    return ModelGraph("mlp", layers, (sizes[0],), **kw)


def toy_batch(rng, n_in, batch=6, steps=4):
    x = rng.normal(size=(batch, steps, n_in))
    y = np.array([1, 0] * (batch // 2))
    return x, y


# -- surrogate ------------------------------------------------------------------

def test_surrogate_examples():
    assert surrogate_grad(1.0, 1.0) == 1.0
    assert surrogate_grad(1.2, 1.0) == pytest.approx(1 / 1.44, abs=1e-4)
    assert surrogate_grad(1.2, 1.0, mode="graded") == pytest.approx(1 + 1.2 / 1.44, abs=1e-4)
    assert surrogate_grad(0.0, 1.0, mode="graded") == 0.0
    assert surrogate_grad(3.0, 1.0, SurrogateSpec(slope=2.0)) == pytest.approx(1 / 25)
    with pytest.raises(ConfigError):
        SurrogateSpec("arctan")
    with pytest.raises(ConfigError):
        SurrogateSpec(slope=0.0)


def test_hand_lif_gradient():
    lif = NeuronSpec("lif", lif=LifParams(0.0, 0.0, 1.0, "graded"))
    g = ModelGraph("one", [fc_layer(1, quantize_weights(np.ones((2, 1))), lif)], (1,))
    tm = TrainableModel.from_graph(g)
    tm.weights[0] = np.array([[0.6], [0.0]])
    tm.biases[0] = np.zeros(2)
    out, cache = forward(tm, np.full((1, 1, 1), 2.0))
    assert out[0, 0].tolist() == pytest.approx([1.2, 0.0])
    dout = np.zeros_like(out)
    dout[0, 0, FALL] = 1.0
    grads = backward(tm, cache, dout)
    assert grads[("w", 0)][FALL, 0] == pytest.approx(2 * (1 + 1.2 / 1.44), abs=1e-12)


# -- gradient checks ------------------------------------------------------------

def test_gradcheck_linear_mse():
    tm = TrainableModel.from_graph(mlp([5, 2]))
    x, y = toy_batch(np.random.default_rng(0), 5)
    err = finite_diff_check(tm, x, y, cfg=TrainConfig(loss="mse"), n_weights=12)
    assert err < 1e-8


def test_gradcheck_two_layer_relu_focal():
    tm = TrainableModel.from_graph(mlp([6, 5, 2]))
    x, y = toy_batch(np.random.default_rng(1), 6)
    assert finite_diff_check(tm, x, y, n_weights=40) < 1e-4


def test_gradcheck_relu_s4d():
    layers = [fc_layer(6, quantize_weights(np.random.default_rng(2).normal(size=(5, 6)) * 0.4), RELU)]
    layers += build_s4d_head(5, model_dim=4, d_state=3, seed=3, gain=2.0)
    tm = TrainableModel.from_graph(ModelGraph("s4d", layers, (6,)))
    assert tm.ssm
    x, y = toy_batch(np.random.default_rng(4), 6, steps=6)
    assert finite_diff_check(tm, x, y, n_weights=60, seed=1) < 1e-4


def test_gradcheck_lif_runs():
    # surrogate gradients are not the true derivative; only check the plumbing
    lif = NeuronSpec("lif", lif=LifParams(0.5, 0.5, 0.3, "graded"))
    tm = TrainableModel.from_graph(mlp([6, 8, 2], hidden_neuron=lif, decision="spike_count"))
    x, y = toy_batch(np.random.default_rng(5), 6)
    err = finite_diff_check(tm, x, y, n_weights=20)
    assert np.isfinite(err)


# -- optimizer behaviour ----------------------------------------------------------

def test_zero_learning_rate_leaves_weights_unchanged():
    tm = TrainableModel.from_graph(mlp([6, 5, 2]))
    before = {k: a.tobytes() for k, a, _ in tm.params()}
    x, y = toy_batch(np.random.default_rng(6), 6)
    cfg = TrainConfig(lr_backbone=0.0, lr_head=0.0)
    train_step(tm, x, y, cfg, AdamState())
    assert {k: a.tobytes() for k, a, _ in tm.params()} == before


def test_training_reduces_loss():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(64, 3, 4))
    y = (x[:, :, 0].mean(axis=1) > 0).astype(int)
    tm = TrainableModel.from_graph(mlp([4, 8, 2]))
    res = fit(tm, x, y, TrainConfig(epochs=15, lr_backbone=1e-2, lr_head=1e-2, qat=False))
    assert res.epoch_losses[-1] < 0.5 * res.epoch_losses[0]


def test_fit_is_reproducible():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 3, 4))
    y = rng.integers(0, 2, 20)
    cfg = TrainConfig(epochs=3, batch_size=4, lr_backbone=1e-2, lr_head=1e-2, seed=5, oversample_falls=2)
    runs = []
    for _ in range(2):
        tm = TrainableModel.from_graph(mlp([4, 6, 2]))
        res = fit(tm, x, y, cfg)
        runs.append((res.history, [a.tobytes() for _, a, _ in tm.params()]))
    assert runs[0] == runs[1]


def test_fit_restores_best_validation_epoch():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(40, 3, 4))
    y = (x[:, :, 1].sum(axis=1) > 0).astype(int)
    tm = TrainableModel.from_graph(mlp([4, 6, 2]))
    snaps = []
    cfg = TrainConfig(epochs=5, lr_backbone=3e-2, lr_head=3e-2)
    res = fit(tm, x, y, cfg, callback=lambda e, l, m: snaps.append(m.copy()), val=(x[:20], y[:20]))
    best = max(range(5), key=lambda e: (res.val_f1[e], e))
    assert res.best_epoch == best
    for (_, a, _), (_, b, _) in zip(tm.params(), snaps[best].params()):
        np.testing.assert_array_equal(a, b)
    _, pred = predict(tm, x[:20])
    assert metrics(ConfusionCounts.from_predictions(pred, y[:20]))[3] == res.val_f1[best]


def test_train_step_errors():
    tm = TrainableModel.from_graph(mlp([4, 2]))
    with pytest.raises(TrainingError):
        train_step(tm, np.zeros((0, 2, 4)), np.zeros(0, int), TrainConfig(), AdamState())
    tm.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(tm, np.ones((2, 2, 4)), np.array([0, 1]), TrainConfig(qat=False), AdamState())


# -- quantization-aware forward vs deployed inference -------------------------------

def _graphs():
    small = dict(channels=(4, 8), hidden=(8,), gain=3.0)
    return {
        "relu": build_cnn_mlp("relu", (2, 24, 24), **small),
        "lif_graded": build_cnn_mlp("lif_graded", (2, 24, 24), **small),
        "lif_binary": build_cnn_mlp("lif_binary", (2, 24, 24), **small),
        "cnn_s4d": build_cnn_s4d((2, 24, 24), channels=(4, 8), model_dim=8, d_state=4, gain=3.0),
    }


def _frames(graph, rng):
    x = rng.poisson(0.3, (2, 5) + graph.input_shape).astype(np.float64)
    return (x > 0).astype(np.float64) if graph.input_mode == "binary" else x


def _inference(graph, frames, fixed):
    return np.stack([InferenceSession(graph, fixed=fixed).run(f) for f in frames], axis=1)


@pytest.mark.parametrize("name", ["relu", "lif_graded", "lif_binary", "cnn_s4d"])
def test_fixed_point_qat_forward_is_bit_exact(name):
    graph = _graphs()[name]
    tm = TrainableModel.from_graph(graph)
    tm.biases[max(tm.biases)] += 0.7  # make the small random output layer fire
    frames = _frames(graph, np.random.default_rng(10))
    fixed = FixedPointConfig()
    out, _ = forward(tm, frames, fixed=fixed)
    ref = _inference(tm.export(), frames, fixed)
    assert np.abs(ref).max() > 0
    assert out.tobytes() == ref.tobytes()


@pytest.mark.parametrize("name", ["relu", "lif_graded", "lif_binary", "cnn_s4d"])
def test_float_qat_forward_matches_inference(name):
    graph = _graphs()[name]
    tm = TrainableModel.from_graph(graph)
    frames = _frames(graph, np.random.default_rng(11))
    out, _ = forward(tm, frames, qat=True)
    ref = _inference(tm.export(), frames, None)
    # summation order differs (matrix product vs event scatter), nothing else
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12 * max(1.0, np.abs(ref).max()))


def test_fixed_point_backward_runs():
    graph = _graphs()["lif_graded"]
    tm = TrainableModel.from_graph(graph)
    frames = _frames(graph, np.random.default_rng(12))
    out, cache = forward(tm, frames, fixed=FixedPointConfig())
    grads = backward(tm, cache, np.ones_like(out))
    assert set(grads) == {k for k, _, _ in tm.params()}


# -- config, data, checkpoints -------------------------------------------------------

def test_train_config_validation_and_dict():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    cfg = TrainConfig(epochs=4, focal=TrainConfig().focal, surrogate=SurrogateSpec(slope=2.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_dataset_arrays_shapes():
    samples = gen_synthetic(3, SyntheticParams(n_samples=6, fall_fraction=0.5, duration_us=100_000))
    graph = build_cnn_mlp("lif_graded", (2, 32, 32), channels=(4,), hidden=(4,))
    x, y = dataset_arrays(samples, graph, window_us=20_000)
    assert x.shape == (6, 5, 2, 32, 32) and x.dtype == np.int16
    assert y.tolist() == [s.label for s in samples] and y.sum() == 3
    assert int(x.sum()) == sum(len(s.stream.t) for s in samples)
    with pytest.raises(ConfigError):
        dataset_arrays(samples, build_cnn_mlp("lif_graded", (2, 16, 16), channels=(4,), hidden=(4,)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    x, y = toy_batch(rng, 6)
    cfg = TrainConfig(lr_backbone=1e-2, lr_head=1e-2)
    tm = TrainableModel.from_graph(mlp([6, 5, 2]))
    opt = AdamState()
    train_step(tm, x, y, cfg, opt)
    path = tmp_path / "ck.evsm"
    save_checkpoint(path, tm, opt, cfg)
    tm2, opt2 = load_checkpoint(path)
    assert opt2.step == opt.step
    for (k, a, _), (k2, b, _) in zip(tm.params(), tm2.params()):
        assert k == k2 and a.tobytes() == b.tobytes()
    l1, _ = train_step(tm, x, y, cfg, opt)
    l2, _ = train_step(tm2, x, y, cfg, opt2)
    assert l1 == l2
    for (_, a, _), (_, b, _) in zip(tm.params(), tm2.params()):
        assert a.tobytes() == b.tobytes()
