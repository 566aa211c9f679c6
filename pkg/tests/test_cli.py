import json

import numpy as np
import pytest

from evspike.cli import format_model_table, main
from evspike.events import EventStream, FrameSequence, write_stream
from evspike.layers import dense_synops
from evspike.models import build_cnn_mlp, read_model, write_model


def small_model():
    return build_cnn_mlp("lif_graded", (2, 32, 32), channels=(4, 8), hidden=(8,))


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    assert main(["gen", "--seed", "7", "--out", str(d), "--n", "6", "--fall-fraction", "0.5",
                 "--duration-us", "100000"]) == 0
    return d


@pytest.fixture
def model_file(tmp_path):
    p = tmp_path / "m.evsm"
    write_model(p, small_model())
    return p


def tree(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_gen_is_deterministic(tmp_path, dataset):
    again = tmp_path / "again"
    assert main(["gen", "--seed", "7", "--out", str(again), "--n", "6", "--fall-fraction", "0.5",
                 "--duration-us", "100000"]) == 0
    assert tree(dataset) == tree(again)
    labels = json.loads((dataset / "labels.json").read_text())
    assert sum(s["label"] for s in labels["samples"]) == 3


def test_bench_missing_model_exits_2_without_report(tmp_path, dataset):
    report = tmp_path / "r.json"
    assert main(["bench", "--model", str(tmp_path / "nope.evsm"), "--data", str(dataset),
                 "--report", str(report)]) == 2
    assert not report.exists()
    assert list(tmp_path.glob("r.json*")) == []


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["bench", "--model"]) == 1
    assert main(["accumulate", "--in", "x", "--window-us", "10", "--out", "y", "--crop", "1,2"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_bad_json_config_exits_2(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o.evsm")]) == 2


def test_inspect_model_table(model_file, capsys):
    assert main(["inspect", str(model_file)]) == 0
    out = capsys.readouterr().out
    m = small_model()
    total = sum(dense_synops(layer) for layer in m.layers)
    assert f"dense SynOps per step: {total}" in out
    assert f"parameters: {m.n_params}" in out
    assert out == format_model_table(read_model(model_file))
    # one row per layer plus header
    assert sum(1 for line in out.splitlines() if line.strip()[:1].isdigit()) == len(m.layers)


def test_accumulate_and_infer(tmp_path, model_file, capsys):
    rng = np.random.default_rng(0)
    n = 500
    s = EventStream(64, 64, np.sort(rng.integers(0, 60_000, n)), rng.integers(0, 64, n),
                    rng.integers(0, 64, n), rng.integers(0, 2, n))
    src = tmp_path / "s.evs1"
    write_stream(src, s)
    frames = tmp_path / "f.npz"
    assert main(["accumulate", "--in", str(src), "--window-us", "20000", "--down", "2",
                 "--out", str(frames)]) == 0
    fr = FrameSequence.load(frames)
    assert fr.values.shape == (3, 2, 32, 32) and int(fr.values.sum()) == n
    assert main(["inspect", str(frames)]) == 0
    assert f"total count {n}" in capsys.readouterr().out
    report = tmp_path / "infer.json"
    assert main(["infer", "--model", str(model_file), "--frames", str(frames), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["steps"] == 3 and rep["prediction"] in ("fall", "nofall")
    assert len(rep["outputs"]) == 3


def test_timing_report(tmp_path, model_file):
    report = tmp_path / "t.json"
    assert main(["timing", "--model", str(model_file), "--scheme", "fall_through", "--step-us", "250",
                 "--power", "cores=61,synops=26e6,static=0.754,dyn=11.5", "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["hardware_steps"] == 4
    assert rep["latency_ms"] == pytest.approx(1.0)
    assert round(rep["power"]["total_mw"], 1) == 46.3


def test_bench_writes_report(tmp_path, dataset, model_file, capsys):
    report = tmp_path / "b.json"
    assert main(["bench", "--model", str(model_file), "--data", str(dataset), "--window-us", "20000",
                 "--report", str(report), "--power", "cores=61,static=0.754,dyn=11.5"]) == 0
    rep = json.loads(report.read_text())
    assert rep["schema"] == "evspike.bench/1" and rep["n_samples"] == 6 and rep["n_failed"] == 0
    c = rep["confusion"]
    assert c["tp"] + c["fn"] == 3 and c["tn"] + c["fp"] == 3
    assert rep["power"]["static_mw"] == pytest.approx(61 * 0.754)
    assert "f1" in capsys.readouterr().out


def test_train_writes_checkpoint(tmp_path, dataset):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({
        "model": {"arch": "cnn_mlp", "neuron_mode": "lif_graded", "input_shape": [2, 32, 32],
                  "channels": [4], "hidden": [4]},
        "train": {"epochs": 1, "batch_size": 3, "lr_backbone": 1e-3, "lr_head": 1e-3},
    }))
    out = tmp_path / "trained.evsm"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--val-data", str(dataset),
                 "--out", str(out)]) == 0
    assert read_model(out).n_params > 0
    assert (tmp_path / "trained.evsm.opt.npz").exists()
    hist = json.loads((tmp_path / "trained.evsm.history.json").read_text())
    assert len(hist["epoch_losses"]) == 1 and hist["best_epoch"] == 0


def test_shipped_desk_config_builds():
    from pathlib import Path

    from evspike.models import model_from_config
    from evspike.train import TrainConfig

    conf = json.loads((Path(__file__).parents[1] / "configs" / "desk_graded_lif.json").read_text())
    m = model_from_config(conf["model"])
    assert m.input_shape == (2, 32, 32) and m.decision == "spike_count"
    assert TrainConfig.from_dict(conf["train"]).oversample_falls == 6
