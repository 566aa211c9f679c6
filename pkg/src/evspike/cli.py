"""``evspike`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal error.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, EvspikeError
from .io import atomic_write_bytes, atomic_write_json

log = logging.getLogger("evspike")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument helpers

def _ints(text, n, what):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers")
    return vals


def _crop(text):
    from .events import RoiConfig
    return RoiConfig(*_ints(text, 4, "--crop"))


def _patch(text):
    from .models import PatchConfig
    return PatchConfig(*_ints(text, 2, "--patch"))


def _kv(text):
    """``k=v,k=v`` into a dict of floats."""
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"value for {k!r} is not a number") from None
    return out


def _need_file(path, what):
    if not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise DataError(f"{what} not found: {path}")


def _out_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise DataError(f"output directory does not exist: {parent}")


def _power_model(d):
    from .schedule import PowerModel
    return PowerModel(d.get("static", PowerModel.static_mw_per_core),
                      d.get("dyn", PowerModel.dynamic_pw_per_synop))


def _read_json(path, what):
    _need_file(path, what)
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON: {exc}") from None


# --------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    from .bench import SyntheticParams, gen_synthetic, save_dataset

    params = SyntheticParams(args.width, args.height, args.n, args.fall_fraction, args.noise_rate,
                             args.duration_us)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise DataError(f"--out is not a directory: {out}")
    samples = gen_synthetic(args.seed, params)
    save_dataset(out, samples, params, args.seed)
    print(f"wrote {len(samples)} samples ({sum(s.label for s in samples)} falls) to {out}")


def cmd_accumulate(args):
    from .events import AccumulationConfig, accumulate, preprocess, read_stream

    _need_file(args.inp, "input stream")
    _out_parent(args.out)
    s = preprocess(read_stream(args.inp), args.crop, args.down)
    cfg = AccumulationConfig(args.window_us, args.mode, s.width, s.height, args.group)
    frames = accumulate(s, cfg, args.n_frames)
    buf = io.BytesIO()
    frames.save(buf)
    atomic_write_bytes(args.out, buf.getvalue())
    print(f"{len(frames)} frames of shape {frames.frame_shape} -> {args.out}")


def _load_frames(path):
    from .events import FrameSequence
    _need_file(path, "frames file")
    try:
        return FrameSequence.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read frames file {path}: {exc}") from None


def cmd_infer(args):
    from .bench import decide
    from .layers import FixedPointConfig
    from .models import InferenceSession, read_model

    _need_file(args.model, "model")
    frames = _load_frames(args.frames)
    _out_parent(args.report)
    model = read_model(args.model)
    sess = InferenceSession(model, FixedPointConfig() if args.fixed else None)
    out = sess.run(frames.values, args.patch)
    report = {"schema": "evspike.infer/1", "model": model.name, "steps": int(len(out)),
              "outputs": out.tolist(), "ledger": sess.ledger.to_dict()}
    if model.kind == "classifier" and len(out):
        cls, p = decide(out, model.decision, args.threshold)
        report.update(decision=model.decision, p_fall=p, prediction="fall" if cls else "nofall")
    atomic_write_json(args.report, report)
    msg = f"{len(out)} steps, {sess.ledger.total_synops} SynOps"
    if "prediction" in report:
        msg += f", p_fall={report['p_fall']:.4f} -> {report['prediction']}"
    print(msg)


def cmd_train(args):
    from .bench import load_dataset
    from .models import model_from_config, read_model
    from .train import TrainConfig, TrainableModel, dataset_arrays, fit, save_checkpoint

    conf = _read_json(args.config, "training config")
    _need_dir(args.data, "dataset")
    _out_parent(args.out)
    if args.val_data:
        _need_dir(args.val_data, "validation dataset")
    tcfg = dict(conf.get("train", {}))
    tcfg.setdefault("seed", args.seed)
    cfg = TrainConfig.from_dict(tcfg)
    if args.init:
        _need_file(args.init, "initial model")
        graph = read_model(args.init)
    else:
        mcfg = dict(conf.get("model", {}))
        mcfg.setdefault("seed", args.seed)
        graph = model_from_config(mcfg)
    samples = load_dataset(args.data)
    x, y = dataset_arrays(samples, graph, n_frames=conf.get("n_frames"))
    val = None
    if args.val_data:
        val = dataset_arrays(load_dataset(args.val_data), graph, n_frames=x.shape[1])
    tm = TrainableModel.from_graph(graph)
    res = fit(tm, x, y, cfg, val=val)
    save_checkpoint(args.out, tm, res.opt, cfg)
    hist = {"epoch_losses": res.epoch_losses, "val_f1": res.val_f1, "best_epoch": res.best_epoch,
            "steps": len(res.history)}
    atomic_write_json(str(args.out) + ".history.json", hist)
    print(f"trained {cfg.epochs} epochs on {len(y)} samples; final loss {res.epoch_losses[-1]:.5f}"
          + (f"; best val epoch {res.best_epoch + 1}" if res.best_epoch is not None else ""))


def cmd_bench(args):
    from .bench import BenchConfig, load_dataset, run_benchmark, write_report
    from .models import read_model
    from .schedule import ScheduleConfig

    _need_file(args.model, "model")
    _need_dir(args.data, "dataset")
    _out_parent(args.report)
    conf = _read_json(args.config, "benchmark config") if args.config else {}
    power = args.power if args.power is not None else conf.get("power")
    cores = None
    pm = None
    if power is not None:
        if "cores" not in power:
            raise ConfigError("power settings need cores=K")
        cores = int(power["cores"])
        pm = _power_model(power)
    schedule = None
    if args.scheme:
        schedule = ScheduleConfig(args.scheme, args.step_us, args.patches)
    model = read_model(args.model)
    dataset = load_dataset(args.data)
    cfg = BenchConfig(window_us=args.window_us, mode=args.mode, group=args.group,
                      threshold=args.threshold, roi=args.crop, downsample=args.down,
                      patch=args.patch, schedule=schedule, cores=cores, power=pm,
                      threads=args.threads)
    report = run_benchmark(model, dataset, cfg)
    write_report(args.report, report)
    sys.stdout.write(report.to_text())


def cmd_timing(args):
    from .models import read_model
    from .schedule import ScheduleConfig, estimate_power, hardware_steps, timing

    _need_file(args.model, "model")
    model = read_model(args.model)
    cfg = ScheduleConfig(args.scheme, args.step_us, args.patches)
    steps = hardware_steps(model, cfg)
    rep = timing(steps, cfg.step_time_us).to_dict()
    rep.update(model=model.name, scheme=cfg.scheme, step_time_us=cfg.step_time_us, patches=cfg.patches)
    if args.power is not None:
        if "cores" not in args.power or "synops" not in args.power:
            raise ConfigError("--power needs cores=K and synops=<SynOps/s>")
        st, dy, tot = estimate_power(int(args.power["cores"]), args.power["synops"],
                                     _power_model(args.power))
        rep["power"] = {"static_mw": st, "dynamic_mw": dy, "total_mw": tot}
    if args.report:
        _out_parent(args.report)
        atomic_write_json(args.report, rep)
    print(f"{model.name}: {steps} hardware steps x {cfg.step_time_us:g} us = "
          f"{rep['latency_ms']:.3f} ms, max {rep['max_throughput_hz']:.2f} Hz")
    if "power" in rep:
        p = rep["power"]
        print(f"power: static {p['static_mw']:.2f} mW + dynamic {p['dynamic_mw']:.2f} mW = "
              f"{p['total_mw']:.2f} mW")


def format_model_table(model):
    rows = [("#", "name", "kind", "in", "out", "neuron", "params", "dense SynOps/step")]
    for i, name, kind, ins, outs, neuron, params, dense in model.summary_rows():
        rows.append((str(i), name, kind, "x".join(map(str, ins)), "x".join(map(str, outs)), neuron,
                     str(params), str(dense)))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.rjust(w) if c in (0, 6, 7) else cell.ljust(w)
                       for c, (cell, w) in enumerate(zip(r, widths))).rstrip() for r in rows]
    lines.append("")
    lines.append(f"model {model.name}: input {'x'.join(map(str, model.input_shape))}, "
                 f"timestep {model.timestep_us} us, decision {model.decision}")
    lines.append(f"parameters: {model.n_params}")
    lines.append(f"dense SynOps per step: {model.dense_synops_per_step()}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args):
    from .events import read_stream
    from .models import read_model

    path = args.path
    _need_file(path, "artifact")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"EVSM":
        sys.stdout.write(format_model_table(read_model(path)))
    elif head == b"EVS1" or path.endswith(".csv"):
        s = read_stream(path)
        n = len(s)
        dur = s.duration_us
        pos = int(np.sum(s.p)) if n else 0
        print(f"event stream {s.width}x{s.height}: {n} events over {dur} us "
              f"({pos} positive, {n - pos} negative)")
    elif head[:2] == b"PK":
        fr = _load_frames(path)
        v = fr.values
        print(f"frames: {len(fr)} x {'x'.join(map(str, fr.frame_shape))}, window {fr.window_us} us, "
              f"mode {fr.mode}, group {fr.group}, total count {int(v.sum())}, "
              f"nonzero {int(np.count_nonzero(v))}")
    else:
        raise DataError(f"unrecognized artifact: {path}")


# --------------------------------------------------------------------------
# parser

def _global_flags(parser, defaults):
    sup = argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=0 if defaults else sup)
    parser.add_argument("--threads", type=int, default=(os.cpu_count() or 1) if defaults else sup)
    parser.add_argument("--log-level", default=None if defaults else sup,
                        help="overrides EVSPIKE_LOG (default WARNING)")


def build_parser():
    p = _Parser(prog="evspike", description="Event-driven sparse neural inference engine.")
    p.add_argument("--version", action="version", version=f"evspike {__version__}")
    _global_flags(p, True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    g = sub.add_parser("gen", help="generate a synthetic fall/no-fall dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--fall-fraction", type=float, default=0.07)
    g.add_argument("--noise-rate", type=float, default=0.2)
    g.add_argument("--duration-us", type=int, default=1_000_000)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("accumulate", help="bin an event stream into count frames")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--window-us", type=int, required=True)
    a.add_argument("--mode", choices=("graded", "binary"), default="graded")
    a.add_argument("--group", type=int, default=1)
    a.add_argument("--crop", type=_crop, default=None, metavar="x0,y0,w,h")
    a.add_argument("--down", type=int, default=1)
    a.add_argument("--n-frames", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_accumulate)

    i = sub.add_parser("infer", help="run a model over a frames file")
    i.add_argument("--model", required=True)
    i.add_argument("--frames", required=True)
    i.add_argument("--report", required=True)
    i.add_argument("--patch", type=_patch, default=None, metavar="size,stride")
    i.add_argument("--fixed", action="store_true", help="fixed-point execution")
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", default=None)
    t.add_argument("--init", default=None, help="start from this EVSM model")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="benchmark a model on a dataset directory")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--report", required=True)
    b.add_argument("--config", default=None, help="JSON with optional power coefficients")
    b.add_argument("--window-us", type=int, default=None)
    b.add_argument("--mode", choices=("graded", "binary"), default=None)
    b.add_argument("--group", type=int, default=None)
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--crop", type=_crop, default=None, metavar="x0,y0,w,h")
    b.add_argument("--down", type=int, default=1)
    b.add_argument("--patch", type=_patch, default=None, metavar="size,stride")
    b.add_argument("--scheme", choices=("pipelined", "fall_through"), default=None)
    b.add_argument("--step-us", type=float, default=250.0)
    b.add_argument("--patches", type=int, default=1)
    b.add_argument("--power", type=_kv, default=None, metavar="cores=K,static=mW,dyn=pW")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("timing", help="hardware steps, latency and power estimate")
    m.add_argument("--model", required=True)
    m.add_argument("--scheme", choices=("pipelined", "fall_through"), default="fall_through")
    m.add_argument("--step-us", type=float, default=250.0)
    m.add_argument("--patches", type=int, default=1)
    m.add_argument("--power", type=_kv, default=None, metavar="cores=K,synops=S,static=mW,dyn=pW")
    m.add_argument("--report", default=None)
    m.set_defaults(func=cmd_timing)

    n = sub.add_parser("inspect", help="describe a model, stream or frames file")
    n.add_argument("path")
    n.set_defaults(func=cmd_inspect)
    return p


def _setup_logging(level):
    level = (level or os.environ.get("EVSPIKE_LOG") or "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.log_level)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        np.random.seed(args.seed)
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, EvspikeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostics
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
