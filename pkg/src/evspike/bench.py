"""Decision rules, detection metrics, focal loss, SynOps sparsity, the synthetic
fall/no-fall generator and the benchmark runner."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EvspikeError, ValidationError
from .events import AccumulationConfig, EventStream, RoiConfig, accumulate, preprocess, read_stream
from .io import atomic_write_bytes, atomic_write_json
from .layers import SynOpsLedger
from .models import FALL, NOFALL, InferenceSession, ModelGraph, PatchConfig
from .schedule import PowerModel, ScheduleConfig, estimate_power, hardware_steps, timing

log = logging.getLogger(__name__)

REPORT_SCHEMA = "evspike.bench/1"
EPS = 1e-7


# --------------------------------------------------------------------------
# decisions and losses

def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def decide(outputs, mode="max_logit_diff", threshold=0.5):
    """Collapse per-step outputs ``(T, 2)`` of one sample into ``(class, p)``.

    ``spike_count``: p = S_fall / (S_fall + S_nofall) over summed output
    spikes (0/0 -> 0.5).  ``max_logit_diff``: p = logistic(max_t(l_fall -
    l_nofall)).  The class is Fall (1) only when p is strictly above the
    threshold, so ties go to NoFall (0).
    """
    out = np.asarray(outputs, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] == 0 or out.shape[1] != 2:
        raise ValidationError(f"decide needs >= 1 step of 2 outputs, got shape {out.shape}")
    if mode == "spike_count":
        s = out.sum(axis=0)
        tot = s[FALL] + s[NOFALL]
        p = 0.5 if tot == 0 else float(s[FALL] / tot)
    elif mode == "max_logit_diff":
        p = _sigmoid(float(np.max(out[:, FALL] - out[:, NOFALL])))
    else:
        raise ConfigError(f"unknown decision mode {mode!r}")
    return int(p > threshold), p


@dataclass(frozen=True)
class FocalLossParams:
    alpha: float = 0.9
    gamma: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0) or self.gamma < 0:
            raise ConfigError("focal loss needs alpha in [0, 1] and gamma >= 0")


@dataclass(frozen=True)
class LabeledPrediction:
    p: float
    y_hat: int


def focal_loss(pred: LabeledPrediction, params: FocalLossParams = FocalLossParams()):
    return float(focal_loss_array(pred.p, pred.y_hat, params))


def focal_loss_array(p, y, params: FocalLossParams = FocalLossParams()):
    """Element-wise focal loss (natural log), ``p`` clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y)
    a, g = params.alpha, params.gamma
    pos = -a * (1.0 - p) ** g * np.log(p)
    neg = -(1.0 - a) * p ** g * np.log(1.0 - p)
    return np.where(y == 1, pos, neg)


def focal_loss_grad(p, y, params: FocalLossParams = FocalLossParams()):
    """d(focal loss)/dp (zero where the clamp is active)."""
    p_raw = np.asarray(p, dtype=np.float64)
    p = np.clip(p_raw, EPS, 1.0 - EPS)
    y = np.asarray(y)
    a, g = params.alpha, params.gamma
    pos = a * (g * (1 - p) ** (g - 1) * np.log(p) - (1 - p) ** g / p) if g else -a / p
    neg = -(1 - a) * (g * p ** (g - 1) * np.log(1 - p) - p ** g / (1 - p)) if g else (1 - a) / (1 - p)
    d = np.where(y == 1, pos, neg)
    return np.where((p_raw < EPS) | (p_raw > 1 - EPS), 0.0, d)


def _log_sigmoid(d):
    return -np.logaddexp(0.0, -d)


def focal_loss_logit(d, y, params: FocalLossParams = FocalLossParams()):
    """Focal loss of p = logistic(d) and its derivative in ``d``, without clamping.

    Stays finite and informative when p saturates, which the clamped
    probability form cannot do.
    """
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y)
    a, g = params.alpha, params.gamma
    logp, log1mp = _log_sigmoid(d), _log_sigmoid(-d)
    p, q = np.exp(logp), np.exp(log1mp)
    pos = -a * q ** g * logp
    neg = -(1 - a) * p ** g * log1mp
    # d/dd of each branch, using dp/dd = p q
    dpos = a * q ** g * (g * p * logp - q)
    dneg = (1 - a) * p ** g * (p - g * q * log1mp)
    return np.where(y == 1, pos, neg), np.where(y == 1, dpos, dneg)


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred, label):
        pred = np.asarray(pred, dtype=bool)
        label = np.asarray(label, dtype=bool)
        return cls(int(np.sum(pred & label)), int(np.sum(pred & ~label)),
                   int(np.sum(~pred & ~label)), int(np.sum(~pred & label)))


def f1_from(precision, recall):
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def metrics(c: ConfusionCounts):
    """``(accuracy, precision, recall, f1)``; undefined ratios are reported as 0."""
    if c.total <= 0:
        raise ValidationError("metrics need at least one evaluated sample")
    acc = (c.tp + c.tn) / c.total
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return acc, prec, rec, f1_from(prec, rec)


def sparsity(ledger: SynOpsLedger, model: ModelGraph, timesteps: int, timestep_us=None):
    """``(cost in SynOps/s, sparsity factor)`` of a replay of ``timesteps`` steps.

    The dense reference is the SynOp count of the same topology with every
    input nonzero, tallied by the ledger for the layers actually executed.
    """
    if timesteps <= 0:
        raise ValidationError("sparsity needs timesteps > 0")
    step = timestep_us or model.timestep_us * model.group
    elapsed = timesteps * step / 1e6
    cost = ledger.total_synops / elapsed
    dense = ledger.total_dense / elapsed
    return cost, (math.inf if cost == 0 else dense / cost)


# --------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticParams:
    width: int = 32
    height: int = 32
    n_samples: int = 100
    fall_fraction: float = 0.07
    noise_rate: float = 0.2  # background events per pixel per second
    duration_us: int = 1_000_000
    sim_dt_us: int = 1_000

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("synthetic geometry must be at least 8x8")
        if self.n_samples < 0 or not 0 <= self.fall_fraction <= 1 or self.noise_rate < 0:
            raise ConfigError("invalid synthetic parameters")
        if self.duration_us <= 0 or self.sim_dt_us <= 0:
            raise ConfigError("durations must be > 0")


@dataclass(eq=False)
class Sample:
    name: str
    label: int
    stream: EventStream
    scenario: str = ""
    trajectory: np.ndarray | None = None  # (steps, 5): t_us, cx, cy, rx, ry


def _blob_mask(cx, cy, rx, ry, width, height):
    ys, xs = np.mgrid[0:height, 0:width]
    return ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0


def blob_mask(cx, cy, rx, ry, width, height):
    """Pixels covered by the actor ellipse (exported for trace checks)."""
    return _blob_mask(cx, cy, rx, ry, width, height)


def _trajectory(rng, scenario, p: SyntheticParams, r):
    """Per simulation step ``(t_us, cx, cy, rx, ry)`` of the actor ellipse.

    Standing actors are upright ellipses (ry = 2 rx); a fall drops the actor
    to the floor while it rotates to lying (radii swap), a sit lowers it
    slowly with a slight crouch.
    """
    steps = p.duration_us // p.sim_dt_us
    t = np.arange(steps) * p.sim_dt_us
    ts = t / 1e6
    dur = p.duration_us / 1e6
    w, h = p.width, p.height
    rx = np.full(steps, r)
    ry = np.full(steps, 2.0 * r)
    sway = rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * ts + rng.uniform(0, 6.3))
    if scenario == "fall":
        x0 = rng.uniform(2 * r + 1, w - 2 * r - 1)
        y_top = rng.uniform(2 * r + 1, h * 0.45)
        y_bot = h - r - rng.uniform(0.5, 2.0)
        onset = rng.uniform(0.1, 0.5) * dur
        length = rng.uniform(0.2, 0.35)
        tau = np.clip((ts - onset) / length, 0.0, 1.0)
        ease = tau ** 2
        cy = y_top + (y_bot - y_top) * ease
        cx = x0 + sway * (tau == 0) + rng.uniform(-2, 2) * tau
        rx = r * (1.0 + ease)
        ry = r * (2.0 - ease)
    elif scenario == "walk":
        span = w - 2 * r
        speed = rng.uniform(12, 35) * rng.choice([-1, 1])
        pos = np.mod(rng.uniform(0, span) + speed * ts, 2 * span)
        cx = r + np.where(pos > span, 2 * span - pos, pos)
        cy = np.full_like(ts, rng.uniform(2 * r + 1, h - 2 * r - 1)) + 0.3 * sway
    elif scenario == "sit":
        x0 = rng.uniform(r + 1, w - r - 1)
        y_top = rng.uniform(2 * r + 1, h * 0.45)
        drop = rng.uniform(0.1, 0.2) * h
        onset = rng.uniform(0.05, 0.3) * dur
        length = rng.uniform(0.6, 0.9)
        tau = np.clip((ts - onset) / length, 0.0, 1.0)
        smooth = 3 * tau ** 2 - 2 * tau ** 3
        cy = y_top + drop * smooth
        cx = x0 + sway
        ry = r * (2.0 - 0.3 * smooth)
    else:  # stand
        cx = rng.uniform(r + 1, w - r - 1) + sway
        cy = np.full_like(ts, rng.uniform(2 * r + 1, h - 2 * r - 1)) + 0.5 * sway
    return np.stack([t, cx, cy, rx, ry], axis=1)


def _render(rng, traj, p: SyntheticParams):
    """Edge events of a moving ellipse plus uniform background noise."""
    w, h = p.width, p.height
    ts, xs, ys, ps = [], [], [], []
    ygrid, xgrid = np.mgrid[0:h, 0:w] + 0.5
    chunk = max(2, 4_000_000 // (w * h))
    prev = None
    for s0 in range(0, traj.shape[0], chunk):
        tr = traj[s0: s0 + chunk]
        m = (((xgrid - tr[:, 1, None, None]) / tr[:, 3, None, None]) ** 2
             + ((ygrid - tr[:, 2, None, None]) / tr[:, 4, None, None]) ** 2) <= 1.0
        full = m if prev is None else np.concatenate([prev[None], m])
        base = s0 if prev is None else s0 - 1
        for pol, d in ((1, full[1:] & ~full[:-1]), (0, full[:-1] & ~full[1:])):
            kk, yy, xx = np.nonzero(d)
            if kk.size:
                reps = 1 + (rng.random(kk.size) < 0.5)
                kk, yy, xx = np.repeat(kk, reps), np.repeat(yy, reps), np.repeat(xx, reps)
                ts.append(traj[base + kk + 1, 0] + rng.integers(0, p.sim_dt_us, kk.size))
                xs.append(xx)
                ys.append(yy)
                ps.append(np.full(kk.size, pol))
        prev = m[-1]
    n_noise = rng.poisson(p.noise_rate * w * h * p.duration_us / 1e6)
    if n_noise:
        ts.append(rng.integers(0, p.duration_us, n_noise))
        xs.append(rng.integers(0, w, n_noise))
        ys.append(rng.integers(0, h, n_noise))
        ps.append(rng.integers(0, 2, n_noise))
    if not ts:
        return EventStream.empty(w, h)
    t = np.concatenate(ts).astype(np.int64)
    order = np.argsort(t, kind="stable")
    return EventStream(w, h, t[order], np.concatenate(xs)[order], np.concatenate(ys)[order],
                       np.concatenate(ps)[order])


NOFALL_SCENARIOS = ("walk", "sit", "stand")


def gen_synthetic(seed: int, params: SyntheticParams = SyntheticParams()):
    """Deterministic labeled dataset; exactly ``round(n * fall_fraction)`` falls."""
    n = params.n_samples
    n_fall = int(round(n * params.fall_fraction))
    order = np.random.default_rng([seed, 0]).permutation(n)
    labels = np.zeros(n, dtype=int)
    labels[order[:n_fall]] = 1
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        r = max(1.5, params.height / 10)
        scenario = "fall" if labels[i] else NOFALL_SCENARIOS[rng.integers(len(NOFALL_SCENARIOS))]
        traj = _trajectory(rng, scenario, params, r)
        stream = _render(rng, traj, params)
        samples.append(Sample(f"sample_{i:05d}", int(labels[i]), stream, scenario, traj))
    return samples


def save_dataset(directory, samples, params: SyntheticParams | None = None, seed=None):
    from .events import encode_stream

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"schema": "evspike.dataset/1", "seed": seed,
                "params": asdict(params) if params else None,
                "samples": [{"name": s.name, "file": f"{s.name}.evs1", "label": s.label,
                             "scenario": s.scenario} for s in samples]}
    for s in samples:
        atomic_write_bytes(d / f"{s.name}.evs1", encode_stream(s.stream))
    atomic_write_json(d / "labels.json", manifest)


def load_dataset(directory):
    d = Path(directory)
    path = d / "labels.json"
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    return [Sample(e["name"], int(e["label"]), read_stream(d / e["file"]), e.get("scenario", ""))
            for e in manifest["samples"]]


# --------------------------------------------------------------------------
# benchmark

@dataclass
class BenchConfig:
    window_us: int | None = None  # default: model timestep
    mode: str | None = None  # default: model input mode
    group: int | None = None
    threshold: float = 0.5
    roi: RoiConfig | None = None
    downsample: int = 1
    patch: PatchConfig | None = None
    schedule: ScheduleConfig | None = None
    cores: int | None = None
    power: PowerModel | None = None
    threads: int = 1
    n_frames: int | None = None


@dataclass
class SampleResult:
    name: str
    label: int
    pred: int
    p: float
    steps: int
    synops: int
    dense: int


@dataclass
class BenchReport:
    model: str
    confusion: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float
    total_synops: int
    total_dense: int
    timesteps: int
    timestep_us: int
    cost_synops_per_s: float
    sparsity: float
    per_layer: list
    samples: list
    failures: list = field(default_factory=list)
    timing: dict | None = None
    power: dict | None = None

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "model": self.model,
            "n_samples": len(self.samples),
            "n_failed": len(self.failures),
            "failures": self.failures,
            "confusion": asdict(self.confusion),
            "metrics": {"accuracy": self.accuracy, "precision": self.precision,
                        "recall": self.recall, "f1": self.f1},
            "synops": {"total": self.total_synops, "dense_total": self.total_dense,
                       "timesteps": self.timesteps, "timestep_us": self.timestep_us,
                       "cost_per_s": self.cost_synops_per_s,
                       "sparsity": None if math.isinf(self.sparsity) else self.sparsity,
                       "sparsity_infinite": math.isinf(self.sparsity),
                       "per_layer": self.per_layer},
            "timing": self.timing,
            "power": self.power,
            "samples": [asdict(s) for s in self.samples],
        }

    def to_text(self):
        m = [("accuracy", self.accuracy), ("precision", self.precision), ("recall", self.recall),
             ("f1", self.f1)]
        lines = [f"model: {self.model}", f"samples: {len(self.samples)}  failed: {len(self.failures)}"]
        lines += [f"  {k:<10} {v:8.4f}" for k, v in m]
        c = self.confusion
        lines.append(f"  confusion  tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
        lines.append(f"  cost       {self.cost_synops_per_s / 1e6:10.3f} M SynOps/s")
        sp = "inf" if math.isinf(self.sparsity) else f"{self.sparsity:.2f}x"
        lines.append(f"  sparsity   {sp:>10}")
        if self.per_layer:
            lines.append("")
            lines.append(f"  {'#':>3} {'layer':<14} {'synops':>14} {'dense':>14} {'sparsity':>9}")
            for row in self.per_layer:
                s = row["synops"]
                ratio = f"{row['dense'] / s:9.2f}" if s else f"{'-':>9}"
                lines.append(f"  {row['index']:>3} {row['name']:<14} {s:>14} {row['dense']:>14} {ratio}")
        if self.timing:
            t = self.timing
            lines.append(f"  timing     {t['hardware_steps']} steps, {t['latency_ms']:.3f} ms, "
                         f"{t['max_throughput_hz']:.2f} Hz")
        if self.power:
            pw = self.power
            lines.append(f"  power      static {pw['static_mw']:.2f} mW, dynamic {pw['dynamic_mw']:.2f} mW, "
                         f"total {pw['total_mw']:.2f} mW")
        return "\n".join(lines) + "\n"


def frames_for(model: ModelGraph, stream: EventStream, cfg: BenchConfig):
    s = preprocess(stream, cfg.roi, cfg.downsample)
    c, h, w = model.input_shape
    acfg = AccumulationConfig(cfg.window_us or model.timestep_us, cfg.mode or model.input_mode,
                              w, h, cfg.group or model.group)
    return accumulate(s, acfg, cfg.n_frames)


def _evaluate(model, sample, cfg):
    frames = frames_for(model, sample.stream, cfg) if isinstance(model, ModelGraph) else None
    if isinstance(model, ModelGraph):
        if len(frames) == 0:
            raise DataError(f"{sample.name}: no frames")
        sess = InferenceSession(model)
        out = sess.run(frames.values, cfg.patch)
        ledger = sess.ledger
        decision = model.decision
    else:
        out, ledger, decision = model(sample)
    cls, p = decide(out, decision, cfg.threshold)
    return cls, p, len(out), ledger


def run_benchmark(model, dataset, cfg: BenchConfig = BenchConfig()) -> BenchReport:
    """Evaluate every sample (accumulate -> infer -> decide) and aggregate.

    ``model`` is a :class:`ModelGraph`, or any callable ``sample -> (outputs,
    ledger | None, decision_mode)`` standing in for one.  Per-sample data
    errors are recorded and skipped.
    """
    samples = list(dataset)
    if not samples:
        raise ValidationError("empty dataset")

    def job(sample):
        try:
            return sample, _evaluate(model, sample, cfg), None
        except (EvspikeError, ValueError) as exc:
            return sample, None, f"{type(exc).__name__}: {exc}"

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            outcomes = list(ex.map(job, samples))
    else:
        outcomes = [job(s) for s in samples]

    n_layers = len(model.layers) if isinstance(model, ModelGraph) else 0
    total = SynOpsLedger(n_layers)
    results, failures, steps = [], [], 0
    for sample, res, err in outcomes:
        if err is not None:
            log.warning("sample %s skipped: %s", sample.name, err)
            failures.append({"name": sample.name, "error": err})
            continue
        cls, p, n, ledger = res
        syn = dense = 0
        if ledger is not None:
            if ledger.n_layers != total.n_layers:
                total = SynOpsLedger(ledger.n_layers) if total.n_layers == 0 else total
            total.merge(ledger)
            syn, dense = ledger.total_synops, ledger.total_dense
        steps += n
        results.append(SampleResult(sample.name, sample.label, cls, p, n, syn, dense))
    if not results:
        raise DataError("every sample failed")

    conf = ConfusionCounts.from_predictions([r.pred for r in results], [r.label for r in results])
    acc, prec, rec, f1 = metrics(conf)
    if isinstance(model, ModelGraph):
        step_us = (cfg.window_us or model.timestep_us) * (cfg.group or model.group)
        name = model.name
        layer_names = [layer.name or layer.kind for layer in model.layers]
    else:
        step_us = cfg.window_us or 20_000
        name = getattr(model, "name", type(model).__name__)
        layer_names = [f"layer{i}" for i in range(total.n_layers)]
    elapsed = steps * step_us / 1e6
    cost = total.total_synops / elapsed if elapsed else 0.0
    spars = math.inf if total.total_synops == 0 else total.total_dense / total.total_synops
    per_layer = [{"index": i, "name": layer_names[i], "synops": int(total.synops[i]),
                  "dense": int(total.dense[i]), "synops_per_s": float(total.synops[i] / elapsed)}
                 for i in range(total.n_layers) if total.dense[i] or total.synops[i]]

    timing_d = power_d = None
    if cfg.schedule is not None and isinstance(model, ModelGraph):
        hw = hardware_steps(model, cfg.schedule)
        timing_d = timing(hw, cfg.schedule.step_time_us).to_dict()
    if cfg.power is not None and cfg.cores:
        st, dy, tot = estimate_power(cfg.cores, cost, cfg.power)
        power_d = {"cores": cfg.cores, "static_mw": st, "dynamic_mw": dy, "total_mw": tot,
                   "static_mw_per_core": cfg.power.static_mw_per_core,
                   "dynamic_pw_per_synop": cfg.power.dynamic_pw_per_synop}
    return BenchReport(name, conf, acc, prec, rec, f1, total.total_synops, total.total_dense, steps,
                       step_us, cost, spars, per_layer, results, failures, timing_d, power_d)


def write_report(path, report: BenchReport):
    """JSON report at ``path`` plus an aligned text table next to it."""
    atomic_write_json(path, report.to_dict())
    base, _ = os.path.splitext(os.fspath(path))
    atomic_write_bytes(base + ".txt", report.to_text().encode())
