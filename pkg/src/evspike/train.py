"""Desk-scale training: time-batched numpy forward, backpropagation through
time with surrogate gradients at spike nonlinearities, focal loss, 8-bit
quantization-aware weights (straight-through) and Adam.

The trainer works on a :class:`TrainableModel`, which holds float master
weights for a :class:`~evspike.models.ModelGraph` template.  ``export()``
turns it back into a deployable graph with int8 weights.

Supported trainable layers: ``conv2d``, ``pwconv2d``, ``fc``, ``flatten`` and
global ``avgpool``.  Neurons: none, ReLU, SigmaDelta (trained as its ReLU
reconstruction), LIF (surrogate) and S4D (convolutional form).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bench import FocalLossParams, focal_loss_logit
from .errors import ConfigError, TrainingError
from .events import AccumulationConfig, accumulate
from .layers import FixedPointConfig, NeuronSpec, fake_quantize, quantize_weights
from .models import FALL, NOFALL, ModelGraph
from .neurons import S4dParams, quantize_state, s4d_convolve, s4d_kernel

log = logging.getLogger(__name__)

TRAINABLE = ("conv2d", "pwconv2d", "fc", "flatten", "avgpool")


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "fast_sigmoid_derivative"
    slope: float = 1.0

    def __post_init__(self):
        if self.kind != "fast_sigmoid_derivative":
            raise ConfigError(f"unknown surrogate {self.kind!r}")
        if not self.slope > 0:
            raise ConfigError("surrogate slope must be > 0")


def surrogate_grad(u, theta, spec: SurrogateSpec = SurrogateSpec(), mode="binary"):
    """Backward derivative of the spike nonlinearity at voltage ``u``.

    binary: g(u) = 1 / (1 + s|u - theta|)^2
    graded: H(u - theta) + u g(u)  (pass-through above threshold plus the
    threshold-crossing term)
    """
    u = np.asarray(u, dtype=np.float64)
    g = 1.0 / (1.0 + spec.slope * np.abs(u - theta)) ** 2
    if mode == "binary":
        return g
    if mode == "graded":
        return (u >= theta) + u * g
    raise ConfigError(f"unknown spike mode {mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_backbone: float = 1e-5
    lr_head: float = 1e-5
    surrogate: SurrogateSpec = SurrogateSpec()
    qat: bool = True
    seed: int = 0
    clip_norm: float = 1.0
    focal: FocalLossParams = FocalLossParams()
    loss: str = "focal"  # or "mse" (diagnostics)
    oversample_falls: int = 1  # each fall sample appears this many times per epoch
    lr_decay: float = 1.0  # learning-rate multiplier applied after every epoch
    logit_gain: float = 1.0  # spike_count training logit = gain * mean(y_fall - y_nofall)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.lr_backbone >= 0 and self.lr_head >= 0):
            raise ConfigError("learning rates must be >= 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if not self.logit_gain > 0:
            raise ConfigError("logit_gain must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.oversample_falls < 1:
            raise ConfigError("oversample_falls must be >= 1")
        if self.loss not in ("focal", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("surrogate"), dict):
            d["surrogate"] = SurrogateSpec(**d["surrogate"])
        if isinstance(d.get("focal"), dict):
            d["focal"] = FocalLossParams(**d["focal"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from None

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# trainable model

@dataclass
class TrainableModel:
    graph: ModelGraph
    weights: dict = field(default_factory=dict)  # layer index -> float array
    biases: dict = field(default_factory=dict)
    ssm: dict = field(default_factory=dict)  # layer index -> {"a", "b", "c"}

    @classmethod
    def from_graph(cls, graph: ModelGraph):
        tm = cls(graph)
        for i, layer in enumerate(graph.layers):
            if layer.kind not in TRAINABLE:
                raise ConfigError(f"layer {i} ({layer.kind}) is not trainable")
            if layer.kind == "avgpool" and layer.kernel != layer.in_shape[1]:
                raise ConfigError(f"layer {i}: only global average pooling is trainable")
            if layer.synaptic:
                tm.weights[i] = layer.weights.dequantize().astype(np.float64)
                b = layer.weights.bias
                tm.biases[i] = np.zeros(layer.out_shape[0]) if b is None else b.copy()
            if layer.neuron.kind == "s4d":
                p = layer.neuron.s4d
                tm.ssm[i] = {"a": p.a.copy(), "b": p.b.copy(), "c": p.c.copy()}
        return tm

    def head_start(self):
        g = self.graph
        return g.patch_end if g.patch_end is not None else len(g.layers)

    def params(self):
        """``(key, array, group)`` for every trainable tensor, in a fixed order."""
        out = []
        h = self.head_start()
        for i in sorted(self.weights):
            grp = "head" if i >= h else "backbone"
            out.append((("w", i), self.weights[i], grp))
            out.append((("b", i), self.biases[i], grp))
            if i in self.ssm:
                for k in ("a", "b", "c"):
                    out.append(((k + "_ssm", i), self.ssm[i][k], "head" if i >= h else "backbone"))
        return out

    def get(self, key):
        kind, i = key
        if kind == "w":
            return self.weights[i]
        if kind == "b":
            return self.biases[i]
        return self.ssm[i][kind[0]]

    def export(self) -> ModelGraph:
        """Deployable graph: int8 weights, float32 biases, trained S4D parameters."""
        layers = list(self.graph.layers)
        for i, w in self.weights.items():
            layer = layers[i]
            kw = {"weights": quantize_weights(w, bias=self.biases[i])}
            if i in self.ssm:
                s = self.ssm[i]
                kw["neuron"] = NeuronSpec("s4d", s4d=S4dParams(s["a"], s["b"], s["c"]))
            layers[i] = layer.replace(**kw)
        return replace(self.graph, layers=tuple(layers))

    def copy(self):
        return TrainableModel(self.graph, {k: v.copy() for k, v in self.weights.items()},
                              {k: v.copy() for k, v in self.biases.items()},
                              {k: {n: a.copy() for n, a in d.items()} for k, d in self.ssm.items()})


# --------------------------------------------------------------------------
# linear ops (batched over N = T * B)

def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def _col2im(dcols, in_shape, k, stride, pad):
    n, c, h, w = in_shape
    ho, wo = dcols.shape[1:3]
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky: ky + stride * (ho - 1) + 1: stride, kx: kx + stride * (wo - 1) + 1: stride] += \
                d[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return dx[:, :, pad: pad + h, pad: pad + w] if pad else dx


def _weight_matrix(layer, w):
    if layer.kind == "conv2d":
        return w.reshape(w.shape[0], -1), layer.kernel
    if layer.kind == "pwconv2d":
        return w, 1
    return w, None


def _linear_forward(layer, x, w, b):
    wm, k = _weight_matrix(layer, w)
    if k is None:
        return x @ wm.T + b, None
    cols = _im2col(x, k, layer.stride, layer.pad)
    z = cols @ wm.T + b
    return z.transpose(0, 3, 1, 2), cols


def _linear_backward(layer, dz, x, cols, w, need_dx):
    wm, k = _weight_matrix(layer, w)
    if k is None:
        dw = dz.T @ x
        db = dz.sum(axis=0)
        return dw, db, (dz @ wm if need_dx else None)
    dzt = dz.transpose(0, 2, 3, 1)
    co = dzt.shape[-1]
    flat = dzt.reshape(-1, co)
    dw = (flat.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = flat.sum(axis=0)
    dx = None
    if need_dx:
        dx = _col2im(dzt @ wm, x.shape, k, layer.stride, layer.pad)
    return dw, db, dx


# --------------------------------------------------------------------------
# neurons over a whole sequence (time-major: (T, B, ...))

def neuron_forward(neuron: NeuronSpec, z, ssm=None):
    """Returns ``(y, cache)`` for a time-major pre-activation sequence."""
    kind = neuron.kind
    if kind == "none":
        return z, None
    if kind in ("relu", "sigma_delta"):
        return np.maximum(z, 0.0), z > 0
    if kind == "lif":
        p = neuron.lif
        t_len = z.shape[0]
        i = np.zeros(z.shape[1:])
        u = np.zeros(z.shape[1:])
        y_prev = np.zeros(z.shape[1:])
        us = np.empty_like(z)
        keeps = np.empty_like(z)
        ys = np.empty_like(z)
        for t in range(t_len):
            i = p.alpha * i + z[t]
            keep = (y_prev < 1.0).astype(np.float64)
            u = p.beta * u * keep + i
            fired = u >= p.theta
            y = np.where(fired, u, 0.0) if p.spike_mode == "graded" else fired.astype(np.float64)
            us[t], keeps[t], ys[t] = u, keep, y
            y_prev = y
        return ys, (us, keeps)
    if kind == "s4d":
        params = S4dParams(ssm["a"], ssm["b"], ssm["c"]) if ssm is not None else neuron.s4d
        kern = s4d_kernel(params, z.shape[0])  # (M, T)
        return s4d_convolve(z, kern), (z, kern, params)
    raise ConfigError(f"neuron {kind!r} is not trainable")


def neuron_backward(neuron: NeuronSpec, cache, dy, surrogate: SurrogateSpec = SurrogateSpec()):
    """Returns ``(dz, ssm_grads or None)``.  The LIF reset path is detached."""
    kind = neuron.kind
    if kind == "none":
        return dy, None
    if kind in ("relu", "sigma_delta"):
        return dy * cache, None
    if kind == "lif":
        p = neuron.lif
        us, keeps = cache
        sg = surrogate_grad(us, p.theta, surrogate, p.spike_mode)
        dz = np.empty_like(dy)
        du_next = np.zeros(dy.shape[1:])
        di_next = np.zeros(dy.shape[1:])
        t_len = dy.shape[0]
        for t in range(t_len - 1, -1, -1):
            carry = p.beta * keeps[t + 1] * du_next if t + 1 < t_len else 0.0
            du = dy[t] * sg[t] + carry
            di = du + p.alpha * di_next
            dz[t] = di
            du_next, di_next = du, di
        return dz, None
    if kind == "s4d":
        z, kern, params = cache
        t_len = z.shape[0]
        dz = np.zeros_like(dy)
        dk = np.zeros(kern.shape[:-1] + (t_len,))
        lead = tuple(range(dy.ndim - (kern.ndim - 1)))  # time and batch axes
        for n in range(t_len):
            dz[: t_len - n] += kern[..., n] * dy[n:]
            dk[..., n] = np.sum(dy[n:] * z[: t_len - n], axis=lead)
        a, b, c = params.a, params.b, params.c
        nn = np.arange(t_len)
        pw = a[..., None, :] ** nn[:, None]  # (M, T, d)
        pw_m1 = np.where(nn[:, None] > 0, nn[:, None] * a[..., None, :] ** np.maximum(nn[:, None] - 1, 0), 0.0)
        dkk = dk[..., :, None]
        grads = {"c": np.sum(dkk * b[..., None, :] * pw, axis=-2),
                 "b": np.sum(dkk * c[..., None, :] * pw, axis=-2),
                 "a": np.sum(dkk * (c * b)[..., None, :] * pw_m1, axis=-2)}
        return dz, grads
    raise ConfigError(f"neuron {kind!r} is not trainable")


# --------------------------------------------------------------------------
# network forward / backward

def _fixed_linear(layer, flat, w, b, fixed: FixedPointConfig):
    """Integer-code accumulation in the same arithmetic as fixed-point
    inference: activations rounded to the grid (binary spikes kept as 0/1),
    exact integer sums, one rescale, then the float32 bias."""
    qw = quantize_weights(w)
    if layer.binary_input:
        xi = (flat != 0).astype(np.float64)
        q, scale = 1.0, qw.scale
    else:
        q = float(2 ** fixed.act_frac_bits)
        xi = np.round(flat * q)
        scale = qw.scale / q
    acc, cols = _linear_forward(layer, xi, qw.codes.astype(np.float64), 0.0)
    z = acc * scale
    z = z + (b[:, None, None] if z.ndim == 4 else b)
    # gradients are taken at the rounded inputs (straight-through)
    return z, (cols / q if cols is not None else None), xi / q


def _fixed_neuron(neuron: NeuronSpec, z, fixed: FixedPointConfig, ssm=None):
    kind = neuron.kind
    fb = fixed.state_frac_bits
    if kind in ("none", "relu"):
        y, cache = neuron_forward(neuron, z)
        return quantize_state(y, fixed.act_frac_bits, bits=32), cache
    if kind == "lif":
        p = neuron.lif
        i = np.zeros(z.shape[1:])
        u = np.zeros(z.shape[1:])
        y = np.zeros(z.shape[1:])
        us, keeps, ys = np.empty_like(z), np.empty_like(z), np.empty_like(z)
        for t in range(z.shape[0]):
            i = quantize_state(p.alpha * i + z[t], fb)
            keep = (y < 1.0).astype(np.float64)
            u = quantize_state(p.beta * u * keep + i, fb)
            fired = u >= p.theta
            y = np.where(fired, u, 0.0) if p.spike_mode == "graded" else fired.astype(np.float64)
            us[t], keeps[t], ys[t] = u, keep, y
        return ys, (us, keeps)
    if kind == "s4d":
        params = S4dParams(ssm["a"], ssm["b"], ssm["c"]) if ssm is not None else neuron.s4d
        s = np.zeros(z.shape[1:] + (params.a.shape[-1],))
        ys = np.empty_like(z)
        for t in range(z.shape[0]):
            s = quantize_state(params.a * s + params.b * z[t][..., None], fb)
            ys[t] = np.sum(params.c * s, axis=-1)
        return ys, (z, s4d_kernel(params, z.shape[0]), params)
    raise ConfigError(f"neuron {kind!r} has no fixed-point training forward")


def forward(tm: TrainableModel, frames, qat=False, fixed: FixedPointConfig | None = None):
    """Time-major forward.  ``frames``: (B, T, *input_shape).  Returns
    ``(outputs (T, B, 2), cache)``.

    With ``fixed`` (implies quantized weights) every arithmetic step mirrors
    fixed-point inference of the exported graph, so outputs agree bit for bit.
    """
    x = np.asarray(frames, dtype=np.float64)
    bsz, t_len = x.shape[:2]
    x = x.swapaxes(0, 1)
    qat = qat or fixed is not None
    cache = []
    for i, layer in enumerate(tm.graph.layers):
        feat = x.shape[2:]
        flat = x.reshape((t_len * bsz,) + feat)
        entry = {"x": flat}
        if layer.synaptic:
            w = tm.weights[i]
            wq = fake_quantize(w) if qat else w
            b = np.float32(tm.biases[i]).astype(np.float64) if qat else tm.biases[i]
            if fixed is not None:
                z, cols, entry["x"] = _fixed_linear(layer, flat, w, b, fixed)
            else:
                z, cols = _linear_forward(layer, flat, wq, b)
            entry.update(cols=cols, wq=wq)
            z = z.reshape((t_len, bsz) + z.shape[1:])
            if fixed is not None:
                y, entry["neuron"] = _fixed_neuron(layer.neuron, z, fixed, tm.ssm.get(i))
            else:
                y, entry["neuron"] = neuron_forward(layer.neuron, z, tm.ssm.get(i))
        else:
            if layer.kind == "flatten":
                y = x.reshape(t_len, bsz, -1)
            else:  # global avgpool
                y = x.mean(axis=(3, 4), keepdims=True)
            if fixed is not None:
                y = quantize_state(y, fixed.act_frac_bits, bits=32)
        cache.append(entry)
        x = y
    return x, cache


def backward(tm: TrainableModel, cache, dout, surrogate: SurrogateSpec = SurrogateSpec()):
    """Gradients for every key of ``tm.params()`` given dL/d(outputs)."""
    grads = {}
    d = dout
    layers = tm.graph.layers
    first_syn = min(tm.weights) if tm.weights else 0
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        entry = cache[i]
        t_len, bsz = d.shape[:2]
        if layer.synaptic:
            dz, sg = neuron_backward(layer.neuron, entry["neuron"], d, surrogate)
            if sg is not None:
                for k, v in sg.items():
                    grads[(k + "_ssm", i)] = v
            dz = dz.reshape((t_len * bsz,) + dz.shape[2:])
            dw, db, dx = _linear_backward(layer, dz, entry["x"], entry["cols"], entry["wq"],
                                          need_dx=i > first_syn)
            grads[("w", i)] = dw
            grads[("b", i)] = db
            if dx is None:
                break
            d = dx.reshape((t_len, bsz) + layer.in_shape)
        elif layer.kind == "flatten":
            d = d.reshape((t_len, bsz) + layer.in_shape)
        else:
            h, w = layer.in_shape[1:]
            d = np.broadcast_to(d, (t_len, bsz) + layer.in_shape) / (h * w)
    return grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decision_logit(out, mode, gain=1.0):
    """Per-sample fall logit ``d`` (p = logistic(d)) and dd/d(out).

    ``spike_count`` trains on d = gain (S_fall - S_nofall) / T, which has the same
    0.5 boundary as the deployed ratio rule while keeping the logit scale
    independent of the sequence length; ``max_logit_diff`` is the deployed
    rule itself.
    """
    t_len, bsz = out.shape[:2]
    dd = np.zeros_like(out)
    if mode == "spike_count":
        s = out.mean(axis=0)
        d = s[:, FALL] - s[:, NOFALL]
        d = gain * d
        dd[:, :, FALL] = gain / t_len
        dd[:, :, NOFALL] = -gain / t_len
    else:
        diff = out[:, :, FALL] - out[:, :, NOFALL]
        m = np.argmax(diff, axis=0)
        d = diff[m, np.arange(bsz)]
        dd[m, np.arange(bsz), FALL] = 1.0
        dd[m, np.arange(bsz), NOFALL] = -1.0
    return d, dd


def loss_and_grad(tm: TrainableModel, frames, labels, cfg: TrainConfig):
    """``(loss, grads, p)`` for one batch; loss is the batch mean."""
    labels = np.asarray(labels)
    out, cache = forward(tm, frames, cfg.qat)
    if cfg.loss == "mse":
        target = np.zeros_like(out)
        target[:, labels == 1, FALL] = 1.0
        target[:, labels == 0, NOFALL] = 1.0
        diff = out - target
        loss = 0.5 * float(np.mean(diff ** 2))
        dout = diff / diff.size
        p = None
    else:
        d, dd = decision_logit(out, tm.graph.decision, cfg.logit_gain)
        losses, dl = focal_loss_logit(d, labels, cfg.focal)
        loss = float(np.mean(losses))
        dout = dd * (dl / len(labels))[None, :, None]
        p = _sigmoid(d)
    grads = backward(tm, cache, dout, cfg.surrogate)
    return loss, grads, p


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_arrays(self):
        out = {"step": np.array(self.step)}
        for k in self.m:
            tag = f"{k[0]}:{k[1]}"
            out["m/" + tag] = self.m[k]
            out["v/" + tag] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrs):
        st = cls(step=int(arrs["step"]))
        for name in arrs:
            if name.startswith("m/"):
                kind, idx = name[2:].split(":")
                key = (kind, int(idx))
                st.m[key] = np.array(arrs[name])
                st.v[key] = np.array(arrs["v/" + name[2:]])
        return st


def clip_gradients(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


def adam_update(tm: TrainableModel, grads, opt: AdamState, cfg: TrainConfig, lr_scale=1.0):
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    for key, arr, grp in tm.params():
        g = grads.get(key)
        if g is None:
            continue
        lr = (cfg.lr_head if grp == "head" else cfg.lr_backbone) * lr_scale
        if lr == 0:
            continue
        m = opt.m.setdefault(key, np.zeros_like(arr))
        v = opt.v.setdefault(key, np.zeros_like(arr))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if key[0] == "a_ssm":
            np.clip(arr, -0.999, 0.999, out=arr)


def train_step(tm: TrainableModel, frames, labels, cfg: TrainConfig, opt: AdamState, lr_scale=1.0):
    """One optimizer step on a batch; returns ``(loss, tm)`` (updated in place)."""
    if len(labels) == 0:
        raise TrainingError("empty batch")
    loss, grads, _ = loss_and_grad(tm, frames, labels, cfg)
    if not math.isfinite(loss):
        norms = {f"{k[0]}{k[1]}": float(np.linalg.norm(v)) for k, v in grads.items()}
        raise TrainingError(f"non-finite loss {loss} at step {opt.step}; gradient norms {norms}")
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    adam_update(tm, grads, opt, cfg, lr_scale)
    return loss, tm


# --------------------------------------------------------------------------
# data

def dataset_arrays(samples, graph: ModelGraph, window_us=None, n_frames=None):
    """Stack accumulated frames of every sample: ``(N, T, C, H, W)`` int16 and labels."""
    c, h, w = graph.input_shape
    win = window_us or graph.timestep_us
    cfg = AccumulationConfig(win, graph.input_mode, w, h, graph.group)
    if n_frames is None:
        n_frames = max(1, max(int(math.ceil(s.stream.duration_us / (win * graph.group))) for s in samples))
    xs = np.empty((len(samples), n_frames, c, h, w), dtype=np.int16)
    for k, s in enumerate(samples):
        if (s.stream.width, s.stream.height) != (w, h):
            raise ConfigError(f"{s.name}: geometry {s.stream.width}x{s.stream.height} != model {w}x{h}")
        v = accumulate(s.stream, cfg, n_frames).values
        xs[k] = np.clip(v, -32768, 32767)
    return xs, np.array([s.label for s in samples], dtype=int)


@dataclass
class FitResult:
    history: list  # per-step losses
    opt: AdamState
    epoch_losses: list
    val_f1: list = field(default_factory=list)
    best_epoch: int | None = None


def fit(tm: TrainableModel, x, y, cfg: TrainConfig, opt: AdamState | None = None, callback=None,
        val=None) -> FitResult:
    """Mini-batch training for ``cfg.epochs``.

    The loss trajectory is bit-reproducible per seed.  With ``val = (x, y)``
    the weights of the epoch with the best validation F1 (latest on ties) are
    restored at the end.
    """
    from .bench import ConfusionCounts, metrics

    opt = opt or AdamState()
    rng = np.random.default_rng(cfg.seed)
    y = np.asarray(y)
    pool = np.arange(len(y))
    if cfg.oversample_falls > 1:
        pool = np.concatenate([pool] + [np.flatnonzero(y == 1)] * (cfg.oversample_falls - 1))
    n = len(pool)
    res = FitResult([], opt, [])
    best = None
    for epoch in range(cfg.epochs):
        order = pool[rng.permutation(n)]
        scale = cfg.lr_decay ** epoch
        ep_losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s: s + cfg.batch_size]
            loss, _ = train_step(tm, x[idx].astype(np.float64), y[idx], cfg, opt, scale)
            res.history.append(loss)
            ep_losses.append(loss)
        mean = float(np.mean(ep_losses))
        res.epoch_losses.append(mean)
        msg = ""
        if val is not None:
            _, pred = predict(tm, val[0], cfg.qat)
            f1 = metrics(ConfusionCounts.from_predictions(pred, val[1]))[3]
            res.val_f1.append(f1)
            msg = f" val f1 {f1:.4f}"
            if best is None or f1 >= best[0]:
                best = (f1, epoch, tm.copy())
        log.info("epoch %d/%d loss %.5f%s", epoch + 1, cfg.epochs, mean, msg)
        if callback is not None:
            callback(epoch, mean, tm)
    if best is not None:
        res.best_epoch = best[1]
        tm.weights, tm.biases, tm.ssm = best[2].weights, best[2].biases, best[2].ssm
    return res


def predict(tm: TrainableModel, x, qat=True, batch=32, fixed: FixedPointConfig | None = None):
    """Fall probability and class per sample using the training forward."""
    ps = []
    for s in range(0, len(x), batch):
        out, _ = forward(tm, x[s: s + batch].astype(np.float64), qat, fixed)
        if tm.graph.decision == "spike_count":
            sums = out.sum(axis=0)
            tot = sums[:, FALL] + sums[:, NOFALL]
            with np.errstate(invalid="ignore", divide="ignore"):
                p = np.where(tot == 0, 0.5, sums[:, FALL] / np.where(tot == 0, 1, tot))
        else:
            p = _sigmoid(np.max(out[:, :, FALL] - out[:, :, NOFALL], axis=0))
        ps.append(p)
    p = np.concatenate(ps) if ps else np.zeros(0)
    return p, (p > 0.5).astype(int)


# --------------------------------------------------------------------------
# gradient checking

def finite_diff_check(tm: TrainableModel, frames, labels, epsilon=1e-5, n_weights=64, seed=0,
                      cfg: TrainConfig | None = None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients
    over up to ``n_weights`` randomly chosen scalar parameters.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` sits
    above the roundoff noise of a central difference (about 1e-16 / epsilon).
    """
    cfg = replace(cfg or TrainConfig(), qat=False)
    frames = np.asarray(frames, dtype=np.float64)
    _, grads, _ = loss_and_grad(tm, frames, labels, cfg)
    rng = np.random.default_rng(seed)
    keys = [k for k, _, _ in tm.params()]
    sizes = np.array([tm.get(k).size for k in keys])
    picks = rng.choice(int(sizes.sum()), size=min(n_weights, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[j]
        arr = tm.get(key)
        pos = np.unravel_index(int(flat - offsets[j]), arr.shape)
        old = arr[pos]
        arr[pos] = old + epsilon
        lp, _, _ = loss_and_grad(tm, frames, labels, cfg)
        arr[pos] = old - epsilon
        lm, _, _ = loss_and_grad(tm, frames, labels, cfg)
        arr[pos] = old
        num = (lp - lm) / (2 * epsilon)
        ana = float(grads.get(key, np.zeros_like(arr))[pos])
        denom = max(abs(ana), abs(num), floor)
        worst = max(worst, abs(ana - num) / denom)
    return worst


def save_checkpoint(path, tm: TrainableModel, opt: AdamState, cfg: TrainConfig):
    """EVSM model at ``path`` plus ``<path>.opt.npz`` with master weights and Adam state."""
    import io as _io
    import json

    from .io import atomic_write_bytes
    from .models import write_model

    write_model(path, tm.export())
    arrs = opt.to_arrays()
    for key, arr, _ in tm.params():
        arrs[f"p/{key[0]}:{key[1]}"] = arr
    arrs["config"] = np.frombuffer(json.dumps(cfg.to_dict()).encode(), dtype=np.uint8)
    buf = _io.BytesIO()
    np.savez(buf, **arrs)
    atomic_write_bytes(str(path) + ".opt.npz", buf.getvalue())


def load_checkpoint(path):
    from .models import read_model

    graph = read_model(path)
    tm = TrainableModel.from_graph(graph)
    with np.load(str(path) + ".opt.npz") as z:
        arrs = {k: z[k] for k in z.files}
    for name, arr in arrs.items():
        if name.startswith("p/"):
            kind, idx = name[2:].split(":")
            tm.get((kind, int(idx)))[...] = arr
    return tm, AdamState.from_arrays(arrs)
