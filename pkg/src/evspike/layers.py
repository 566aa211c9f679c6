"""Event-driven layers over 8-bit weights, with synaptic-operation accounting.

A layer's synaptic part only visits nonzero inputs; each nonzero input adds
its weight column to every destination it feeds and costs one SynOp per
destination.  The attached neuron model then turns pre-activations into the
layer output.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from . import kernels
from .errors import AccumulatorOverflowError, ConfigError, ValidationError
from .neurons import (
    LifParams, LifState, S4dParams, S4dState, SigmaDeltaParams, SigmaDeltaState,
    lif_step, lif_step_fixed, quantize_state, relu_step, s4d_step, s4d_step_fixed,
    sigma_delta_step,
)

SYNAPTIC = ("conv2d", "dwconv2d", "pwconv2d", "fc")
KINDS = SYNAPTIC + ("avgpool", "flatten", "residual_add")
INT32_MAX = 2**31 - 1


# --------------------------------------------------------------------------
# weights

@dataclass(frozen=True, eq=False)
class QuantizedWeights:
    """Symmetric per-tensor int8 weights.

    ``scale`` and ``bias`` are always float32-representable so that model
    files reproduce inference bit-exactly.
    """

    values: np.ndarray
    scale: float
    bias: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype != np.int8:
            if np.any(np.abs(v) > 127):
                raise ValidationError("weight codes must lie in [-127, 127]")
            v = v.astype(np.int8)
        elif np.any(v == -128):
            raise ValidationError("weight code -128 is not allowed")
        if not self.scale > 0:
            raise ValidationError("weight scale must be > 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float32).astype(np.float64)
            object.__setattr__(self, "bias", b)
        object.__setattr__(self, "_codes", v.astype(np.float64))
        object.__setattr__(self, "_layouts", {})

    @property
    def codes(self):
        """Weight codes as float64 (exact small integers)."""
        return self._codes

    def scatter_layout(self):
        """Codes with the input axis first, as the event-driven kernels walk them.

        fc (M, N) -> (N, M); conv (Co, Ci, k, k) -> (Ci, k, k, Co);
        pointwise (Co, Ci) viewed as a 1x1 conv -> (Ci, 1, 1, Co).  Cached.
        """
        lay = self._layouts.get("scatter")
        if lay is None:
            c = self._codes
            if c.ndim == 4:
                lay = np.ascontiguousarray(c.transpose(1, 2, 3, 0))
            else:
                lay = np.ascontiguousarray(c.T)
            self._layouts["scatter"] = lay
        return lay

    def dequantize(self):
        return self._codes * self.scale

    @property
    def n_params(self):
        return self.values.size + (0 if self.bias is None else self.bias.size)


def quantize_weights(w, bits=8, bias=None) -> QuantizedWeights:
    """Symmetric per-tensor quantization: scale = max|w| / (2^(bits-1) - 1)."""
    w = np.asarray(w, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    m = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(m / qmax)) if m > 0 else 1.0
    values = np.clip(np.round(w / scale), -qmax, qmax).astype(np.int8)
    return QuantizedWeights(values, scale, bias)


def fake_quantize(w, bits=8):
    """Dequantized values of :func:`quantize_weights` (for QAT forwards)."""
    q = quantize_weights(w, bits)
    return q.dequantize()


# --------------------------------------------------------------------------
# neuron attachment

@dataclass(frozen=True, eq=False)
class NeuronSpec:
    kind: str = "none"  # none | relu | sigma_delta | lif | s4d
    sigma_delta: SigmaDeltaParams | None = None
    lif: LifParams | None = None
    s4d: S4dParams | None = None

    def __post_init__(self):
        if self.kind not in ("none", "relu", "sigma_delta", "lif", "s4d"):
            raise ConfigError(f"unknown neuron kind {self.kind!r}")
        need = {"sigma_delta": self.sigma_delta, "lif": self.lif, "s4d": self.s4d}
        if self.kind in need and need[self.kind] is None:
            raise ConfigError(f"neuron kind {self.kind!r} needs parameters")

    @property
    def stateful(self):
        return self.kind in ("sigma_delta", "lif", "s4d")

    @property
    def binary(self):
        return self.kind == "lif" and self.lif.spike_mode == "binary"

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "sigma_delta":
            d["theta"] = self.sigma_delta.theta
        elif self.kind == "lif":
            p = self.lif
            d.update(alpha=p.alpha, beta=p.beta, theta=p.theta, spike_mode=p.spike_mode)
        return d

    @classmethod
    def from_dict(cls, d, s4d=None):
        kind = d["kind"]
        if kind == "sigma_delta":
            return cls(kind, sigma_delta=SigmaDeltaParams(d["theta"]))
        if kind == "lif":
            return cls(kind, lif=LifParams(d["alpha"], d["beta"], d["theta"], d["spike_mode"]))
        if kind == "s4d":
            return cls(kind, s4d=s4d)
        return cls(kind)


RELU = NeuronSpec("relu")
LINEAR = NeuronSpec("none")


# --------------------------------------------------------------------------
# layer spec

@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of a :class:`~evspike.models.ModelGraph`.

    ``padding`` is ``"valid"`` or ``"same"`` (symmetric ``(k-1)//2`` zero
    padding).  ``skip`` is the index of the layer whose *input* a
    ``residual_add`` adds back.  ``delta_input`` marks layers fed by
    SigmaDelta spikes: their synaptic part accumulates input deltas.
    ``binary_input`` marks layers fed by binary spikes, which accumulate
    weights without multiplying.
    """

    kind: str
    in_shape: tuple
    out_shape: tuple
    kernel: int = 1
    stride: int = 1
    padding: str = "valid"
    weights: QuantizedWeights | None = None
    neuron: NeuronSpec = LINEAR
    skip: int | None = None
    delta_input: bool = False
    binary_input: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(v) for v in self.out_shape))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("valid", "same"):
            raise ConfigError(f"unsupported padding {self.padding!r}")
        expect = infer_out_shape(self.kind, self.in_shape, self.kernel, self.stride, self.padding,
                                 self.weights)
        if expect is not None and expect != self.out_shape:
            raise ValidationError(
                f"layer {self.name or self.kind}: out_shape {self.out_shape} inconsistent, expected {expect}")
        if self.kind in SYNAPTIC and self.weights is None:
            raise ConfigError(f"{self.kind} layer needs weights")
        if self.kind == "residual_add" and self.skip is None:
            raise ConfigError("residual_add needs a skip index")

    @property
    def pad(self):
        return (self.kernel - 1) // 2 if self.padding == "same" else 0

    @property
    def synaptic(self):
        return self.kind in SYNAPTIC

    @property
    def fan_in(self):
        if self.kind in ("conv2d",):
            return self.kernel * self.kernel * self.in_shape[0]
        if self.kind == "pwconv2d":
            return self.in_shape[0]
        if self.kind == "dwconv2d":
            return self.kernel * self.kernel
        if self.kind == "fc":
            return self.in_shape[0]
        return 0

    @property
    def n_params(self):
        p = self.weights.n_params if self.weights is not None else 0
        if self.neuron.kind == "s4d":
            p += 3 * self.neuron.s4d.a.size
        return p

    @cached_property
    def dense_synops(self):
        return dense_synops(self)

    def replace(self, **kw):
        return replace(self, **kw)


def infer_out_shape(kind, in_shape, kernel=1, stride=1, padding="valid", weights=None):
    if kind in ("conv2d", "dwconv2d", "pwconv2d"):
        c, h, w = in_shape
        k = 1 if kind == "pwconv2d" else kernel
        pad = (k - 1) // 2 if padding == "same" else 0
        ho, wo = kernels.conv_out_size(h, k, stride, pad), kernels.conv_out_size(w, k, stride, pad)
        if ho < 1 or wo < 1:
            raise ValidationError(f"{kind} kernel {k} larger than {h}x{w} input")
        cout = c if kind == "dwconv2d" else (weights.values.shape[0] if weights is not None else None)
        return None if cout is None else (cout, ho, wo)
    if kind == "fc":
        return None if weights is None else (weights.values.shape[0],)
    if kind == "avgpool":
        c, h, w = in_shape
        return (c, (h - kernel) // stride + 1, (w - kernel) // stride + 1)
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "residual_add":
        return tuple(in_shape)
    return None


def conv_layer(kind, in_shape, weights, stride=1, padding="valid", neuron=LINEAR, name=""):
    """Build a conv-family :class:`LayerSpec`, deriving kernel and out_shape."""
    v = weights.values
    if kind == "conv2d":
        k = v.shape[2]
    elif kind == "dwconv2d":
        k = v.shape[1]
    else:
        k = 1
    out = infer_out_shape(kind, in_shape, k, stride, padding, weights)
    return LayerSpec(kind, in_shape, out, k, stride, padding, weights, neuron, name=name)


def fc_layer(n_in, weights, neuron=LINEAR, name=""):
    return LayerSpec("fc", (n_in,), (weights.values.shape[0],), weights=weights, neuron=neuron, name=name)


# --------------------------------------------------------------------------
# SynOp accounting

def fanout_map(spec: LayerSpec):
    """Number of synapses each input element drives (shape ``in_shape``)."""
    if spec.kind in ("conv2d", "pwconv2d"):
        k = spec.kernel if spec.kind == "conv2d" else 1
        return kernels.conv_fanout(spec.in_shape, k, spec.stride, spec.pad,
                                   spec.out_shape[1:], spec.out_shape[0])
    if spec.kind == "dwconv2d":
        return kernels.conv_fanout(spec.in_shape, spec.kernel, spec.stride, spec.pad,
                                   spec.out_shape[1:], 1)
    if spec.kind == "fc":
        return np.full(spec.in_shape, spec.out_shape[0], dtype=np.int64)
    return np.zeros(spec.in_shape, dtype=np.int64)


def dense_synops(spec: LayerSpec) -> int:
    """SynOps of one timestep with every input nonzero.

    Equals ``H_out*W_out*C_out*k*k*C_in`` for valid convolutions; with
    ``same`` padding only real (non-padding) synapses are counted.
    """
    if not spec.synaptic:
        return 0
    return int(fanout_map(spec).sum())


@dataclass
class SynOpsLedger:
    """Per-layer counters (int64, monotone)."""

    n_layers: int
    synops: np.ndarray = None
    dense: np.ndarray = None
    neuron_updates: np.ndarray = None
    timesteps: np.ndarray = None
    invocations: np.ndarray = None

    def __post_init__(self):
        for name in ("synops", "dense", "neuron_updates", "timesteps", "invocations"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_layers, dtype=np.int64))

    def reset(self):
        for a in (self.synops, self.dense, self.neuron_updates, self.timesteps, self.invocations):
            a[:] = 0

    def merge(self, other: "SynOpsLedger"):
        if other.n_layers != self.n_layers:
            raise ValidationError("cannot merge ledgers of different models")
        self.synops += other.synops
        self.dense += other.dense
        self.neuron_updates += other.neuron_updates
        self.timesteps += other.timesteps
        self.invocations += other.invocations
        return self

    def copy(self):
        return SynOpsLedger(self.n_layers, self.synops.copy(), self.dense.copy(),
                            self.neuron_updates.copy(), self.timesteps.copy(), self.invocations.copy())

    @property
    def total_synops(self):
        return int(self.synops.sum())

    @property
    def total_dense(self):
        return int(self.dense.sum())

    def to_dict(self):
        return {k: getattr(self, k).tolist()
                for k in ("synops", "dense", "neuron_updates", "timesteps", "invocations")}


# --------------------------------------------------------------------------
# per-layer runtime state

@dataclass
class LayerState:
    neuron: object = None
    zacc: np.ndarray | None = None  # accumulated pre-activation for delta inputs

    @classmethod
    def fresh(cls, spec: LayerSpec):
        n = spec.neuron
        shape = spec.out_shape
        if n.kind == "sigma_delta":
            st = SigmaDeltaState.zeros(shape)
        elif n.kind == "lif":
            st = LifState.zeros(shape)
        elif n.kind == "s4d":
            st = S4dState.zeros(n.s4d)
        else:
            st = None
        zacc = np.zeros(shape) if spec.delta_input and spec.synaptic else None
        return cls(st, zacc)


@dataclass
class FixedPointConfig:
    """Fixed-point execution: activations on a ``2**-act_frac_bits`` grid,
    int32 accumulators, 24-bit neuron state with ``state_frac_bits``."""

    act_frac_bits: int = 8
    state_frac_bits: int = 12
    overflow_check: bool = True


def synaptic_forward(spec: LayerSpec, x, fixed: FixedPointConfig | None = None, layer_id=None):
    """Pre-activation contribution (without bias) and SynOp count."""
    w = spec.weights
    acc_only = spec.binary_input
    scale = w.scale
    if fixed is not None and not acc_only:  # binary spikes are already exact integers
        q = float(2 ** fixed.act_frac_bits)
        x = np.round(x * q)
        scale = scale / q
    wt = w.scatter_layout() if kernels.numba_enabled() and spec.kind != "dwconv2d" else None
    if spec.kind == "conv2d":
        acc, syn = kernels.conv_scatter(x, w.codes, spec.stride, spec.pad, *spec.out_shape[1:],
                                        acc_only=acc_only, wt=wt)
    elif spec.kind == "pwconv2d":
        if wt is not None:
            wt = wt[:, None, None, :]
        acc, syn = kernels.conv_scatter(x, w.codes[:, :, None, None], spec.stride, 0,
                                        *spec.out_shape[1:], acc_only=acc_only, wt=wt)
    elif spec.kind == "dwconv2d":
        acc, syn = kernels.dw_scatter(x, w.codes, spec.stride, spec.pad, *spec.out_shape[1:], acc_only=acc_only)
    else:
        acc, syn = kernels.fc_scatter(x, w.codes, acc_only=acc_only, wt=wt)
    if fixed is not None and fixed.overflow_check and acc.size:
        peak = float(np.max(np.abs(acc)))
        if peak > INT32_MAX:
            raise AccumulatorOverflowError(layer_id if layer_id is not None else spec.name, int(peak))
    return acc * scale, syn


def apply_neuron(spec: LayerSpec, z, state: LayerState, fixed: FixedPointConfig | None = None):
    n = spec.neuron
    if n.kind == "none":
        return z, state.neuron
    if n.kind == "relu":
        return relu_step(z), state.neuron
    if n.kind == "sigma_delta":
        return sigma_delta_step(state.neuron, z, n.sigma_delta)
    if n.kind == "lif":
        if fixed is not None:
            return lif_step_fixed(state.neuron, z, n.lif, fixed.state_frac_bits)
        return lif_step(state.neuron, z, n.lif)
    if fixed is not None:
        return s4d_step_fixed(state.neuron, z, n.s4d, fixed.state_frac_bits)
    return s4d_step(state.neuron, z, n.s4d)


def forward_layer(spec: LayerSpec, x, state: LayerState, ledger: SynOpsLedger | None = None,
                  index: int = 0, skip_value=None, fixed: FixedPointConfig | None = None):
    """Evaluate one layer for one timestep; returns the output activation.

    ``state`` is updated in place (its neuron block is replaced by the new
    immutable state).  ``skip_value`` feeds ``residual_add``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.in_shape:
        raise ValidationError(
            f"layer {index} ({spec.name or spec.kind}): input shape {x.shape} != {spec.in_shape}")
    if spec.synaptic:
        z, syn = synaptic_forward(spec, x, fixed, layer_id=spec.name or index)
        if state.zacc is not None:
            state.zacc = state.zacc + z
            z = state.zacc
        if spec.weights.bias is not None:
            b = spec.weights.bias
            z = z + (b[:, None, None] if z.ndim == 3 else b)
        if ledger is not None:
            ledger.synops[index] += syn
            ledger.dense[index] += spec.dense_synops
        y, state.neuron = apply_neuron(spec, z, state, fixed)
    elif spec.kind == "flatten":
        y = x.reshape(-1)
    elif spec.kind == "avgpool":
        y = avgpool(x, spec.kernel, spec.stride)
    else:
        if skip_value is None or np.shape(skip_value) != x.shape:
            raise ValidationError(f"residual_add at layer {index} needs a skip tensor of shape {x.shape}")
        y = x + skip_value
        if fixed is not None:
            lim = float(INT32_MAX) / 2 ** fixed.act_frac_bits
            y = np.clip(y, -lim, lim)
    if fixed is not None and spec.neuron.kind in ("none", "relu"):
        y = quantize_state(y, fixed.act_frac_bits, bits=32)
    if ledger is not None:
        ledger.invocations[index] += 1
        ledger.timesteps[index] += 1
        if spec.synaptic and spec.neuron.kind != "none":
            ledger.neuron_updates[index] += int(np.prod(spec.out_shape))
    return y


def avgpool(x, k, s):
    c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    if k == h and k == w:
        return x.mean(axis=(1, 2), keepdims=True)
    out = np.zeros((c, ho, wo))
    for ky in range(k):
        for kx in range(k):
            out += x[:, ky: ky + s * (ho - 1) + 1: s, kx: kx + s * (wo - 1) + 1: s]
    return out / (k * k)


__all__ = [
    "QuantizedWeights", "quantize_weights", "fake_quantize", "NeuronSpec", "LayerSpec",
    "SynOpsLedger", "LayerState", "FixedPointConfig", "dense_synops", "fanout_map",
    "forward_layer", "conv_layer", "fc_layer", "RELU", "LINEAR",
]
