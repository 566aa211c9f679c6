"""Model graphs, architecture builders, inference sessions and the EVSM container.

Architectures
-------------
``cnn_mlp``  five stride-2 valid 3x3 convolutions, flatten, fc 4096-128-64-2.
``cnn_s4d``  the same convolutional backbone, global average pool, S4D head.
``mcu``      MobileNet-style inverted residual blocks (``MCU_SCHEDULE``).
``mcu_s4d``  an MCU backbone followed by the S4D head.

A model is a flat, immutable tuple of :class:`~evspike.layers.LayerSpec`.
Residual connections name the layer whose input they add back; ``patch_end``
marks where the spatial backbone stops (the first non-spatial layer), which
is where patched inference assembles its feature map.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError, TruncationError, ValidationError
from .layers import (
    LINEAR, RELU, FixedPointConfig, LayerSpec, LayerState, NeuronSpec, QuantizedWeights,
    SynOpsLedger, conv_layer, fc_layer, forward_layer, infer_out_shape, quantize_weights,
)
from .neurons import LifParams, S4dParams, SigmaDeltaParams

NEURON_MODES = ("relu", "sigma_delta", "lif_binary", "lif_graded")
FALL, NOFALL = 0, 1  # output unit order

# (expansion, out_channels, stride) per inverted residual block
MCU_SCHEDULE = (
    (6, 16, 2), (6, 16, 1),
    (6, 24, 2), (6, 24, 1), (6, 24, 1),
    (6, 48, 2), (6, 48, 1), (6, 48, 1),
    (6, 96, 2), (6, 96, 1), (6, 96, 1), (6, 96, 1), (6, 96, 1),
    (6, 192, 2), (6, 192, 1), (6, 192, 1), (6, 192, 1), (6, 192, 1),
)


@dataclass(frozen=True, eq=False)
class ModelGraph:
    name: str
    layers: tuple
    input_shape: tuple
    timestep_us: int = 20_000
    group: int = 1
    decision: str = "max_logit_diff"  # or "spike_count"
    input_mode: str = "graded"
    kind: str = "classifier"  # or "backbone"
    blocks: int = 0
    patch_end: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.in_shape != shape:
                raise ValidationError(
                    f"layer {i} ({layer.name or layer.kind}) expects {layer.in_shape}, gets {shape}")
            if layer.kind == "residual_add":
                if not (0 <= layer.skip < i) or self.layers[layer.skip].in_shape != layer.in_shape:
                    raise ValidationError(f"layer {i}: bad residual source {layer.skip}")
            shape = layer.out_shape
        if self.kind == "classifier" and shape != (2,):
            raise ValidationError(f"classifier must end with 2 output units, got {shape}")
        if self.decision not in ("max_logit_diff", "spike_count"):
            raise ConfigError(f"unknown decision rule {self.decision!r}")
        if self.patch_end is not None and not (0 < self.patch_end <= len(self.layers)):
            raise ValidationError("patch_end out of range")

    @property
    def n_params(self):
        return sum(layer.n_params for layer in self.layers)

    @property
    def output_shape(self):
        return self.layers[-1].out_shape

    def dense_synops_per_step(self):
        return sum(layer.dense_synops for layer in self.layers)

    def synaptic_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.synaptic]

    @property
    def stateless_backbone(self):
        end = self.patch_end if self.patch_end is not None else len(self.layers)
        return all(layer.neuron.kind in ("none", "relu") and not layer.delta_input
                   for layer in self.layers[:end])

    def summary_rows(self):
        rows = []
        for i, layer in enumerate(self.layers):
            rows.append((i, layer.name or layer.kind, layer.kind, layer.in_shape, layer.out_shape,
                         layer.neuron.kind, layer.n_params, layer.dense_synops))
        return rows


# --------------------------------------------------------------------------
# builders

def _init(rng, shape, fan_in, gain=1.0, bias=True):
    bound = gain / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=shape)
    b = rng.uniform(-bound, bound, size=shape[0]) * 0.1 if bias else None
    return quantize_weights(w, bias=b)


def _neuron(mode, lif=None, sd_theta=0.05, output=False):
    if mode == "relu":
        return LINEAR if output else RELU
    if mode == "sigma_delta":
        return LINEAR if output else NeuronSpec("sigma_delta", sigma_delta=SigmaDeltaParams(sd_theta))
    spike_mode = "binary" if mode == "lif_binary" else "graded"
    p = lif or LifParams()
    p = replace(p, spike_mode=spike_mode).checked()
    return NeuronSpec("lif", lif=p)


def _conv_stack(rng, in_shape, channels, kernel, stride, neuron_for, gain, first_index=0):
    layers = []
    shape = in_shape
    for j, c in enumerate(channels):
        w = _init(rng, (c, shape[0], kernel, kernel), shape[0] * kernel * kernel, gain)
        layer = conv_layer("conv2d", shape, w, stride, "valid", neuron_for(first_index + j),
                           name=f"conv{j + 1}")
        layers.append(layer)
        shape = layer.out_shape
    return layers, shape


def build_cnn_mlp(neuron_mode="relu", input_shape=(2, 160, 160), channels=(16, 32, 64, 128, 256),
                  hidden=(128, 64), kernel=3, stride=2, seed=0, lif: LifParams | None = None,
                  sd_theta=0.05, gain=1.0, timestep_us=20_000, group=1, name=None) -> ModelGraph:
    """CNN + MLP classifier; every conv/fc carries the selected neuron model."""
    if neuron_mode not in NEURON_MODES:
        raise ConfigError(f"unknown neuron mode {neuron_mode!r}")
    rng = np.random.default_rng(seed)
    n_syn = len(channels) + len(hidden) + 1

    def neuron_for(j):
        return _neuron(neuron_mode, lif, sd_theta, output=(j == n_syn - 1))

    layers, shape = _conv_stack(rng, input_shape, channels, kernel, stride, neuron_for, gain)
    layers.append(LayerSpec("flatten", shape, (int(np.prod(shape)),), name="flatten"))
    patch_end = len(layers) - 1
    n = int(np.prod(shape))
    for j, m in enumerate(tuple(hidden) + (2,)):
        w = _init(rng, (m, n), n, gain)
        layers.append(fc_layer(n, w, neuron_for(len(channels) + j), name=f"fc{j + 1}"))
        n = m
    layers = _mark_inputs(layers, neuron_mode)
    return ModelGraph(
        name or f"cnn_mlp[{neuron_mode}]", layers, input_shape, timestep_us, group,
        "spike_count" if neuron_mode.startswith("lif") else "max_logit_diff",
        "binary" if neuron_mode == "lif_binary" else "graded",
        patch_end=patch_end, meta={"arch": "cnn_mlp", "neuron_mode": neuron_mode},
    )


def _mark_inputs(layers, neuron_mode):
    """Flag delta-coded (SigmaDelta) and binary-spike inputs on synaptic layers."""
    out = []
    seen_synaptic = False
    for layer in layers:
        if layer.synaptic:
            kw = {}
            if neuron_mode == "sigma_delta" and seen_synaptic:
                kw["delta_input"] = True
            if neuron_mode == "lif_binary":
                kw["binary_input"] = True
            if kw:
                layer = layer.replace(**kw)
            seen_synaptic = True
        out.append(layer)
    return out


def _mcu_layers(rng, in_shape, blocks, gain=1.0):
    if not 1 <= blocks <= len(MCU_SCHEDULE):
        raise ConfigError(f"MCU block count must be in [1, {len(MCU_SCHEDULE)}], got {blocks}")
    layers = []
    shape = in_shape
    for b, (t, cout, stride) in enumerate(MCU_SCHEDULE[:blocks]):
        start = len(layers)
        cin = shape[0]
        exp = t * cin
        tag = f"b{b + 1}"
        if t != 1:
            w = _init(rng, (exp, cin), cin, gain)
            layers.append(conv_layer("pwconv2d", shape, w, 1, "valid", RELU, name=f"{tag}.expand"))
            shape = layers[-1].out_shape
        w = _init(rng, (exp, 3, 3), 9, gain)
        layers.append(conv_layer("dwconv2d", shape, w, stride, "same", RELU, name=f"{tag}.dw"))
        shape = layers[-1].out_shape
        w = _init(rng, (cout, exp), exp, gain)
        layers.append(conv_layer("pwconv2d", shape, w, 1, "valid", LINEAR, name=f"{tag}.project"))
        shape = layers[-1].out_shape
        if stride == 1 and cin == cout:
            layers.append(LayerSpec("residual_add", shape, shape, skip=start, name=f"{tag}.add"))
    return layers, shape


def build_mcu(blocks=13, input_shape=(2, 160, 160), seed=0, gain=1.0, timestep_us=60_000) -> ModelGraph:
    """Stateless MCU backbone: inverted residual blocks, global avgpool, flatten."""
    rng = np.random.default_rng(seed)
    layers, shape = _mcu_layers(rng, input_shape, blocks, gain)
    patch_end = len(layers)
    layers.append(LayerSpec("avgpool", shape, (shape[0], 1, 1), kernel=shape[1], stride=shape[1],
                            name="avgpool"))
    layers.append(LayerSpec("flatten", (shape[0], 1, 1), (shape[0],), name="flatten"))
    return ModelGraph(f"MCU{blocks}B", layers, input_shape, timestep_us, kind="backbone",
                      blocks=blocks, patch_end=patch_end, meta={"arch": "mcu"})


def s4d_init(rng, n, d_state):
    a = rng.uniform(0.5, 0.95, size=(n, d_state))
    b = np.ones((n, d_state))
    c = rng.normal(0.0, 1.0 / np.sqrt(d_state), size=(n, d_state))
    return S4dParams(a, b, c)


def build_s4d_head(feature_dim, model_dim=128, d_state=4, seed=0, gain=1.0):
    """Linear encoder -> per-channel S4D neurons -> linear decoder to 2 logits."""
    if min(feature_dim, model_dim, d_state) < 1:
        raise ConfigError("S4D head dimensions must be >= 1")
    rng = np.random.default_rng(seed + 7919)
    enc = _init(rng, (model_dim, feature_dim), feature_dim, gain)
    dec = _init(rng, (2, model_dim), model_dim, gain)
    ssm = NeuronSpec("s4d", s4d=s4d_init(rng, model_dim, d_state))
    return [fc_layer(feature_dim, enc, ssm, name="s4d.encode"),
            fc_layer(model_dim, dec, LINEAR, name="s4d.decode")]


def build_cnn_s4d(input_shape=(2, 160, 160), channels=(16, 32, 64, 128, 256), model_dim=128,
                  d_state=4, seed=0, gain=1.0, timestep_us=60_000) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers, shape = _conv_stack(rng, input_shape, channels, 3, 2, lambda j: RELU, gain)
    patch_end = len(layers)
    layers.append(LayerSpec("avgpool", shape, (shape[0], 1, 1), kernel=shape[1], stride=shape[1],
                            name="avgpool"))
    layers.append(LayerSpec("flatten", (shape[0], 1, 1), (shape[0],), name="flatten"))
    layers += build_s4d_head(shape[0], model_dim, d_state, seed, gain)
    return ModelGraph("cnn_s4d", layers, input_shape, timestep_us, patch_end=patch_end,
                      meta={"arch": "cnn_s4d"})


def build_mcu_s4d(blocks=13, input_shape=(2, 160, 160), model_dim=128, d_state=4, seed=0,
                  gain=1.0, timestep_us=60_000) -> ModelGraph:
    bb = build_mcu(blocks, input_shape, seed, gain)
    head = build_s4d_head(bb.output_shape[0], model_dim, d_state, seed, gain)
    return ModelGraph(f"MCU{blocks}B+S4D", bb.layers + tuple(head), input_shape, timestep_us,
                      blocks=blocks, patch_end=bb.patch_end, meta={"arch": "mcu_s4d"})


def model_from_config(cfg: dict) -> ModelGraph:
    """Build from a JSON-style architecture description."""
    cfg = dict(cfg)
    arch = cfg.pop("arch", "cnn_mlp")
    if "input_shape" in cfg:
        cfg["input_shape"] = tuple(cfg["input_shape"])
    for key in ("channels", "hidden"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if "lif" in cfg and isinstance(cfg["lif"], dict):
        cfg["lif"] = LifParams(**cfg["lif"])
    builders = {"cnn_mlp": build_cnn_mlp, "cnn_s4d": build_cnn_s4d, "mcu": build_mcu,
                "mcu_s4d": build_mcu_s4d}
    if arch not in builders:
        raise ConfigError(f"unknown architecture {arch!r}")
    try:
        return builders[arch](**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None


# --------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class PatchConfig:
    patch: int = 40
    stride: int = 30

    def grid(self, side):
        if not (0 < self.stride <= self.patch <= side):
            raise ConfigError(f"invalid patch config {self} for input side {side}")
        if (side - self.patch) % self.stride:
            raise ConfigError(f"(side - patch) = {side - self.patch} not divisible by stride {self.stride}")
        return list(range(0, side - self.patch + 1, self.stride))


class MemoryTracker:
    """Peak bytes of simultaneously live activation tensors."""

    def __init__(self):
        self.peak = 0

    def observe(self, *arrays, extra=0):
        live = extra + sum(a.nbytes for a in arrays if a is not None)
        if live > self.peak:
            self.peak = live


class InferenceSession:
    """Mutable execution state for one stream: neuron states plus ledger."""

    def __init__(self, model: ModelGraph, fixed: FixedPointConfig | None = None, track_memory=False):
        self.model = model
        self.fixed = fixed
        self.ledger = SynOpsLedger(len(model.layers))
        self.memory = MemoryTracker() if track_memory else None
        self.steps = 0
        self._patch_cache = {}
        self.reset()

    def reset(self, ledger=False):
        self.states = [LayerState.fresh(layer) for layer in self.model.layers]
        if ledger:
            self.ledger.reset()
            self.steps = 0

    def run_layers(self, x, layers, start=0, extra_bytes=0):
        saved = {}
        sources = {layer.skip for layer in layers if layer.kind == "residual_add"}
        for j, layer in enumerate(layers):
            i = start + j
            if i in sources:
                saved[i] = x
            skip = saved.get(layer.skip) if layer.kind == "residual_add" else None
            y = forward_layer(layer, x, self.states[i], self.ledger, i, skip, self.fixed)
            if self.memory is not None:
                self.memory.observe(x, y, *saved.values(), extra=extra_bytes)
            if layer.kind == "residual_add":
                saved.pop(layer.skip, None)
            x = y
        return x

    def step(self, frame, patch: PatchConfig | None = None):
        """One full network evaluation for one timestep."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != self.model.input_shape:
            raise ValidationError(f"frame shape {frame.shape} != model input {self.model.input_shape}")
        if patch is None:
            out = self.run_layers(frame, self.model.layers)
        else:
            feat = patched_infer(self, frame, patch)
            end = self.model.patch_end
            out = self.run_layers(feat, self.model.layers[end:], start=end)
        self.steps += 1
        return out

    def run(self, frames, patch=None):
        return np.stack([self.step(f, patch) for f in frames]) if len(frames) else np.zeros((0, 2))


def infer_step(sess: InferenceSession, frame, patch=None):
    return sess.step(frame, patch)


def _relayout(layers, in_shape):
    """Same layers and weights re-derived for a different spatial input."""
    out = []
    shape = tuple(in_shape)
    for layer in layers:
        new_out = infer_out_shape(layer.kind, shape, layer.kernel, layer.stride, layer.padding,
                                  layer.weights)
        if new_out is None:
            new_out = shape
        out.append(layer.replace(in_shape=shape, out_shape=new_out))
        shape = new_out
    return out


def _receptive_geometry(layers):
    """Overall stride and center offset of output cells in input coordinates."""
    stride, offset = 1, 0.0
    for layer in layers:
        if layer.kind in ("conv2d", "dwconv2d", "pwconv2d", "avgpool"):
            k = layer.kernel
            pad = layer.pad if layer.kind != "avgpool" else 0
            offset += stride * (-pad + (k - 1) / 2)
            stride *= layer.stride
    return stride, offset


def _ownership(n_full, n_local, origins, patch, stride, offset):
    """Per full-map cell along one axis: owning patch and local index (-1 if none)."""
    centers = np.arange(n_full) * stride + offset
    patch_centers = np.asarray(origins) + (patch - 1) / 2
    owner = np.argmin(np.abs(centers[:, None] - patch_centers[None, :]), axis=1)
    local = np.floor((centers - offset - np.asarray(origins)[owner]) / stride + 0.5).astype(int)
    local[(local < 0) | (local >= n_local)] = -1
    return owner, local


def patched_infer(sess: InferenceSession, frame, cfg: PatchConfig):
    """Run the spatial backbone patch by patch and assemble its feature map.

    Patches are visited row-major; each gets fresh backbone state and only
    its final feature map is kept.  Every full-map cell is written by the
    patch whose center is nearest to the cell's receptive-field center.
    A single patch covering the whole frame keeps backbone state across
    timesteps, so stateful backbones are allowed in that case only.
    """
    model = sess.model
    if model.patch_end is None:
        raise ConfigError(f"model {model.name} has no spatial backbone to patch")
    frame = np.asarray(frame, dtype=np.float64)
    c, h, w = frame.shape
    ys, xs = cfg.grid(h), cfg.grid(w)
    whole = cfg.patch == h == w
    if not (model.stateless_backbone or whole):
        raise ConfigError("patched inference requires a stateless backbone")
    end = model.patch_end
    full_layers = model.layers[:end]
    full_shape = full_layers[-1].out_shape
    key = (cfg.patch, c)
    if key not in sess._patch_cache:
        sub = _relayout(full_layers, (c, cfg.patch, cfg.patch))
        stride, offset = _receptive_geometry(full_layers)
        loc = sub[-1].out_shape
        oy = _ownership(full_shape[1], loc[1], ys, cfg.patch, stride, offset)
        ox = _ownership(full_shape[2], loc[2], xs, cfg.patch, stride, offset)
        sess._patch_cache[key] = (sub, oy, ox)
    sub, (own_y, loc_y), (own_x, loc_x) = sess._patch_cache[key]
    out = np.zeros(full_shape)
    for jy, y0 in enumerate(ys):
        rows = np.flatnonzero((own_y == jy) & (loc_y >= 0))
        for jx, x0 in enumerate(xs):
            cols = np.flatnonzero((own_x == jx) & (loc_x >= 0))
            tile = frame[:, y0:y0 + cfg.patch, x0:x0 + cfg.patch].copy()
            if not whole:
                for i in range(end):
                    sess.states[i] = LayerState.fresh(sub[i])
            pout = sess.run_layers(tile, sub, 0, extra_bytes=out.nbytes)
            if rows.size and cols.size:
                out[:, rows[:, None], cols[None, :]] = pout[:, loc_y[rows][:, None], loc_x[cols][None, :]]
    if not whole:
        for i in range(end):
            sess.states[i] = LayerState.fresh(full_layers[i])
    return out


# --------------------------------------------------------------------------
# EVSM container

EVSM_MAGIC = b"EVSM"
EVSM_VERSION = 1
_HEAD = struct.Struct("<4sHHI")


def save_model(model: ModelGraph) -> bytes:
    blobs = bytearray()
    specs = []
    for layer in model.layers:
        d = {"kind": layer.kind, "in_shape": list(layer.in_shape), "out_shape": list(layer.out_shape),
             "kernel": layer.kernel, "stride": layer.stride, "padding": layer.padding,
             "skip": layer.skip, "delta_input": layer.delta_input,
             "binary_input": layer.binary_input, "name": layer.name,
             "neuron": layer.neuron.to_dict()}
        if layer.weights is not None:
            q = layer.weights
            d["weights"] = {"shape": list(q.values.shape), "offset": len(blobs)}
            blobs += q.values.astype("<i1").tobytes()
            d["weights"]["scale_offset"] = len(blobs)
            blobs += np.float32(q.scale).astype("<f4").tobytes()
            if q.bias is not None:
                d["weights"]["bias_offset"] = len(blobs)
                d["weights"]["bias_len"] = int(q.bias.size)
                blobs += q.bias.astype("<f4").tobytes()
        if layer.neuron.kind == "s4d":
            p = layer.neuron.s4d
            d["neuron"]["shape"] = list(p.a.shape)
            d["neuron"]["offset"] = len(blobs)
            for arr in (p.a, p.b, p.c):
                blobs += arr.astype("<f8").tobytes()
        specs.append(d)
    meta = {"name": model.name, "input_shape": list(model.input_shape),
            "timestep_us": model.timestep_us, "group": model.group, "decision": model.decision,
            "input_mode": model.input_mode, "kind": model.kind, "blocks": model.blocks,
            "patch_end": model.patch_end, "meta": model.meta, "layers": specs}
    text = json.dumps(meta, sort_keys=True).encode()
    body = _HEAD.pack(EVSM_MAGIC, EVSM_VERSION, 0, len(text)) + text + bytes(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def _take(buf, offset, nbytes, what):
    if offset + nbytes > len(buf):
        raise TruncationError(f"{what} truncated", len(buf))
    return buf[offset:offset + nbytes]


def load_model(blob) -> ModelGraph:
    buf = bytes(blob)
    if len(buf) < _HEAD.size:
        raise TruncationError("EVSM header truncated", len(buf))
    magic, version, _r, jlen = _HEAD.unpack_from(buf, 0)
    if magic != EVSM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EVSM_MAGIC!r}")
    if version != EVSM_VERSION:
        raise FormatError(f"unsupported EVSM version {version}")
    text = _take(buf, _HEAD.size, jlen, "metadata")
    base = _HEAD.size + jlen
    if len(buf) < base + 4:
        raise TruncationError("EVSM body truncated", len(buf))
    meta = json.loads(text)
    body_end = len(buf) - 4
    (crc,) = struct.unpack_from("<I", buf, body_end)
    blobs = buf[base:body_end]
    needed = 0
    for d in meta["layers"]:
        w = d.get("weights")
        if w:
            needed = max(needed, w.get("bias_offset", w["scale_offset"]) + 4 * w.get("bias_len", 1))
        if d["neuron"]["kind"] == "s4d":
            needed = max(needed, d["neuron"]["offset"] + 24 * int(np.prod(d["neuron"]["shape"])))
    if len(blobs) < needed:
        raise TruncationError("weight blob truncated", base + len(blobs))
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError("EVSM checksum mismatch")
    layers = []
    for d in meta["layers"]:
        q = None
        if "weights" in d:
            w = d["weights"]
            n = int(np.prod(w["shape"]))
            vals = np.frombuffer(blobs, "<i1", n, w["offset"]).reshape(w["shape"]).astype(np.int8)
            scale = float(np.frombuffer(blobs, "<f4", 1, w["scale_offset"])[0])
            bias = None
            if "bias_offset" in w:
                bias = np.frombuffer(blobs, "<f4", w["bias_len"], w["bias_offset"]).astype(np.float64)
            q = QuantizedWeights(vals, scale, bias)
        nd = d["neuron"]
        s4d = None
        if nd["kind"] == "s4d":
            shape = nd["shape"]
            n = int(np.prod(shape))
            arrs = [np.frombuffer(blobs, "<f8", n, nd["offset"] + 8 * n * j).reshape(shape) for j in range(3)]
            s4d = S4dParams(*arrs)
        layers.append(LayerSpec(d["kind"], d["in_shape"], d["out_shape"], d["kernel"], d["stride"],
                                d["padding"], q, NeuronSpec.from_dict(nd, s4d), d["skip"],
                                d["delta_input"], d["binary_input"], d["name"]))
    return ModelGraph(meta["name"], layers, meta["input_shape"], meta["timestep_us"], meta["group"],
                      meta["decision"], meta["input_mode"], meta["kind"], meta["blocks"],
                      meta["patch_end"], meta["meta"])


def write_model(path, model: ModelGraph):
    from .io import atomic_write_bytes
    atomic_write_bytes(path, save_model(model))


def read_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        return load_model(f.read())
