"""Event streams: EVS1/CSV codecs, interface-board transforms and accumulation.

An :class:`EventStream` stores its events column-wise (``t``, ``x``, ``y``,
``p`` numpy arrays) so that the whole decode -> crop -> downsample ->
accumulate chain stays vectorized.
"""
from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import kernels
from .errors import CapacityError, ConfigError, FormatError, TruncationError, ValidationError

MAGIC = b"EVS1"
VERSION = 1
# magic, version, width, height, 2 alignment bytes, reserved, count
HEADER = struct.Struct("<4sHHH2xIQ")
HEADER_SIZE = HEADER.size  # 24
RECORD_DTYPE = np.dtype(
    {"names": ["t", "x", "y", "p"],
     "formats": ["<u8", "<u2", "<u2", "u1"],
     "offsets": [0, 8, 10, 12],
     "itemsize": 16}
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 16


class Polarity(enum.IntEnum):
    NEG = 0
    POS = 1


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: Polarity


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.flags.writeable:
        a = a.copy() if a.base is not None else a
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Immutable, time-sorted sequence of events with sensor geometry."""

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _readonly(self.t, np.uint64))
        object.__setattr__(self, "x", _readonly(self.x, np.uint16))
        object.__setattr__(self, "y", _readonly(self.y, np.uint16))
        object.__setattr__(self, "p", _readonly(self.p, np.uint8))
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValidationError("event columns have different lengths")
        if not (0 < self.width < 65536 and 0 < self.height < 65536):
            raise ValidationError(f"invalid geometry {self.width}x{self.height}")

    @classmethod
    def from_events(cls, width, height, events):
        events = list(events)
        cols = list(zip(*[(e.t, e.x, e.y, int(e.p)) for e in events])) or [(), (), (), ()]
        s = cls(width, height, *[np.asarray(c, dtype=np.int64) for c in cols])
        s.validate()
        return s

    @classmethod
    def empty(cls, width, height):
        z = np.zeros(0)
        return cls(width, height, z, z, z, z)

    def validate(self):
        """Raise :class:`ValidationError` naming the first offending record."""
        bad = (self.x >= self.width) | (self.y >= self.height) | (self.p > 1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"record {i}: event (x={self.x[i]}, y={self.y[i]}, p={self.p[i]}) "
                f"outside {self.width}x{self.height} geometry"
            )
        if self.t.size > 1:
            back = self.t[1:] < self.t[:-1]
            if back.any():
                i = int(np.flatnonzero(back)[0]) + 1
                raise ValidationError(f"record {i}: timestamp {self.t[i]} decreases")
        return self

    def __len__(self):
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(x, y, t, Polarity(p))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def __repr__(self):
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"

    @property
    def duration_us(self):
        return int(self.t[-1]) if len(self) else 0


# --------------------------------------------------------------------------
# codecs

def encode_stream(s: EventStream) -> bytes:
    n = len(s)
    if n >= 2**64:
        raise CapacityError("event count exceeds 64-bit range")
    rec = np.zeros(n, dtype=RECORD_DTYPE)
    rec["t"] = s.t
    rec["x"] = s.x
    rec["y"] = s.y
    rec["p"] = s.p
    return HEADER.pack(MAGIC, VERSION, s.width, s.height, 0, n) + rec.tobytes()


def decode_stream(blob) -> EventStream:
    blob = memoryview(blob)
    if len(blob) < HEADER_SIZE:
        raise TruncationError("header truncated", len(blob))
    magic, version, width, height, _reserved, count = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported EVS1 version {version}")
    available = (len(blob) - HEADER_SIZE) // RECORD_SIZE
    if available < count:
        offset = HEADER_SIZE + available * RECORD_SIZE
        raise TruncationError(f"record {available} of {count} truncated", offset)
    rec = np.frombuffer(blob, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE)
    s = EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"])
    return s.validate()


def read_stream(path) -> EventStream:
    path = str(path)
    if path.endswith(".csv"):
        return read_csv(path)
    with open(path, "rb") as f:
        return decode_stream(f.read())


def write_stream(path, s: EventStream):
    path = str(path)
    if path.endswith(".csv"):
        write_csv(path, s)
        return
    with open(path, "wb") as f:
        f.write(encode_stream(s))


def write_csv(path, s: EventStream):
    with open(path, "w", newline="") as f:
        f.write(f"# width={s.width} height={s.height}\n")
        w = csv.writer(f)
        w.writerow(["t_us", "x", "y", "p"])
        w.writerows(zip(s.t.tolist(), s.x.tolist(), s.y.tolist(), s.p.tolist()))


def read_csv(path, width=None, height=None) -> EventStream:
    """Read ``t_us,x,y,p`` CSV; geometry from a ``# width= height=`` comment or args."""
    with open(path, newline="") as f:
        text = f.read()
    lines = text.splitlines()
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            key, _, val = tok.partition("=")
            if key == "width" and width is None:
                width = int(val)
            elif key == "height" and height is None:
                height = int(val)
        lines = lines[1:]
    if not lines or lines[0].strip().replace(" ", "") != "t_us,x,y,p":
        raise FormatError("CSV must start with header line 't_us,x,y,p'")
    body = "\n".join(lines[1:])
    data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.int64, ndmin=2) if body.strip() \
        else np.zeros((0, 4), dtype=np.int64)
    if data.shape[1] != 4:
        raise FormatError("CSV rows must have 4 columns")
    if width is None or height is None:
        width = int(data[:, 1].max()) + 1 if len(data) else 1
        height = int(data[:, 2].max()) + 1 if len(data) else 1
    if (data < 0).any():
        raise ValidationError("negative field in CSV")
    return EventStream(width, height, data[:, 0], data[:, 1], data[:, 2], data[:, 3]).validate()


# --------------------------------------------------------------------------
# interface-board transforms

@dataclass(frozen=True)
class RoiConfig:
    x0: int
    y0: int
    w: int
    h: int

    def check(self, width, height):
        if self.w <= 0 or self.h <= 0 or self.x0 < 0 or self.y0 < 0:
            raise ConfigError(f"invalid ROI {self}")
        if self.x0 + self.w > width or self.y0 + self.h > height:
            raise ConfigError(f"ROI {self} exceeds {width}x{height} geometry")

    @classmethod
    def center(cls, width, height, w, h):
        return cls((width - w) // 2, (height - h) // 2, w, h)


def crop_roi(s: EventStream, roi: RoiConfig) -> EventStream:
    """Drop events outside ``roi`` and shift the rest to its origin."""
    roi.check(s.width, s.height)
    keep = ((s.x >= roi.x0) & (s.x < roi.x0 + roi.w)
            & (s.y >= roi.y0) & (s.y < roi.y0 + roi.h))
    return EventStream(roi.w, roi.h, s.t[keep],
                       s.x[keep] - np.uint16(roi.x0), s.y[keep] - np.uint16(roi.y0), s.p[keep])


def downsample(s: EventStream, factor: int) -> EventStream:
    """Floor-divide coordinates by ``factor``; geometry is ceil-divided.

    Every event is kept, so the event rate is unchanged.
    """
    if factor < 1:
        raise ConfigError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return s
    f = np.uint16(factor)
    return EventStream(-(-s.width // factor), -(-s.height // factor), s.t, s.x // f, s.y // f, s.p)


# --------------------------------------------------------------------------
# accumulation

@dataclass(frozen=True)
class AccumulationConfig:
    window_us: int
    mode: str = "graded"
    width: int = 160
    height: int = 160
    group: int = 1

    def __post_init__(self):
        if self.window_us <= 0:
            raise ConfigError("window_us must be > 0")
        if self.group < 1:
            raise ConfigError("group must be >= 1")
        if self.mode not in ("graded", "binary"):
            raise ConfigError(f"unknown accumulation mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Accumulated input frames, shape ``(T, 2, H, W)``.

    ``partial_tail`` is set when the last frame covers less than a full
    window (or group of windows).
    """

    values: np.ndarray
    window_us: int
    mode: str
    group: int = 1
    partial_tail: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.values.shape[0]

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, k):
        return self.values[k]

    @property
    def frame_shape(self):
        return self.values.shape[1:]

    def save(self, path):
        np.savez_compressed(path, values=self.values, window_us=self.window_us,
                            mode=self.mode, group=self.group, partial_tail=self.partial_tail)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as d:
            return cls(d["values"], int(d["window_us"]), str(d["mode"]), int(d["group"]),
                       bool(d["partial_tail"]))


def n_windows(s: EventStream, window_us: int) -> int:
    return 0 if len(s) == 0 else int(s.t[-1]) // window_us + 1


def accumulate(s: EventStream, cfg: AccumulationConfig, n_frames=None) -> FrameSequence:
    """Bin events into per-timestep, per-polarity count frames.

    Frame ``k`` covers ``[k*window_us, (k+1)*window_us)``.  ``n_frames``
    forces the number of base windows (events past the end are dropped).
    """
    if (s.width, s.height) != (cfg.width, cfg.height):
        raise ValidationError(
            f"stream geometry {s.width}x{s.height} != accumulation geometry {cfg.width}x{cfg.height}")
    natural = n_windows(s, cfg.window_us)
    n = natural if n_frames is None else int(n_frames)
    counts = kernels.bin_events(s.t, s.x, s.y, s.p, cfg.window_us, n, cfg.height, cfg.width)
    partial = n > 0 and n_frames is None and (int(s.t[-1]) + 1) % cfg.window_us != 0
    if cfg.group > 1 and n:
        g = cfg.group
        n_out = -(-n // g)
        pad = n_out * g - n
        if pad:
            counts = np.concatenate([counts, np.zeros((pad,) + counts.shape[1:], counts.dtype)])
            partial = True
        counts = counts.reshape(n_out, g, *counts.shape[1:]).sum(axis=1, dtype=np.int32)
    if cfg.mode == "binary":
        counts = (counts > 0).astype(np.int32)
    return FrameSequence(counts, cfg.window_us, cfg.mode, cfg.group, partial)


def preprocess(s: EventStream, roi: RoiConfig | None = None, factor: int = 1) -> EventStream:
    """Interface-board chain: optional ROI crop followed by downsampling."""
    if roi is not None:
        s = crop_roi(s, roi)
    return downsample(s, factor)


# 1280x720 sensor: centered 640x640 crop, then 4x4 pooling to 160x160
SENSOR_ROI = RoiConfig.center(1280, 720, 640, 640)  # (320, 40, 640, 640)
SENSOR_DOWNSAMPLE = 4
