"""Event-driven sparse neural inference for event-camera fall detection.

Subpackages by stage: :mod:`~evspike.events` (streams, codecs, ROI,
accumulation), :mod:`~evspike.neurons` (SigmaDelta, LIF, S4D dynamics),
:mod:`~evspike.layers` (quantized layers, SynOps accounting),
:mod:`~evspike.models` (architectures, inference, patching, EVSM files),
:mod:`~evspike.schedule` (hardware steps, latency, power),
:mod:`~evspike.bench` (decisions, metrics, synthetic data, benchmark) and
:mod:`~evspike.train` (surrogate-gradient training).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AccumulatorOverflowError, CapacityError, ChecksumError, ConfigError, DataError, EvspikeError,
    FormatError, TrainingError, TruncationError, ValidationError,
)
from .events import (  # noqa: E402
    AccumulationConfig, Event, EventStream, FrameSequence, Polarity, RoiConfig, accumulate,
    crop_roi, decode_stream, downsample, encode_stream, preprocess, read_stream, write_stream,
)

__all__ = [
    "__version__", "EvspikeError", "DataError", "FormatError", "TruncationError", "ChecksumError",
    "ValidationError", "ConfigError", "CapacityError", "AccumulatorOverflowError", "TrainingError",
    "Event", "EventStream", "Polarity", "RoiConfig", "AccumulationConfig", "FrameSequence",
    "encode_stream", "decode_stream", "read_stream", "write_stream", "crop_roi", "downsample",
    "accumulate", "preprocess",
]
