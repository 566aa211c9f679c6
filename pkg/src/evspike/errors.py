"""Exception hierarchy.

Every error raised on bad user data derives from :class:`EvspikeError`; the
CLI maps :class:`DataError` subclasses to exit code 2.
"""


class EvspikeError(Exception):
    pass


class DataError(EvspikeError):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """Bad magic, version or layout in a binary container."""


class TruncationError(FormatError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass


class ValidationError(DataError):
    pass


class ConfigError(DataError):
    """Invalid configuration (ROI, factor, patch grid, schedule...)."""


class CapacityError(EvspikeError):
    pass


class AccumulatorOverflowError(EvspikeError):
    def __init__(self, layer, value):
        super().__init__(f"accumulator overflow in layer {layer!r}: |acc| = {value} exceeds int32")
        self.layer = layer
        self.value = value


class TrainingError(EvspikeError):
    pass
