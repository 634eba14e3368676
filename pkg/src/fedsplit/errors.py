"""Exception types shared across the package.

Every error raised on a protocol, configuration, or numeric-contract violation
derives from FedSplitError so callers can catch the package's failures as one
family while still dispatching on the specific kind (the CLI maps them to
distinct exit codes).
"""


class FedSplitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedSplitError):
    """An operand's shape violates an operator's contract."""


class GradError(FedSplitError):
    """Backward called in an invalid state (no tape, repeated call, bad seed shape)."""


class PartitionError(FedSplitError):
    """A block partition does not fit the model (non-positive or wrong total)."""


class CheckpointError(FedSplitError):
    """A checkpoint file is malformed or does not match the target model."""


class FrameError(FedSplitError):
    """A wire frame failed to decode.

    Carries the byte offset at which decoding failed so corrupt streams can be
    reported precisely.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProtocolError(FedSplitError):
    """Messages arrived out of protocol order or referenced unknown state."""


class ChannelClosedError(FedSplitError):
    """The peer closed the channel while a message was expected."""


class BarrierTimeoutError(ProtocolError):
    """A multi-client barrier did not fill before its timeout."""


class BatchIncompatibilityError(ProtocolError):
    """Client-batch mode received hidden payloads whose sequence shapes differ."""


class ContextOverflowError(ProtocolError):
    """A prompt or decode position exceeded the model's maximum context."""


class DegenerateBatchError(FedSplitError):
    """A loss was requested over a batch with no supervised positions."""


class UndefinedMetricError(FedSplitError):
    """A text-overlap metric was asked for inputs it is not defined on."""


class ConfigError(FedSplitError):
    """An experiment configuration failed schema or cross-field validation."""


class CheckFailure(FedSplitError):
    """A requested post-run acceptance check did not meet its threshold."""
