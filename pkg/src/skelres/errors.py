"""Exception types raised across the package."""


class SkelresError(Exception):
    """Base class for all package errors."""


class SequenceFormatError(SkelresError, ValueError):
    """A skeleton sequence stream does not match the canonical format."""


class MalformedHeader(SequenceFormatError):
    pass


class MalformedLine(SequenceFormatError):
    pass


class WrongJointCount(SequenceFormatError):
    pass


class NonFiniteCoordinate(SequenceFormatError):
    pass


class TooFewFrames(SequenceFormatError):
    pass


class SplitError(SkelresError, ValueError):
    """An entry cannot be assigned under the requested protocol."""


class DegenerateRange(SkelresError, ValueError):
    """All coordinates of a sequence are identical, so min == max."""


class ImageSizeError(SkelresError, ValueError):
    pass


class ShapeError(SkelresError, ValueError):
    """Operand shapes are inconsistent."""


class UnsupportedDepth(SkelresError, ValueError):
    pass


class NoForwardCache(SkelresError, RuntimeError):
    """backward() was called without a preceding train-mode forward()."""


class CheckpointError(SkelresError):
    pass


class BadCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError, ValueError):
    pass


class TopologyMismatch(SkelresError, ValueError):
    pass


class ConfigError(SkelresError, ValueError):
    pass


class EmptySplit(SkelresError, ValueError):
    pass
