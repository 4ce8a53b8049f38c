"""Exception hierarchy.

``DataError`` subclasses describe bad inputs (malformed files, empty label
maps, mismatched grids); the CLI maps them to exit code 2.  Everything else
derived from ``SegmentationError`` is a runtime failure (exit code 3).
"""


class SegmentationError(Exception):
    """Base class for all package errors."""


class DataError(SegmentationError):
    """Input data is invalid or inconsistent."""


# nifti_io
class MalformedHeader(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class TruncatedData(DataError):
    pass


class WrongChannelCount(DataError):
    pass


class InvalidVolume(DataError):
    pass


class IoFailure(SegmentationError):
    pass


# tensor core
class ShapeMismatch(SegmentationError, ValueError):
    pass


class OddSpatialExtent(SegmentationError, ValueError):
    pass


class InvalidTarget(SegmentationError, ValueError):
    pass


class MissingGradient(SegmentationError):
    pass


# model checkpoints
class VersionMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


# sampling
class NoStructureVoxels(DataError):
    pass


class DegenerateImage(DataError):
    pass


# trainer
class TooFewSamples(DataError):
    pass


class NonFiniteLoss(SegmentationError):
    pass


# inference
class EmptyRoi(DataError):
    pass


# metrics
class EmptySet(SegmentationError, ValueError):
    pass


class TooFewPairs(SegmentationError, ValueError):
    pass


class GridMismatch(DataError):
    pass


# phantom
class OverlappingStructures(DataError):
    pass


class StructureOutOfBounds(DataError):
    pass
