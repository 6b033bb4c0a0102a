"""Exception hierarchy shared by all modules."""


class TfkError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpec(TfkError, ValueError):
    pass


class ShapeMismatch(TfkError, ValueError):
    pass


class ConcentrationOutOfRange(TfkError, ValueError):
    pass


# growth
class SeedOutsideBrain(TfkError, ValueError):
    pass


class UnstableTimestep(TfkError, ValueError):
    pass


class InvalidParams(TfkError, ValueError):
    pass


class EmptyTarget(TfkError, ValueError):
    pass


class EmptySearchGrid(TfkError, ValueError):
    pass


# flowmatch
class EmptyBatch(TfkError, ValueError):
    pass


class EmptyDataset(TfkError, ValueError):
    pass


class InvalidInterval(TfkError, ValueError):
    pass


class CheckpointError(TfkError, ValueError):
    pass


# longitudinal
class PlanInvalid(TfkError, ValueError):
    pass


class ModelConditioningMismatch(TfkError, ValueError):
    pass


# metrics
class EmptyMask(TfkError, ValueError):
    pass


class GridTooSmall(TfkError, ValueError):
    pass


class TooFewTimePoints(TfkError, ValueError):
    pass


# io
class VolumeFormatError(TfkError, ValueError):
    pass


class MissingSidecar(VolumeFormatError):
    pass


class SizeMismatch(VolumeFormatError):
    pass


class UnknownDtype(VolumeFormatError):
    pass


class BadMagic(VolumeFormatError):
    pass


class UnsupportedDatatype(VolumeFormatError):
    pass


class SchemaVersionError(VolumeFormatError):
    pass
