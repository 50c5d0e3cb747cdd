"""Error types shared by every module of the toolkit."""


class TensegrityError(Exception):
    """Base class for all toolkit errors"""

    category = "error"
    exit_code = 1

    def to_dict(self) -> dict:
        return {"error": self.category, "message": str(self)}


class GeometryMismatch(TensegrityError):
    category = "geometry"
    exit_code = 10


class ClosureViolation(TensegrityError):
    category = "geometry"
    exit_code = 11


class FormatError(TensegrityError):
    category = "format"
    exit_code = 20


class TensegrityIOError(TensegrityError):
    category = "io"
    exit_code = 21


class SequenceTooShort(TensegrityError):
    category = "data"
    exit_code = 22


class LengthMismatch(TensegrityError):
    category = "data"
    exit_code = 23


class EmptyDataset(TensegrityError):
    category = "data"
    exit_code = 24


class ShapeMismatch(TensegrityError):
    category = "shape"
    exit_code = 30


class NotScalar(TensegrityError):
    category = "shape"
    exit_code = 31


class VersionMismatch(TensegrityError):
    category = "checkpoint"
    exit_code = 40


class CorruptCheckpoint(TensegrityError):
    category = "checkpoint"
    exit_code = 41


class ConfigInvalid(TensegrityError):
    category = "config"
    exit_code = 2


class NonFiniteInput(TensegrityError):
    category = "numeric"
    exit_code = 50
