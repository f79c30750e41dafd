"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""


class MoETrimError(Exception):
    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ShapeError(MoETrimError, ValueError):
    kind = "shape"


class ArgumentError(MoETrimError, ValueError):
    kind = "argument"


class InputError(MoETrimError, ValueError):
    kind = "input"


class StructuralError(MoETrimError, ValueError):
    kind = "structural"


class ComputationError(MoETrimError, ArithmeticError):
    kind = "computation"


class StageError(MoETrimError):
    """A pipeline stage failed; ``stage`` names it."""

    kind = "stage"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["stage"] = self.stage
        d["cause"] = getattr(self.cause, "kind", type(self.cause).__name__)
        return d


class CheckpointError(MoETrimError, IOError):
    kind = "checkpoint"


class MagicError(CheckpointError):
    kind = "checkpoint_magic"


class VersionError(CheckpointError):
    kind = "checkpoint_version"


class TruncatedError(CheckpointError):
    kind = "checkpoint_truncated"


class ChecksumError(CheckpointError):
    kind = "checkpoint_checksum"
