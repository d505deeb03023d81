"""Exception hierarchy.

Every error raised on bad input carries a machine-readable ``code`` plus
keyword details, so callers (the CLI in particular) can map it to an exit
status without parsing messages.
"""

from __future__ import annotations


class STSError(Exception):
    code = "sts_error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self), **self.details}


class ShapeError(STSError, ValueError):
    code = "shape_mismatch"


class NonFiniteError(STSError, ValueError):
    code = "non_finite"


class ConfigError(STSError, ValueError):
    code = "invalid_config"


class TokenError(STSError, ValueError):
    code = "invalid_token"


class OverlapError(STSError, ValueError):
    """More simultaneous turns than output channels."""

    code = "unsupported_overlap"


class GeometryError(STSError, ValueError):
    code = "impossible_geometry"


class SimulationError(STSError, RuntimeError):
    code = "simulation_rejected"


class AssignmentLimitError(STSError, ValueError):
    code = "too_many_turns"


class NumericalAbort(STSError, FloatingPointError):
    code = "numerical_abort"


class CompatibilityError(STSError, ValueError):
    code = "incompatible"


class CheckpointError(CompatibilityError):
    code = "bad_checkpoint"
