"""
Error types shared by every layer of the lab.

Each error carries a short machine code so the CLI can print the same
{"code": ..., "message": ...} envelope for every failure.
"""

from typing import Any, Dict, Optional


class LabError(Exception):
    code = "lab"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if code:
            self.code = code

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message}


class ShapeError(LabError, ValueError):
    code = "shape"


class RecordError(LabError):
    """Misuse of a computation record (e.g. backward twice)."""
    code = "record"


class ConfigError(LabError, ValueError):
    code = "config"


class MapError(LabError, ValueError):
    code = "map"


class EpisodeError(LabError):
    code = "episode"


class CategoryError(LabError, ValueError):
    code = "category"


class MetricError(LabError, ValueError):
    code = "metric"


class CheckpointError(LabError):
    code = "checkpoint"


class TrainingDivergedError(LabError):
    code = "diverged"

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> Dict[str, Any]:
        payload = super().to_dict()
        payload["diagnostics"] = self.diagnostics
        return payload
