from __future__ import annotations

from typing import Optional


class FadError(Exception):
    """Base fadpy exception class."""


class ShapeError(FadError, ValueError):
    """Tensor shape, channel or group mismatch."""


class NumericalError(FadError, ArithmeticError):
    """NaN or Inf reached a value or a gradient."""

    def __init__(self, message: str, *, node: Optional[str] = None,
                 step: Optional[int] = None) -> None:
        super().__init__(message)
        self.node = node
        self.step = step


class GenotypeError(FadError, ValueError):
    """Invalid genotype."""


class GenotypeParseError(GenotypeError):
    """Genotype text could not be parsed."""

    def __init__(self, message: str, *, field: str = "",
                 line: Optional[int] = None) -> None:
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(field)
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)
        self.field = field
        self.line = line


class ConfigError(FadError, ValueError):
    """Invalid run configuration."""


class CheckpointError(FadError, ValueError):
    """Malformed checkpoint or dataset cache."""
