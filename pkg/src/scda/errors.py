"""Exception hierarchy shared by every scda module.

Each class name is also the machine-readable error code printed by the CLI.
"""

from __future__ import annotations


class ScdaError(Exception):
    """Base class for all library errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# embedding core
class EmptyBag(ScdaError):
    pass


class NonFiniteInput(ScdaError):
    pass


class ZeroVector(ScdaError):
    pass


class EmptyCell(ScdaError):
    pass


class DegenerateFraction(ScdaError):
    pass


class BadMagic(ScdaError):
    pass


class VersionMismatch(ScdaError):
    pass


class TruncatedFile(ScdaError):
    pass


class DimensionMismatch(ScdaError):
    pass


class ManifestError(ScdaError):
    pass


# loss / training
class UnnormalizedInput(ScdaError):
    pass


class NonPositiveTemperature(ScdaError):
    pass


class InfeasibleSpec(ScdaError):
    pass


class BadDimension(ScdaError):
    pass


class ZeroOutput(ScdaError):
    pass


class ShapeMismatch(ScdaError):
    pass


class DivergenceDetected(ScdaError):
    pass


# classification
class MissingClass(ScdaError):
    pass


class EmptyMatrix(ScdaError):
    pass


# stain
class NotEnoughTissue(ScdaError):
    pass


class DegenerateStains(ScdaError):
    pass


# benchmark / cli
class InfeasibleSeparation(ScdaError):
    pass


class NotEnoughShots(ScdaError):
    pass


class RankDeficient(ScdaError):
    pass


class ConfigError(ScdaError):
    pass
