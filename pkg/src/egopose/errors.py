"""Exception types raised across the pipeline.

Every error derives from :class:`EgoPoseError` so the CLI can map data
problems to exit status 1 with a single ``except`` clause.
"""

from __future__ import annotations


class EgoPoseError(Exception):
    """Base class for all pipeline errors."""


# skeleton
class DegenerateShoulders(EgoPoseError, ValueError):
    pass


class NonFiniteInput(EgoPoseError, ValueError):
    pass


class LayoutMismatch(EgoPoseError, ValueError):
    pass


# features
class InsufficientCorrespondences(EgoPoseError, ValueError):
    pass


class DegenerateConfiguration(EgoPoseError, ValueError):
    pass


class NormalizationFailure(EgoPoseError, ValueError):
    pass


class DimensionMismatch(EgoPoseError, ValueError):
    pass


# codebook / model
class TooFewPoints(EgoPoseError, ValueError):
    pass


class IndexOutOfRange(EgoPoseError, IndexError):
    pass


class EmptyInput(EgoPoseError, ValueError):
    pass


class ShapeMismatch(EgoPoseError, ValueError):
    pass


class EmptySequence(EgoPoseError, ValueError):
    pass


# training
class MisalignedSequence(EgoPoseError, ValueError):
    pass


class DivergenceDetected(EgoPoseError, RuntimeError):
    pass


class ConfigMismatch(EgoPoseError, ValueError):
    pass


class ChecksumError(ConfigMismatch):
    """Checkpoint payload does not match the checksum in its header."""


# evaluation
class MissingGroundTruth(EgoPoseError, ValueError):
    pass


class NoTaggedFrames(EgoPoseError, ValueError):
    pass


class MissingChannel(EgoPoseError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnknownActivityTag(EgoPoseError, ValueError):
    pass


# io
class BadMagic(EgoPoseError, ValueError):
    pass


class TruncatedFile(EgoPoseError, ValueError):
    pass


class DimOverflow(EgoPoseError, ValueError):
    pass


class LayoutHashMismatch(EgoPoseError, ValueError):
    pass


class IoFailure(EgoPoseError, OSError):
    pass
