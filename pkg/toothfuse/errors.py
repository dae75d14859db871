"""Exception hierarchy shared by every stage of the fusion workflow."""

from __future__ import annotations

from typing import Any


class ToothFuseError(Exception):
    """Base class for all errors raised by toothfuse."""


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


class EmptyMesh(ToothFuseError):
    """A mesh or cloud has no usable geometry (no vertices or zero area)."""


class DegenerateNeighborhood(ToothFuseError):
    """Covariance of a k-NN neighborhood has rank < 2."""

    def __init__(self, message: str, invalid: Any = None) -> None:
        super().__init__(message)
        # indices of the points whose normal could not be estimated
        self.invalid = invalid


class NotWatertight(ToothFuseError):
    """Ray-parity signs requested on a mesh with boundary or non-manifold edges."""


# ---------------------------------------------------------------------------
# Features / registration
# ---------------------------------------------------------------------------


class CoincidentPoints(ToothFuseError):
    """Pair features requested for two points closer than 1e-12."""


class DegenerateConfiguration(ToothFuseError):
    """Point pairs are collinear; no unique rigid transform exists."""


class NoValidModel(ToothFuseError):
    """RANSAC found no hypothesis with at least sample-size inliers."""


class NoCorrespondences(ToothFuseError):
    """ICP found no point pair within the correspondence distance."""


# ---------------------------------------------------------------------------
# Fusion / implicit / extraction / metrics
# ---------------------------------------------------------------------------


class EmptyRoot(ToothFuseError):
    """No vertex of the aligned full mesh lies farther than tau from the crown."""


class Diverged(ToothFuseError):
    """The optimization objective became non-finite."""


class EmptySurface(ToothFuseError):
    """The zero level set does not cross the extraction grid."""


class ZeroDiagonal(ToothFuseError):
    """The reference bounding-box diagonal is zero."""


# ---------------------------------------------------------------------------
# I/O and configuration
# ---------------------------------------------------------------------------


class ConfigError(ToothFuseError):
    """Unknown key or unparsable value in a configuration file."""


class MeshFormatError(ToothFuseError):
    """A mesh file could not be read or written."""


class ModelFormatError(ToothFuseError):
    """A model or latent file is malformed."""


class StageError(ToothFuseError):
    """A pipeline stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
