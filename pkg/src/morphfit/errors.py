"""Exception types shared across the package."""


class MorphFitError(Exception):
    """Base class for all morphfit errors."""


class ValidationError(MorphFitError, ValueError):
    """Invalid input data or configuration."""


class SolverError(MorphFitError):
    """A linear system could not be solved.

    Carries the EM iteration index when raised from the registration loop.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class SpaceFileError(MorphFitError, IOError):
    """A shape-space file is missing, truncated, or inconsistent."""


class EmptyRenderError(MorphFitError):
    """No model point projected inside the image."""


class NoVisiblePointsError(MorphFitError):
    """No foreground pixel mapped onto any canonical point."""


class RasterizeError(MorphFitError):
    """Deformation rasterization failed even after regularization."""


class OracleError(MorphFitError):
    """An external deformation oracle failed.

    ``diagnostics`` holds captured process output when available.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class DatasetError(MorphFitError):
    """Dataset generation failed or exceeded the skip budget."""


class EvaluationError(MorphFitError):
    """An evaluation run produced no usable per-view results."""
