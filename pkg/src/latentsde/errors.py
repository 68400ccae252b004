"""Exception hierarchy. The CLI maps these onto exit codes."""


class LatentSdeError(Exception):
    """Base class for package errors."""


class InvalidInputError(LatentSdeError, ValueError):
    """Shapes, dimensions or arguments that violate a precondition."""


class NotFoundError(LatentSdeError, KeyError):
    """Unknown catalog entry or missing file."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InversionError(LatentSdeError):
    """Newton inversion of the Lamperti map did not converge."""

    def __init__(self, message, worst_point=None):
        super().__init__(message)
        self.worst_point = worst_point


class TrainingDivergedError(LatentSdeError):
    """A loss term or gradient became non-finite."""

    def __init__(self, message, term=None, epoch=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch


class DegenerateDataError(LatentSdeError):
    """Alignment or likelihood on rank-deficient data."""
