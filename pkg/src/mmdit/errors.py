"""Exception taxonomy shared across the package."""


class MmditError(Exception):
    """Base class for all package errors."""


class ShapeError(MmditError):
    """Tensor/array shape mismatch."""


class ContractError(MmditError):
    """A documented precondition or postcondition was violated."""


class GeometryError(MmditError):
    """Degenerate or inconsistent geometry (landmarks, transforms, regions)."""


class DegeneracyError(GeometryError):
    """A transform became singular under the requested rescaling."""


class ConfigError(MmditError):
    """Invalid configuration, CLI usage, or missing prerequisite."""


class TrainingAbort(MmditError):
    """Training stopped on a non-finite loss; carries diagnostics."""

    def __init__(self, message, step=None, seed=None, modality=None):
        super().__init__(message)
        self.step = step
        self.seed = seed
        self.modality = modality
