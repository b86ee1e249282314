"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, index, kind...)."""


class TrainingFailure(RuntimeError):
    """A training stage exhausted its budget without reaching its target.

    Carries the achieved metric so callers can report how far off it was.
    """

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class TrainingDiverged(RuntimeError):
    """A loss became non-finite mid-run; ``iteration`` is where it happened."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class MissingCheckpoint(FileNotFoundError):
    """A command referenced a checkpoint that does not exist in the workspace."""

    def __init__(self, name: str, path: str):
        super().__init__(f"missing checkpoint '{name}' (expected at {path})")
        self.name = name
        self.path = path


class EmptyPool(RuntimeError):
    """A sampler was asked to draw from an empty code/frame pool."""
