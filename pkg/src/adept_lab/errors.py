"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class LengthError(ValueError):
    """A sequence is empty or longer than a configured maximum."""


class ContractError(ValueError):
    """A call violated a documented precondition."""


class BudgetError(ValueError):
    """No bottleneck/rank fits inside the requested parameter budget."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class GenerationError(RuntimeError):
    """The dataset generator could not satisfy its balance constraint."""


class ConsistencyError(RuntimeError):
    """An analytic identity failed to hold within tolerance."""
