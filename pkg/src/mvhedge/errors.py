"""Exception hierarchy shared across the package."""


class HedgeError(Exception):
    pass


class DomainError(HedgeError, ValueError):
    """An input lies outside the domain of a mathematical operation."""


class SchemaError(HedgeError, ValueError):
    pass


class ConfigurationError(HedgeError, ValueError):
    pass


class ShapeError(HedgeError, ValueError):
    pass


class ContractViolation(HedgeError, RuntimeError):
    """A caller broke a documented precondition."""


class SingularDesignError(HedgeError, ArithmeticError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class CheckpointFormatError(HedgeError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class KindMismatchError(HedgeError, ValueError):
    pass


class TrainingDivergedError(HedgeError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
