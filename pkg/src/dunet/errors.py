"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateNeighborhoodError(ValueError):
    """A segment or neighborhood has no members."""


class InsufficientBatchError(ValueError):
    """Too few rows to compute batch statistics."""


class ContractError(ValueError):
    """A documented precondition does not hold."""


class SpecError(ValueError):
    """A layer or model configuration is invalid."""


class StabilityError(ValueError):
    """An explicit diffusion step would violate its stability bound."""


class ParseError(ValueError):
    """A point-cloud or checkpoint file is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite during training."""

    def __init__(self, epoch, batch, layer_path, loss):
        self.epoch = epoch
        self.batch = batch
        self.layer_path = layer_path
        self.loss = loss
        super().__init__(
            f"non-finite training state at epoch {epoch}, batch {batch}: "
            f"loss={loss!r}, first non-finite gradient at {layer_path!r}"
        )
