"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its precondition."""


class TrainingDivergence(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed; carries the byte offset of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IngestionError(ValueError):
    """A sequence directory or annotation file could not be parsed."""
