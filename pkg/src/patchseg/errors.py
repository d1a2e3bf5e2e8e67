"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, freed graph, missing grad)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(ValueError):
    """Malformed input file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    """Checkpoint file cannot be read or does not match the target model."""


class UnsupportedOperationError(RuntimeError):
    """Operation not available for the current model configuration."""


class TrainDivergedError(RuntimeError):
    """Training aborted on a non-finite loss; carries the diagnostic snapshot path."""

    def __init__(self, message: str, snapshot_path: str | None = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
