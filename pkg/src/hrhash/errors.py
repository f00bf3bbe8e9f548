"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration record failed validation."""


class ProtocolError(ValueError):
    """A dataset cannot satisfy a split protocol."""


class FormatError(ValueError):
    """A binary file is malformed; ``offset`` is the byte where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, components: dict):
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")
        self.epoch = epoch
        self.batch = batch
        self.components = components
