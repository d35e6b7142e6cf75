"""Shared exception types."""


class TrainingError(RuntimeError):
    """Raised when a training loop diverges (NaN loss).

    ``last_good`` holds the most recent healthy parameter state dict so the
    caller can persist it instead of the corrupted one.
    """

    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


class CompatibilityError(ValueError):
    """Raised when a checkpoint does not match the active configuration.

    The message names the first differing field.
    """
