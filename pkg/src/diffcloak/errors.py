"""Shared exception and warning types."""


class ConfigError(Exception):
    """Invalid configuration; CLI maps this to exit code 2."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class IntegrityError(Exception):
    """Checkpoint content does not match its recorded digest."""


class TrainingError(Exception):
    """Training aborted (non-finite loss, embedder below accuracy floor)."""


class AttackError(Exception):
    """Attack stage aborted; message carries the stage tag."""


class ParseError(Exception):
    """Malformed run log."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class DegenerateGradientWarning(UserWarning):
    """An all-zero gradient was normalized; the step contributes nothing."""


class DegenerateAttentionWarning(UserWarning):
    """A zero-norm attention output made a cosine term undefined; it counts as 0."""
