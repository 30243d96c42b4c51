class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf loss; ``op`` names the first offending primitive."""

    def __init__(self, message: str, op: str | None = None, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.op = op
        self.epoch = epoch
        self.batch = batch
