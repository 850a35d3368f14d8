"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ShapeError(ContractError):
    pass


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; ``op`` names the first offender."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


class FormatError(ValueError):
    """A data file does not follow its documented format."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrainingAborted(NonFiniteError):
    """Training stopped on a non-finite value; ``checkpoint`` is the diagnostic dump (CLI exit code 3)."""

    def __init__(self, op: str, checkpoint, detail: str = ""):
        super().__init__(op, detail)
        self.checkpoint = checkpoint
