class ContractViolation(ValueError):
    """A precondition on an operation's inputs was not met."""


class UnsupportedMode(ContractViolation):
    """Operation requested for an environment mode it cannot handle."""


class AssumptionViolation(ValueError):
    """A generative spec fails one of the structural assumptions A1-A4."""

    def __init__(self, assumption, witness, message=None):
        self.assumption = assumption
        self.witness = witness
        super().__init__(message or f"assumption {assumption} failed (witness: {witness})")


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed. ``offset`` is the byte/char position."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
