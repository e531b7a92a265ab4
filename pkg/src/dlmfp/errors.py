"""Exception hierarchy shared by every module."""


class DLMError(Exception):
    pass


class ConfigurationError(DLMError):
    """Bad dimensions, out-of-range hyperparameters, incompatible models."""


class InputError(DLMError):
    """Bad user data: token ids out of range, malformed probability rows."""


class ContractError(DLMError):
    """A caller broke a precondition of the decode machinery."""


class FormatError(DLMError):
    """Weight file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VerificationError(DLMError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
