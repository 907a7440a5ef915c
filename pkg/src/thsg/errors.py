class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, label range, ...)."""


class ConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    """Malformed feature or checkpoint file.

    ``offset`` is a byte offset for binary files and ``line`` a 1-based line
    number for CSV files; whichever does not apply is None.
    """

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class MiningError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, loss_name, detail=""):
        msg = f"non-finite value in {loss_name}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.loss_name = loss_name
