"""Exception hierarchy. CLI exit codes are attached to each class."""


class PEError(Exception):
    exit_code = 1


class ConfigError(PEError, ValueError):
    """Bad or inconsistent configuration / usage."""

    exit_code = 1


class FormatError(PEError, ValueError):
    """On-disk artifact is missing or malformed."""

    exit_code = 2


class DataError(PEError, ValueError):
    """Payload is readable but violates a data invariant."""

    exit_code = 2


class SpecError(PEError, ValueError):
    """Invalid window or synthetic-study specification."""

    exit_code = 1


class ContractError(PEError, RuntimeError):
    """Incompatible artifacts or violated pipeline contract."""

    exit_code = 3


class MissingArtifactError(PEError, FileNotFoundError):
    """An upstream artifact is absent; names the command that produces it."""

    exit_code = 1

    def __init__(self, what: str, producer: str):
        super().__init__(f"{what} not found; run `{producer}` first")
        self.producer = producer
