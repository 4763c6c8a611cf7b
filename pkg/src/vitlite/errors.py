"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """An operation was called outside of its documented preconditions."""


class ConfigError(ValueError):
    """One or more configuration invariants are violated.

    ``violations`` holds ``(field_path, message)`` pairs, all of them, not
    just the first one found.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [("", violations)]
        self.violations = list(violations)
        text = "; ".join(f"{path}: {msg}" if path else msg for path, msg in self.violations)
        super().__init__(text)


class CheckpointError(ValueError):
    """A checkpoint file cannot be used."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint signature."""


class VersionMismatchError(CheckpointError):
    """The file was written by an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared header or payload does."""


class ChecksumError(CheckpointError):
    """The stored CRC does not match the file contents."""


class UnknownTensorError(CheckpointError):
    """A strict load met tensor names the target model does not have."""
