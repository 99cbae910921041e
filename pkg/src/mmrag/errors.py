"""Exception taxonomy shared across the package.

Contract and configuration violations map to CLI exit code 2, corrupted or
malformed files to exit code 3.
"""


class ContractError(ValueError):
    """A documented pre- or postcondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible; the message names both shapes."""


class ConfigError(ContractError):
    """Invalid or inconsistent run configuration."""


class FormatError(RuntimeError):
    """A persisted file does not match the expected format (magic/version)."""


class CorruptionError(FormatError):
    """A persisted file is truncated or fails its checksum."""
