"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or domain constraint."""


class ParseError(ValidationError):
    """A data file could not be parsed; message names the offending line."""


class DegenerateGroupError(ValueError):
    """A sensitive group (or group/label cell) is empty on the evaluated nodes."""


class NumericError(FloatingPointError):
    """A non-finite value surfaced where finite numbers are required."""


class ContractError(RuntimeError):
    """An internal API contract was violated (e.g. missing forward cache)."""
