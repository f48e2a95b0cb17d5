"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (see ``decodesweep.cli``).
"""


class DecodeSweepError(Exception):
    """Base class for all package errors."""


class InputError(DecodeSweepError, ValueError):
    """Malformed or out-of-vocabulary input."""


class RangeError(InputError):
    """A value lies outside the range an operation accepts."""


class ConfigError(DecodeSweepError, ValueError):
    """Inconsistent decoding, backend or sweep configuration."""


class CapabilityError(DecodeSweepError):
    """A backend lacks a feature the requested operation needs."""


class EvaluationError(DecodeSweepError, RuntimeError):
    """A metric could not be computed for a specific item."""
