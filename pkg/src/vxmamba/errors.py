"""Error taxonomy shared by all modules.

Exit-code mapping for the CLI lives in cli.py: usage errors map to 1,
contract/format/range errors to 2, check failures to 3.
"""


class VxError(Exception):
    """Base class for all package errors."""


class RangeError(VxError, ValueError):
    """A coordinate or key is outside the valid range for the given order."""


class CapacityError(VxError, RuntimeError):
    """A precomputed table would exceed the configured memory budget."""


class ContractError(VxError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class ShapeError(VxError, ValueError):
    """Array arguments have inconsistent shapes."""


class NumericError(VxError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(VxError, ValueError):
    """A serialized file is malformed; message includes the byte offset."""


class EmptyReportError(VxError, ValueError):
    """A statistics request found no qualifying samples."""


class CheckFailure(VxError, AssertionError):
    """A verification command (gradcheck and friends) found a violation."""
