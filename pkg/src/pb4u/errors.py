"""Exception taxonomy shared across the engine.

The CLI maps these onto stable exit codes (see cli.py), so raise the most
specific class available.
"""


class Pb4uError(Exception):
    """Base class for all engine errors."""


class InvalidArgument(Pb4uError, ValueError):
    """A caller-supplied value violates a precondition."""


class InvalidMesh(Pb4uError, ValueError):
    """Mesh data is structurally unusable (degenerate triangle, isolated vertex, ...)."""


class InvalidState(Pb4uError, ValueError):
    """A simulation state or buffer is not usable in its current form."""


class NumericFailure(Pb4uError, ArithmeticError):
    """A numerical routine produced a non-finite value where one is required."""


class NumericDivergence(Pb4uError, ArithmeticError):
    """The simulation produced non-finite positions or losses; rollout must abort."""


class IoError(Pb4uError, OSError):
    """File could not be read or written."""


class FormatError(Pb4uError, ValueError):
    """File contents do not match the expected format."""


class ConfigMismatch(Pb4uError, ValueError):
    """Persisted tensors are inconsistent with the requested model configuration."""


class UsageError(Pb4uError, ValueError):
    """Bad command-line invocation."""
