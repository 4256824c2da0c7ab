"""Exception hierarchy shared across the package.

Three families matter to callers: configuration problems (bad input files or
flag values), violated modelling assumptions (things that are syntactically
fine but break a precondition the math needs), and numerical check failures
(an inequality that should hold did not). The CLI maps these to exit codes
2, 3 and 1 respectively.
"""


class PerturbwalkError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PerturbwalkError):
    """Malformed or incomplete experiment configuration (CLI exit 2)."""


class AssumptionViolation(PerturbwalkError):
    """A named modelling assumption does not hold (CLI exit 3).

    ``name`` identifies the assumption, e.g. ``"perturbation-below-gap"``
    or ``"irreducible-component"``.
    """

    def __init__(self, name: str, message: str):
        self.name = name
        super().__init__(f"{name}: {message}")


class UnsupportedModelError(AssumptionViolation):
    """Environment model asked for an unsupported dimension/parameter."""

    def __init__(self, message: str):
        super().__init__("supported-model", message)


class GeometryError(AssumptionViolation):
    """Torus too small for the requested local structure."""

    def __init__(self, message: str):
        super().__init__("torus-geometry", message)


class InvalidRatesError(AssumptionViolation):
    """Rate tables violate nonnegativity of the total jump rates."""

    def __init__(self, message: str):
        super().__init__("nonnegative-rates", message)


class StateCapError(AssumptionViolation):
    """Enumerated state space exceeds the configured hard cap."""

    def __init__(self, message: str):
        super().__init__("state-space-cap", message)


class CheckFailure(PerturbwalkError):
    """A numerical inequality check failed beyond tolerance (CLI exit 1)."""

    def __init__(self, check_id: str, message: str):
        self.check_id = check_id
        super().__init__(f"{check_id}: {message}")
