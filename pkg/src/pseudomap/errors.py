"""Exception hierarchy shared across the package."""


class PseudoMapError(Exception):
    """Base class for all package errors."""


class DegenerateGeometryError(PseudoMapError, ValueError):
    def __init__(self, msg="degenerate geometry"):
        super().__init__(msg)


class FormatError(PseudoMapError, ValueError):
    """Malformed JSON / PGM input. Carries an optional location hint."""

    def __init__(self, msg, location=None):
        if location is not None:
            msg = f"{msg} (at {location})"
        super().__init__(msg)
        self.location = location


class InfeasibleAssignmentError(PseudoMapError):
    def __init__(self, msg="insufficient predictions"):
        super().__init__(msg)


class BudgetExceededError(PseudoMapError):
    def __init__(self, msg="combinatorial budget exceeded"):
        super().__init__(msg)
