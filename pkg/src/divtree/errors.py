"""Exception classes. Each class carries the CLI exit code it maps to."""


class DivTreeError(Exception):
    exit_code = 1


class SpecError(DivTreeError):
    """Malformed configuration or domain description."""
    exit_code = 3


class BoundViolation(DivTreeError):
    exit_code = 2


class DegenerateConnectorError(DivTreeError):
    """Some connector set or subdomain counts zero cells on the grid; refine it."""
    exit_code = 4


class EmptyDomainError(DivTreeError):
    exit_code = 4


class InvalidWeightError(DivTreeError):
    exit_code = 3


class MalformedTreeError(DivTreeError):
    exit_code = 5


class CoverGapError(DivTreeError):
    exit_code = 5


class DisconnectedError(DivTreeError):
    exit_code = 5


class ContainmentError(DivTreeError):
    exit_code = 5


class ProfileViolationError(DivTreeError):
    exit_code = 6


class MeanViolationError(DivTreeError):
    exit_code = 7


class InvalidMapError(DivTreeError):
    exit_code = 3
