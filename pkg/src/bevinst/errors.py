"""Exception types raised across the package."""


class BevInstError(Exception):
    """Base class for all package errors."""


class BehindCamera(BevInstError):
    """A point projects with non-positive camera depth."""


class NonPositiveDepth(BevInstError):
    pass


class OnBoundary(BevInstError):
    """Bilinear gradient requested on a cell boundary where it is discontinuous."""


class DimensionMismatch(BevInstError):
    pass


class HeadsMismatch(DimensionMismatch):
    pass


class SpecMismatch(BevInstError):
    pass


class LambdaOutOfRange(BevInstError):
    pass


class NoHistory(BevInstError):
    pass


class NoGroundTruth(BevInstError):
    pass


class InvalidConfig(BevInstError):
    """Configuration value outside its allowed domain. ``field`` names the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParseError(BevInstError):
    def __init__(self, message, field=None, line=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field '{field}'")
        prefix = f"[{', '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
