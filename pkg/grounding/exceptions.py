from django.core.exceptions import ImproperlyConfigured


class GroundingError(Exception):
    """Base class for every error raised by the grounding package."""


class DimensionError(GroundingError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        listed = ' and '.join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class InvalidMaskError(GroundingError):
    """A mask leaves no valid entry where at least one is required."""


class ContractError(GroundingError):
    """A documented precondition was violated by the caller."""


class ConfigError(GroundingError, ImproperlyConfigured):
    """Configuration is invalid, incomplete or names an unknown key."""


class FormatError(GroundingError):
    """A file does not follow the expected on-disk format."""


class ShapeError(FormatError):
    """A stored array does not fit the model it is being loaded into."""

    def __init__(self, name, expected, found):
        self.name = name
        super().__init__(f"array '{name}' has shape {tuple(found)}, model expects {tuple(expected)}")


class GenerationError(GroundingError):
    """Synthetic scene or expression generation could not satisfy its constraints."""


class DatasetError(GroundingError):
    """A dataset file or image could not be read."""
