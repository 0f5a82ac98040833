"""
Exception types raised by multigrid_dl.

Every error knows how to render itself as a single machine-parsable line
(``describe()``) so the command line can report failures uniformly.
"""


class MultigridError(Exception):
    """base class for all multigrid_dl errors"""

    fields = ()

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        for key, value in details.items():
            setattr(self, key, value)

    def describe(self):
        """
        one-line summary of the error
        :return: [str] e.g. 'error=ShapeError op=conv2d dim=1 message="..."'
        """
        parts = [f"error={type(self).__name__}"]
        for key in self.fields:
            value = getattr(self, key, None)
            if value is not None:
                parts.append(f"{key}={value}")
        parts.append(f'message="{self.message}"')
        return " ".join(parts)


class ShapeError(MultigridError, ValueError):
    fields = ("op", "dim", "part", "expected", "actual")


class PyramidError(MultigridError, ValueError):
    fields = ("op", "level")


class LabelError(MultigridError, ValueError):
    fields = ("op", "value", "num_classes")


class NonFiniteError(MultigridError, FloatingPointError):
    fields = ("tensor",)


class FormatError(MultigridError, ValueError):
    fields = ("path", "offset", "expected", "actual")


class ArchitectureError(MultigridError, ValueError):
    fields = ("family", "depth")


class ConfigError(MultigridError, KeyError):
    fields = ("section", "key")

    def __str__(self):
        # KeyError would otherwise repr() the message
        return self.message
