"""Exception hierarchy. The CLI maps each family onto an exit code."""


class OdilError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(OdilError, ValueError):
    exit_code = 2


class DataError(OdilError, ValueError):
    exit_code = 3


class NumericError(OdilError, ArithmeticError):
    exit_code = 4


class ShapeError(ConfigError):
    """Incompatible tensor shapes; ``layer`` names the offending layer when known."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class RegistryError(OdilError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""
