"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class InterfaceError(ValueError):
    """Array or embedding shapes do not match what a model declares."""


class CapabilityError(RuntimeError):
    """A model lacks a capability (e.g. gradients) the caller needs."""


class RegistrationError(KeyError):
    """Registry lookup or registration failed."""

    def __str__(self):
        # KeyError repr-quotes its message by default
        return str(self.args[0]) if self.args else ""


class UndefinedResultError(ValueError):
    """A metric was requested on an empty set."""
