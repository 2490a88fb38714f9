"""
Error hierarchy shared by every app.

Each error carries a human-readable message, a machine-readable ``code`` and an
optional ``context`` mapping, the same way Django's ValidationError carries a
code next to its message.
"""


class SystoleError(Exception):
    default_code = "systole_error"

    def __init__(self, message, code=None, context=None):
        super().__init__(message)
        self.message = message
        self.code = code or self.default_code
        self.context = dict(context or {})

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class InvalidArgumentError(SystoleError, ValueError):
    default_code = "invalid_argument"


class InvalidInputError(SystoleError, ValueError):
    default_code = "invalid_input"


class DegenerateConfigurationError(SystoleError):
    default_code = "degenerate_configuration"


class NumericalFailureError(SystoleError):
    default_code = "numerical_failure"


class MeshParseError(InvalidInputError):
    default_code = "mesh_parse_error"

    def __init__(self, message, path=None, line=None, code=None):
        context = {}
        if path is not None:
            context["path"] = str(path)
        if line is not None:
            context["line"] = line
        super().__init__(message, code=code, context=context)
        self.path = path
        self.line = line


class InsufficientDataError(InvalidArgumentError):
    default_code = "insufficient_data"


class DependencyError(SystoleError):
    default_code = "missing_dependency"
