"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LatentRegError(Exception):
    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self):
        return {
            "type": type(self).__name__,
            "message": self.message,
            "context": {k: _jsonable(v) for k, v in self.context.items()},
        }


class InputError(LatentRegError, ValueError):
    """Malformed or invalid input data, schema or spec."""

    exit_code = 2


class SpecError(InputError):
    """Invalid simulation spec; ``pointer`` is a JSON pointer to the bad field."""

    def __init__(self, message, pointer="", **context):
        super().__init__(f"{pointer or '/'}: {message}", pointer=pointer or "/", **context)
        self.pointer = pointer or "/"


class DegenerateEstimateError(LatentRegError, ArithmeticError):
    """An estimator's denominator or regressor is degenerate on this sample."""

    exit_code = 3


class BootstrapUnstableError(LatentRegError, RuntimeError):
    exit_code = 4


def _jsonable(v):
    if isinstance(v, (str, int, bool)) or v is None:
        return v
    if isinstance(v, float):
        return v if v == v and abs(v) != float("inf") else repr(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    try:
        return float(v)
    except (TypeError, ValueError):
        return str(v)
