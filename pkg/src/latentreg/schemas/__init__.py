"""Shipped JSON schemas and validators."""

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from ..errors import SpecError

__all__ = ["load_schema", "validate_dgp", "validate_report"]


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def _validate(doc, name):
    validator = jsonschema.Draft202012Validator(load_schema(name))
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise SpecError(err.message, _pointer(err.absolute_path))


def validate_dgp(doc) -> None:
    """Raise :class:`SpecError` with a JSON pointer if ``doc`` is not a valid DgpSpec."""
    _validate(doc, "dgp")


def validate_report(doc) -> None:
    _validate(doc, "report")
