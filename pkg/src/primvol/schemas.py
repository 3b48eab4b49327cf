"""JSON-schema validation for every structured-text record the package reads or writes.

Bundled schemas may ``$ref`` each other by file name, e.g. ``"camera.json"``.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Any, Dict

from jsonschema import Draft7Validator, ValidationError
from referencing import Registry, Resource
from referencing.jsonschema import DRAFT7


class SchemaError(RuntimeError):
    """Raised when a record does not match its schema."""


def _schema_dir():
    return resources.files("primvol").joinpath("schemas")


@lru_cache(maxsize=None)
def load_schema(name: str) -> Dict[str, Any]:
    try:
        text = _schema_dir().joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise SchemaError(f"Schema not found: {name}") from exc
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry() -> Registry:
    bundled = [
        (entry.name, Resource.from_contents(load_schema(entry.name[: -len(".json")]), default_specification=DRAFT7))
        for entry in _schema_dir().iterdir()
        if entry.name.endswith(".json")
    ]
    return Registry().with_resources(bundled)


@lru_cache(maxsize=None)
def _validator(name: str) -> Draft7Validator:
    return Draft7Validator(load_schema(name), registry=_registry())


def validate_record(name: str, record: Any) -> None:
    try:
        _validator(name).validate(record)
    except ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{name} validation failed at {where}: {exc.message}") from exc
