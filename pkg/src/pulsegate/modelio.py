"""Family-agnostic save, load and score helpers over the shared container."""

from __future__ import annotations

import os
from pathlib import Path

from . import boosting, models
from .container import unpack
from .errors import DataError


def dumps(model) -> bytes:
    if model.family == "gbdt":
        return boosting.serialize_gbdt(model)
    return models.serialize(model)


def loads(data: bytes):
    family, _, _, _ = unpack(data)
    if family == "gbdt":
        return boosting.deserialize_gbdt(data)
    return models.deserialize(data)


def save(model, path) -> bytes:
    """Atomic write; returns the bytes written."""
    blob = dumps(model)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return blob


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc.strerror}") from None
    return loads(data), data


def scores(model, X):
    """Sepsis probability for each row of ``X``."""
    if model.family == "gbdt":
        return boosting.predict_proba(model, X)
    return models.predict_proba(model, X)
