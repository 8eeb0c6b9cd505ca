"""Versioned JSON model files.

Floats are serialized through Python's repr (shortest round-trip form), so
save/load is bit-exact and same-seed reruns produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

FORMAT_VERSION = 1


class PersistError(ValueError):
    """File is not a model file this version understands."""


def save_model(path, kind: str, payload: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "payload": payload}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_model(path) -> tuple[str, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PersistError(f"{path}: not valid JSON") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise PersistError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise PersistError(f"{path}: format_version {doc['format_version']} "
                           f"unsupported (expected {FORMAT_VERSION})")
    return doc["kind"], doc["payload"]
