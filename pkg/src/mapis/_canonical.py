"""Canonical JSON encoding shared by every persisted artifact."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any


def _normalize(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite number {obj!r} cannot be serialized")
        # integral floats are written as integers so parse/serialize is stable
        if obj.is_integer() and abs(obj) < 2**53:
            return int(obj)
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def dumps(obj: Any, *, indent: int | None = None) -> str:
    """Serialize ``obj`` with sorted keys and a fixed number format."""
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(
        _normalize(obj), sort_keys=True, separators=separators, ensure_ascii=False, indent=indent
    )


def dump_bytes(obj: Any, *, indent: int | None = None) -> bytes:
    text = dumps(obj, indent=indent)
    if indent is not None:
        text += "\n"
    return text.encode("utf-8")


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def content_hash(obj: Any) -> str:
    return sha256_hex(dumps(obj))
