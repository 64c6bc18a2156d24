"""Small shared helpers: canonical JSON, stable hashing, seed derivation."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Derive a child seed from an ordered tuple of parts.

    Splittable scheme: the child is a pure function of the parts, so any
    sub-task can be re-run in isolation and reproduce its random stream.
    """
    digest = hashlib.sha256(canonical_json(list(map(str, parts))).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
