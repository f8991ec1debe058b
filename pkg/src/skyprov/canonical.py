"""Canonical JSON encoding used for every hashed or signed byte sequence.

One encoding rule set for transaction bodies, block headers, proofs and
event records: keys sorted lexicographically, no insignificant whitespace,
UTF-8, integers unquoted, decimals and digests carried as strings.  The same
logical value therefore always produces identical bytes, which is what makes
hashes and signatures reproducible.

Floats are rejected outright: every numeric field in signed material is
either an integer or a fixed-point decimal string.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Any

from .errors import InvalidBody

_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")


def _check_encodable(value: Any, path: str = "$") -> None:
    if value is None:
        return
    if isinstance(value, bool):
        raise InvalidBody(f"boolean not allowed in canonical value at {path}")
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise InvalidBody(f"float not allowed in canonical value at {path}")
    if isinstance(value, str):
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_encodable(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise InvalidBody(f"non-string key at {path}: {key!r}")
            _check_encodable(item, f"{path}.{key}")
        return
    raise InvalidBody(f"unencodable type {type(value).__name__} at {path}")


def dumps_canonical(value: Any) -> bytes:
    """Encode a JSON-compatible value to its unique canonical byte form."""
    _check_encodable(value)
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def loads_canonical(data: bytes) -> Any:
    """Parse canonical bytes, rejecting any non-canonical encoding.

    Round-trips the parsed value through the encoder and requires a byte
    match, so accepted input is always a canonical-form fixpoint.
    """
    try:
        value = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidBody(f"not valid JSON: {exc}") from exc
    if dumps_canonical(value) != data:
        raise InvalidBody("input is not in canonical form")
    return value


def sha256_bytes(data: bytes) -> bytes:
    """Plain SHA-256, used for content hashes and transaction ids."""
    return hashlib.sha256(data).digest()


def digest_to_hex(digest: bytes) -> str:
    if not isinstance(digest, bytes) or len(digest) != 32:
        raise InvalidBody("digest must be exactly 32 bytes")
    return digest.hex()


def digest_from_hex(text: str) -> bytes:
    """Parse a lowercase 64-char hex digest; uppercase is non-canonical."""
    if not isinstance(text, str) or not _HEX64_RE.match(text):
        raise InvalidBody(f"not a lowercase 64-char hex digest: {text!r}")
    return bytes.fromhex(text)
