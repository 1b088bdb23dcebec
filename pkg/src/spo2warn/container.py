"""Versioned binary container used for every model artifact.

Layout::

    SPO2WARN-ARTIFACT <version>\\n
    <header: one line of canonical JSON (sorted keys, no spaces)>\\n
    <payload bytes>

The header's ``arrays`` entry lists ``[name, dtype, shape]`` in payload order;
``dtype`` is ``"<f8"`` (IEEE-754 binary64) or ``"<i8"`` (two's-complement
int64), both little-endian regardless of host.  ``payload_sha256`` guards
against truncation and corruption.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Mapping

import numpy as np

MAGIC = b"SPO2WARN-ARTIFACT"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ArtifactError(ValueError):
    pass


class CorruptArtifactError(ArtifactError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    specs = []
    chunks = []
    for name in arrays:
        arr = np.asarray(arrays[name])
        code = "<i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "<f8"
        data = arr.astype(_DTYPES[code], order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        specs.append([name, code, list(data.shape)])
        chunks.append(data.tobytes(order="C"))
    payload = b"".join(chunks)
    head = dict(header)
    head["arrays"] = specs
    head["payload_bytes"] = len(payload)
    head["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    return MAGIC + f" {FORMAT_VERSION}\n".encode() + canonical_json(head).encode("utf-8") + b"\n" + payload


def decode(data: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    first, sep, rest = data.partition(b"\n")
    if not sep or not first.startswith(MAGIC + b" "):
        raise CorruptArtifactError("missing artifact magic line")
    try:
        version = int(first[len(MAGIC) + 1 :])
    except ValueError:
        raise CorruptArtifactError("unreadable format version") from None
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(f"artifact format version {version}, expected {FORMAT_VERSION}")
    head_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CorruptArtifactError("truncated header")
    try:
        header = json.loads(head_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifactError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptArtifactError("header is not a JSON object")
    if len(payload) != header.get("payload_bytes"):
        raise CorruptArtifactError(
            f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptArtifactError("payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    pos = 0
    try:
        for name, code, shape in header.pop("arrays"):
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(payload, dtype=dt, count=count, offset=pos).reshape(shape).astype(
                dt.newbyteorder("="), copy=True
            )
            pos += count * dt.itemsize
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifactError(f"bad array table: {exc!r}") from None
    if pos != len(payload):
        raise CorruptArtifactError(f"array table covers {pos} of {len(payload)} payload bytes")
    header.pop("payload_bytes")
    header.pop("payload_sha256")
    return header, arrays
