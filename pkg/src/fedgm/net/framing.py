"""Length-prefixed JSON frames with base64-embedded numeric arrays.

Frame layout: 4-byte big-endian payload length, then the payload, a UTF-8
JSON object with a top-level "type" field.  Large numeric arrays travel as
base64 of little-endian raw bytes so values survive the wire bit-exactly.
The format is deliberately debuggable; TLS is an extension point on the
transport, not part of the framing.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024  # 256 MiB

_HEADER = struct.Struct(">I")

_WIRE_DTYPES = {"f8": "<f8", "u8": "<u8", "i8": "<i8"}


class FrameError(Exception):
    """Base class for framing failures."""


class TruncatedFrameError(FrameError):
    """Fewer bytes available than the declared length."""


class OversizeFrameError(FrameError):
    """Declared payload exceeds the 256 MiB cap."""


class MalformedPayloadError(FrameError):
    """Payload is not a JSON object with a 'type' field."""


def array_to_wire(a: np.ndarray) -> dict:
    """Encode an array as {dtype, shape, data-base64}, little-endian raw bytes."""
    a = np.ascontiguousarray(a)
    for tag, dtype in _WIRE_DTYPES.items():
        if a.dtype == np.dtype(dtype.lstrip("<")):
            return {
                "dtype": tag,
                "shape": list(a.shape),
                "data": base64.b64encode(a.astype(dtype).tobytes()).decode("ascii"),
            }
    raise ValueError(f"unsupported wire dtype {a.dtype}")


def array_from_wire(d: dict) -> np.ndarray:
    try:
        dtype = _WIRE_DTYPES[d["dtype"]]
        raw = base64.b64decode(d["data"])
        return np.frombuffer(raw, dtype=dtype).reshape(d["shape"]).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedPayloadError(f"bad wire array: {exc}") from exc


def encode_frame(msg: dict) -> bytes:
    if not isinstance(msg, dict) or "type" not in msg:
        raise MalformedPayloadError("message must be a dict with a 'type' field")
    payload = json.dumps(msg, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrameError(f"payload of {len(payload)} bytes exceeds cap")
    return _HEADER.pack(len(payload)) + payload


def decode_frame(buf: bytes) -> dict:
    """Parse exactly one frame; no partial message is ever returned."""
    if len(buf) < _HEADER.size:
        raise TruncatedFrameError(f"{len(buf)} bytes is too short for a header")
    (length,) = _HEADER.unpack_from(buf)
    if length > MAX_PAYLOAD:
        raise OversizeFrameError(f"declared payload of {length} bytes exceeds cap")
    if len(buf) - _HEADER.size < length:
        raise TruncatedFrameError(
            f"declared {length} payload bytes, only {len(buf) - _HEADER.size} available"
        )
    if len(buf) - _HEADER.size > length:
        raise MalformedPayloadError("trailing bytes after frame")
    try:
        msg = json.loads(buf[_HEADER.size:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayloadError(str(exc)) from exc
    if not isinstance(msg, dict) or "type" not in msg:
        raise MalformedPayloadError("payload is not an object with a 'type' field")
    return msg
