"""Binary encoding for tensors: the ``PNPT`` file format and the ``PNPD``
external-denoiser request/response protocol (version 1).

All integers and scalars are little-endian; payloads are row-major.

File::

    "PNPT" | u32 version | u8 dtype | u32 ndim | u64 dims[ndim] | payload

Request::

    "PNPD" | u32 version | u8 dtype | u32 ndim | u64 dims[ndim] | f64 t | payload

Response::

    "PNPD" | u32 status=0 | u8 dtype | u32 ndim | u64 dims[ndim] | payload
    "PNPD" | u32 status=1 | u32 message_len | utf-8 message

dtype codes: 0 = float64, 1 = complex128.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Callable, Tuple

import numpy as np

FILE_MAGIC = b"PNPT"
WIRE_MAGIC = b"PNPD"
VERSION = 1
STATUS_OK = 0
STATUS_ERROR = 1

_CODES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_CODE_OF = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1}
MAX_NDIM = 16
MAX_ELEMENTS = 1 << 31


class ProtocolError(ValueError):
    """Malformed or inconsistent bytes on the wire or on disk."""


class RemoteError(RuntimeError):
    """The peer answered with status=1."""


def read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError(f"stream ended after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def dtype_code(dtype) -> int:
    try:
        return _CODE_OF[np.dtype(dtype)]
    except KeyError:
        raise TypeError(f"unsupported dtype {dtype}") from None


def encode_header(x: np.ndarray) -> bytes:
    code = dtype_code(x.dtype)
    return struct.pack("<BI", code, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)


def encode_payload(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype=_CODES[dtype_code(x.dtype)]).tobytes()


def read_header(read: Callable[[int], bytes]) -> Tuple[np.dtype, Tuple[int, ...]]:
    code, ndim = struct.unpack("<BI", read(5))
    if code not in _CODES:
        raise ProtocolError(f"unknown dtype code {code}")
    if ndim > MAX_NDIM:
        raise ProtocolError(f"implausible ndim {ndim}")
    dims = struct.unpack(f"<{ndim}Q", read(8 * ndim)) if ndim else ()
    if math.prod(dims) > MAX_ELEMENTS:
        raise ProtocolError(f"implausible tensor size {dims}")
    return _CODES[code], tuple(int(d) for d in dims)


def read_payload(read: Callable[[int], bytes], dtype: np.dtype, shape) -> np.ndarray:
    nbytes = dtype.itemsize * math.prod(shape)
    raw = read(nbytes)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    native = np.complex128 if dtype.kind == "c" else np.float64
    return arr.astype(native)


def encode_file(x: np.ndarray) -> bytes:
    return FILE_MAGIC + struct.pack("<I", VERSION) + encode_header(x) + encode_payload(x)


def decode_file(read: Callable[[int], bytes]) -> np.ndarray:
    magic = read(4)
    if magic != FILE_MAGIC:
        raise ProtocolError(f"bad tensor-file magic {magic!r}")
    (version,) = struct.unpack("<I", read(4))
    if version != VERSION:
        raise ProtocolError(f"unsupported tensor-file version {version}")
    dtype, shape = read_header(read)
    return read_payload(read, dtype, shape)


def encode_request(x: np.ndarray, t: float) -> bytes:
    return WIRE_MAGIC + struct.pack("<I", VERSION) + encode_header(x) + struct.pack("<d", t) + encode_payload(x)


def decode_request(read: Callable[[int], bytes]) -> Tuple[np.ndarray, float]:
    magic = read(4)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    return decode_request_body(read)


def decode_request_body(read: Callable[[int], bytes]) -> Tuple[np.ndarray, float]:
    """Decode a request whose magic has already been consumed."""
    (version,) = struct.unpack("<I", read(4))
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    dtype, shape = read_header(read)
    (t,) = struct.unpack("<d", read(8))
    return read_payload(read, dtype, shape), t


def encode_ok(x: np.ndarray) -> bytes:
    return WIRE_MAGIC + struct.pack("<I", STATUS_OK) + encode_header(x) + encode_payload(x)


def encode_error(message: str) -> bytes:
    data = message.encode("utf-8")
    return WIRE_MAGIC + struct.pack("<II", STATUS_ERROR, len(data)) + data


def decode_response(read: Callable[[int], bytes]) -> np.ndarray:
    """Decode one response; raises :class:`RemoteError` on status=1."""
    magic = read(4)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")
    (status,) = struct.unpack("<I", read(4))
    if status == STATUS_ERROR:
        (n,) = struct.unpack("<I", read(4))
        raise RemoteError(read(n).decode("utf-8", errors="replace"))
    if status != STATUS_OK:
        raise ProtocolError(f"unknown response status {status}")
    dtype, shape = read_header(read)
    return read_payload(read, dtype, shape)
