"""Binary PPM (P6) / PGM (P5) with maxval 255, and the RAWT float32 tensor format.

RAWT layout: b"RAWT", u32 LE rank, rank x u32 LE dims, then float32 LE values
in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

MAX_DIM = 1 << 20
MAX_RANK = 8


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class TruncatedPayloadError(CodecError):
    pass


class DimensionOverflowError(CodecError):
    pass


def to_bytes8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to the 8-bit grid (round-half-to-even, clipped)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    """HxWx3 -> P6, HxW or HxWx1 -> P5. Values are taken as [0, 1] intensities."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise CodecError(f"cannot store shape {img.shape} as PPM/PGM")
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + to_bytes8(img).tobytes()


def _header_tokens(data: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedPayloadError("header ends before all fields were read")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedPayloadError("missing whitespace after header")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into float64 HxWxC in [0, 1] (C = 1 or 3)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"expected P5 or P6, found {magic!r}")
    channels = 3 if magic == b"P6" else 1
    tokens, offset = _header_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise CodecError(f"non-integer header field in {tokens!r}") from None
    if w <= 0 or h <= 0 or w > MAX_DIM or h > MAX_DIM:
        raise DimensionOverflowError(f"image dimensions {w}x{h} out of range")
    if maxval != 255:
        raise CodecError(f"only maxval 255 is supported, got {maxval}")
    payload = data[2 + offset:]
    need = w * h * channels
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {need}")
    raster = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, channels)
    return raster.astype(np.float64) / 255.0


def encode_rawt(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if arr.ndim > MAX_RANK:
        raise DimensionOverflowError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if any(d >= 1 << 32 for d in arr.shape):
        raise DimensionOverflowError(f"dimension too large for u32: {arr.shape}")
    head = b"RAWT" + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_rawt(data: bytes) -> np.ndarray:
    """Decode to a float32 array; callers widen to float64 as needed."""
    if data[:4] != b"RAWT":
        raise BadMagicError(f"expected RAWT, found {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedPayloadError("missing rank field")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank > MAX_RANK:
        raise DimensionOverflowError(f"rank {rank} exceeds {MAX_RANK}")
    if len(data) < 8 + 4 * rank:
        raise TruncatedPayloadError("missing dimension fields")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=object)) if rank else 1
    if count * 4 > (1 << 40):
        raise DimensionOverflowError(f"declared shape {dims} is too large")
    start = 8 + 4 * rank
    if len(data) - start < 4 * count:
        raise TruncatedPayloadError(f"payload has {len(data) - start} bytes, shape {dims} needs {4 * count}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)


PathLike = Union[str, Path]


def read_image(path: PathLike) -> np.ndarray:
    """Read .ppm/.pgm/.rawt into a float64 HxWxC array."""
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return decode_pnm(data)
    if suffix == ".rawt":
        arr = decode_rawt(data).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return arr
    raise CodecError(f"unsupported image extension {suffix!r}")


def write_image(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        path.write_bytes(encode_pnm(image))
    elif suffix == ".rawt":
        path.write_bytes(encode_rawt(image))
    else:
        raise CodecError(f"unsupported image extension {suffix!r}")
