"""Binary and text file formats shared across the package.

GVTF tensor files::

    b"GVTF" | version u8 (0x01) | dtype u8 | rank u8 | rank * u32 dims | payload

All integers are little-endian, the payload is row-major. dtype 0x01 is
float32 and 0x02 is int32.

Images are stored as binary PPM (P6, 8-bit RGB). In memory an image has
shape (W, H, 3), i.e. the first axis walks along a row, so PPM rows are
transposed on the way in and out.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

PathLike = Union[str, Path]

GVTF_MAGIC = b"GVTF"
GVTF_VERSION = 0x01
DTYPE_FLOAT32 = 0x01
DTYPE_INT32 = 0x02

_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_INT32: np.dtype("<i4")}


class FormatError(ValueError):
    """Raised when a file or byte buffer does not follow its declared format."""


def pack_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.integer):
        code = DTYPE_INT32
    elif np.issubdtype(array.dtype, np.floating):
        code = DTYPE_FLOAT32
    else:
        raise TypeError(f"unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise ValueError("rank too large")
    header = GVTF_MAGIC + bytes([GVTF_VERSION, code, array.ndim])
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def unpack_tensor(data: bytes) -> np.ndarray:
    if len(data) < 7 or data[:4] != GVTF_MAGIC:
        raise FormatError("not a GVTF tensor")
    version, code, rank = data[4], data[5], data[6]
    if version != GVTF_VERSION:
        raise FormatError(f"unsupported GVTF version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown GVTF dtype byte {code:#04x}")
    offset = 7 + 4 * rank
    if len(data) < offset:
        raise FormatError("truncated GVTF header")
    shape = struct.unpack(f"<{rank}I", data[7:offset])
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"GVTF payload has {len(data) - offset} bytes, expected {expected}")
    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return array.astype(np.float64 if code == DTYPE_FLOAT32 else np.int32)


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(pack_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    return unpack_tensor(Path(path).read_bytes())


def save_ppm(path: PathLike, image: np.ndarray) -> None:
    """Write a (W, H, 3) image as 8-bit binary PPM, rounding and clamping."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (W, H, 3) image, got {image.shape}")
    w, h = image.shape[:2]
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 0, 2)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def load_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] not in (b"P6", b"P5"):
        raise FormatError(f"{path}: only binary PPM/PGM (P6/P5) is supported")
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit rasters are supported")
    channels = 3 if data[:2] == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h * channels)
    image = raw.reshape(h, w, channels).transpose(1, 0, 2).astype(np.float64)
    if channels == 1:
        image = np.repeat(image, 3, axis=2)
    return image


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Parse a ``key = value`` config file; ``#`` starts a comment."""
    result = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        result[key.strip().replace("-", "_")] = value.strip()
    return result
