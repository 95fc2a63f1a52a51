"""File formats: IDX, the stack container, the checkpoint container, key-value text and PNG grids.

Stack container (``.tvs``), all integers little-endian::

    magic   4 bytes  b"TVSK"
    dtype   u8       1 uint8, 2 int32, 3 int64, 4 float32, 5 float64
    rank    u8
    dims    rank x u32
    payload C-order little-endian values

Checkpoint container (``.tvae``), all integers little-endian::

    magic       8 bytes  b"TVAECKPT"
    version     u32      currently 1
    meta_len    u32
    metadata    meta_len bytes of UTF-8 JSON
    count       u32      number of tensors
    per tensor:
        name_len  u16
        name      name_len bytes of UTF-8
        rank      u8
        dims      rank x u32
        payload   prod(dims) little-endian float32 values

IDX files follow the standard layout: two zero bytes, a type code, the rank, big-endian u32 dims
and a big-endian payload.
"""

import json
import logging
import math
import struct
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
from PIL import Image

from ..core.exceptions import FormatError, ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

STACK_MAGIC = b"TVSK"
STACK_DTYPES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("<f4"),
    5: np.dtype("<f8"),
}

CHECKPOINT_MAGIC = b"TVAECKPT"
CHECKPOINT_VERSION = 1


def _require(data: bytes, offset: int, size: int, what: str) -> None:
    if offset + size > len(data):
        raise FormatError(f"Truncated {what}: need {size} bytes, {len(data) - offset} left", offset)


# IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX byte string into a native-endian array."""
    _require(data, 0, 4, "IDX header")
    if data[0] != 0 or data[1] != 0:
        raise FormatError("Bad IDX magic: first two bytes must be zero", 0)
    code, rank = data[2], data[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"Unknown IDX type code 0x{code:02x}", 2)
    _require(data, 4, 4 * rank, "IDX dimensions")
    dims = struct.unpack(f">{rank}I", data[4:4 + 4 * rank])
    offset = 4 + 4 * rank
    dtype = IDX_DTYPES[code]
    size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    _require(data, offset, size, "IDX payload")
    if len(data) > offset + size:
        logger.warning(f"IDX data has {len(data) - offset - size} trailing bytes")
    array = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=offset)
    return array.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path: PathLike) -> np.ndarray:
    """Read an IDX file (gzip-compressed files are recognised by the ``.gz`` suffix)."""
    path = Path(path)
    if path.suffix == ".gz":
        import gzip

        with gzip.open(path, "rb") as f:
            data = f.read()
    else:
        data = path.read_bytes()
    return parse_idx(data)


def write_idx(path: PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    for code, dtype in IDX_DTYPES.items():
        if dtype.newbyteorder("=") == array.dtype.newbyteorder("="):
            break
    else:
        raise ShapeError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(IDX_DTYPES[code]).tobytes())


# Stack container


def encode_stack(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    for code, dtype in STACK_DTYPES.items():
        if dtype.newbyteorder("=") == array.dtype.newbyteorder("="):
            break
    else:
        raise ShapeError(f"dtype {array.dtype} cannot be stored in a stack container")
    header = STACK_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.asarray(array, dtype=STACK_DTYPES[code]).tobytes()


def decode_stack(data: bytes) -> np.ndarray:
    _require(data, 0, 6, "stack header")
    if data[:4] != STACK_MAGIC:
        raise FormatError(f"Bad stack magic {data[:4]!r}", 0)
    code, rank = struct.unpack("<BB", data[4:6])
    if code not in STACK_DTYPES:
        raise FormatError(f"Unknown stack dtype code {code}", 4)
    _require(data, 6, 4 * rank, "stack dimensions")
    dims = struct.unpack(f"<{rank}I", data[6:6 + 4 * rank])
    offset = 6 + 4 * rank
    dtype = STACK_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    _require(data, offset, count * dtype.itemsize, "stack payload")
    array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return array.reshape(dims).astype(dtype.newbyteorder("="))


def write_stack(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_stack(array))


def read_stack(path: PathLike) -> np.ndarray:
    return decode_stack(Path(path).read_bytes())


# Checkpoint container


def write_checkpoint(
    path: PathLike, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any]
) -> None:
    """Write named float32 tensors plus a JSON metadata record."""
    meta = json.dumps(dict(metadata), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        array = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint container written by :func:`write_checkpoint`."""
    data = Path(path).read_bytes()
    _require(data, 0, 16, "checkpoint header")
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {data[:8]!r}", 0)
    version, meta_len = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", 8)
    offset = 16
    _require(data, offset, meta_len, "checkpoint metadata")
    try:
        metadata = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Corrupt checkpoint metadata: {e}", offset) from e
    offset += meta_len
    _require(data, offset, 4, "tensor count")
    (count,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        _require(data, offset, 2, "tensor name length")
        (name_len,) = struct.unpack("<H", data[offset:offset + 2])
        offset += 2
        _require(data, offset, name_len + 1, "tensor name")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = data[offset]
        offset += 1
        _require(data, offset, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", data[offset:offset + 4 * rank])
        offset += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        _require(data, offset, 4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += 4 * n
    return tensors, metadata


# Key-value text


def format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


def write_key_values(path: PathLike, values: Mapping[str, Any]) -> None:
    lines = [f"{key} = {format_value(value)}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Read ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{number}: expected 'key = value', got {raw!r}", 0)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


# PNG grids


def to_uint8(images: np.ndarray) -> np.ndarray:
    return (np.clip(images, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def montage(images: np.ndarray, columns: int = 0, padding: int = 1) -> np.ndarray:
    """Tile ``[N, C, H, W]`` images (C = 1 or 3) into one ``[C, H', W']`` array."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ShapeError(f"Expected [N, 1|3, H, W] images, got {images.shape}")
    n, c, h, w = images.shape
    columns = columns or max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / columns))
    grid = np.zeros((c, rows * (h + padding) + padding, columns * (w + padding) + padding), np.float32)
    for index in range(n):
        row, col = divmod(index, columns)
        top = padding + row * (h + padding)
        left = padding + col * (w + padding)
        grid[:, top:top + h, left:left + w] = images[index]
    return grid


def save_image_grid(path: PathLike, images: np.ndarray, columns: int = 0) -> Path:
    """Save a montage of ``[N, C, H, W]`` images in [0, 1] as an 8-bit PNG."""
    grid = to_uint8(montage(images, columns))
    if grid.shape[0] == 1:
        picture = Image.fromarray(grid[0])
    else:
        picture = Image.fromarray(np.ascontiguousarray(np.transpose(grid, (1, 2, 0))))
    path = Path(path)
    picture.save(path)
    logger.info(f"Wrote image grid with {len(images)} images to {path}")
    return path
