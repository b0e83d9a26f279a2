import struct
from pathlib import Path
from typing import Union
import numpy as np
from utils.errors import DatasetError

MAGIC = b"SEGB"
VERSION = 1
DTYPE_IMAGE = 0
DTYPE_MASK = 1

# magic, version u8, dtype u8, rows u32 LE, cols u32 LE
HEADER = struct.Struct("<4sBBII")
DEPTH = struct.Struct("<I")

PathLike = Union[str, Path]

_PAYLOAD_DTYPES = {
    DTYPE_IMAGE: np.dtype("<f4"),
    DTYPE_MASK: np.dtype("u1"),
}


def write_slice_file(path: PathLike, array: np.ndarray, dtype_code: int) -> None:
    """Write a 2D grid as a SEGB slice file.

    Args:
        path (PathLike): Destination file.
        array (np.ndarray): 2D image (stored as f32) or mask (stored as u8).
        dtype_code (int): DTYPE_IMAGE or DTYPE_MASK.
    """
    if dtype_code not in _PAYLOAD_DTYPES:
        raise ValueError("unknown SEGB dtype code {}".format(dtype_code))
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError("SEGB slices are 2D, got shape {}".format(array.shape))
    rows, cols = array.shape
    payload = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[dtype_code])
    with open(path, "wb") as handle:
        handle.write(HEADER.pack(MAGIC, VERSION, dtype_code, rows, cols))
        handle.write(payload.tobytes(order="C"))


def read_slice_file(path: PathLike, expected_dtype: int = None) -> np.ndarray:
    """Read a SEGB slice file.

    Args:
        path (PathLike): File to read.
        expected_dtype (int): When given, the stored dtype code must match.

    Returns:
        np.ndarray: float32 image or uint8 mask with the stored shape.

    Raises:
        DatasetError: Missing file, bad magic/version/dtype, or truncated payload.
    """
    raw = _read_bytes(path)
    rows, cols, dtype_code = _parse_header(raw, path)
    if expected_dtype is not None and dtype_code != expected_dtype:
        raise DatasetError("dtype code {} where {} was expected".format(dtype_code, expected_dtype), path)
    payload_dtype = _PAYLOAD_DTYPES[dtype_code]
    expected = HEADER.size + rows * cols * payload_dtype.itemsize
    if len(raw) != expected:
        raise DatasetError("payload length {} does not match {}x{} header".format(
            len(raw) - HEADER.size, rows, cols), path)
    data = np.frombuffer(raw, dtype=payload_dtype, offset=HEADER.size, count=rows * cols)
    native = np.float32 if dtype_code == DTYPE_IMAGE else np.uint8
    return data.reshape(rows, cols).astype(native, copy=True)


def write_volume_file(path: PathLike, volume: np.ndarray) -> None:
    """Write a 3D binary voxel grid (depth, rows, cols) as SEGB-3D"""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError("SEGB-3D volumes are 3D, got shape {}".format(volume.shape))
    depth, rows, cols = volume.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(HEADER.pack(MAGIC, VERSION, DTYPE_MASK, rows, cols))
        handle.write(DEPTH.pack(depth))
        handle.write(np.ascontiguousarray(volume, dtype=np.uint8).tobytes(order="C"))


def read_volume_file(path: PathLike) -> np.ndarray:
    """Read a SEGB-3D voxel grid as uint8 (depth, rows, cols)"""
    raw = _read_bytes(path)
    rows, cols, dtype_code = _parse_header(raw, path)
    if dtype_code != DTYPE_MASK:
        raise DatasetError("volume dtype code must be {}".format(DTYPE_MASK), path)
    if len(raw) < HEADER.size + DEPTH.size:
        raise DatasetError("truncated volume header", path)
    (depth,) = DEPTH.unpack_from(raw, HEADER.size)
    offset = HEADER.size + DEPTH.size
    if len(raw) != offset + depth * rows * cols:
        raise DatasetError("payload length does not match {}x{}x{} header".format(depth, rows, cols), path)
    data = np.frombuffer(raw, dtype=np.uint8, offset=offset, count=depth * rows * cols)
    return data.reshape(depth, rows, cols).copy()


def _read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except FileNotFoundError:
        raise DatasetError("missing file", path) from None
    except OSError as e:
        raise DatasetError("unreadable file ({})".format(e), path) from None


def _parse_header(raw: bytes, path: PathLike):
    if len(raw) < HEADER.size:
        raise DatasetError("truncated SEGB header", path)
    magic, version, dtype_code, rows, cols = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetError("bad magic {!r}, expected {!r}".format(magic, MAGIC), path)
    if version != VERSION:
        raise DatasetError("unsupported SEGB version {}".format(version), path)
    if dtype_code not in _PAYLOAD_DTYPES:
        raise DatasetError("unknown dtype code {}".format(dtype_code), path)
    return rows, cols, dtype_code
