import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import numpy as np
from utils.errors import CheckpointError

PathLike = Union[str, Path]

FORMAT_VERSION = 1
# u64 little-endian header length, JSON header, then one f32 LE blob
HEADER_LENGTH = struct.Struct("<Q")
_BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Named tensors plus the metadata stored alongside them.

    Attributes:
        tensors (OrderedDict): name -> float32 array, in file order.
        buffers (List[str]): Names in `tensors` that are non-trainable buffers.
        model_config (Optional[Dict]): Serialized ModelConfig, when known.
        model_config_hash (str): Content hash of model_config.
        epoch (int): Epoch the values were taken from (0 when not from training).
        val_loss (Optional[float]): Validation loss at that epoch.
    """
    tensors: "OrderedDict[str, np.ndarray]"
    buffers: List[str] = field(default_factory=list)
    model_config: Optional[Dict[str, Any]] = None
    model_config_hash: str = ""
    epoch: int = 0
    val_loss: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if k not in self.buffers)


def write_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    """Serialize a checkpoint; values are stored as float32 in insertion order"""
    table = OrderedDict()
    blobs = []
    offset = 0
    for name, value in checkpoint.tensors.items():
        data = np.ascontiguousarray(value, dtype=_BLOB_DTYPE)
        table[name] = {"shape": list(data.shape), "offset": offset, "length": data.nbytes}
        blobs.append(data.tobytes(order="C"))
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_config_hash": checkpoint.model_config_hash,
        "model_config": checkpoint.model_config,
        "epoch": int(checkpoint.epoch),
        "val_loss": None if checkpoint.val_loss is None else float(checkpoint.val_loss),
        "parameters": table,
        "buffers": list(checkpoint.buffers),
        "extra": checkpoint.extra,
    }
    encoded = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(HEADER_LENGTH.pack(len(encoded)))
        handle.write(encoded)
        for blob in blobs:
            handle.write(blob)


def read_checkpoint(path: PathLike) -> Checkpoint:
    """Parse a checkpoint container.

    Args:
        path (PathLike): File written by write_checkpoint.

    Returns:
        Checkpoint: Tensors in file order with their metadata.

    Raises:
        CheckpointError: Missing file, truncated header, malformed JSON, or a parameter table
            that does not match the blob.
    """
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except FileNotFoundError:
        raise CheckpointError("missing checkpoint", path) from None
    except OSError as e:
        raise CheckpointError("unreadable checkpoint ({})".format(e), path) from None

    if len(raw) < HEADER_LENGTH.size:
        raise CheckpointError("truncated header length", path)
    (header_length,) = HEADER_LENGTH.unpack_from(raw, 0)
    start = HEADER_LENGTH.size + header_length
    if start > len(raw):
        raise CheckpointError("header length {} exceeds file size".format(header_length), path)
    try:
        header = json.loads(raw[HEADER_LENGTH.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("malformed header ({})".format(e), path) from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint format", path)

    blob = raw[start:]
    tensors = OrderedDict()
    expected_offset = 0
    for name, entry in header.get("parameters", {}).items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError("malformed table entry for {}".format(name), path) from None
        count = int(np.prod(shape)) if shape else 1
        if offset != expected_offset or length != count * _BLOB_DTYPE.itemsize or offset + length > len(blob):
            raise CheckpointError("table entry for {} does not match the blob".format(name), path)
        values = np.frombuffer(blob, dtype=_BLOB_DTYPE, offset=offset, count=count)
        tensors[name] = values.reshape(shape).astype(np.float32)
        expected_offset = offset + length
    if expected_offset != len(blob):
        raise CheckpointError("{} trailing bytes after the last tensor".format(len(blob) - expected_offset), path)

    return Checkpoint(
        tensors=tensors,
        buffers=[b for b in header.get("buffers", []) if b in tensors],
        model_config=header.get("model_config"),
        model_config_hash=header.get("model_config_hash", ""),
        epoch=int(header.get("epoch", 0)),
        val_loss=header.get("val_loss"),
        extra=header.get("extra") or {},
    )
