"""Per-layer binary tensor files (``SCARWGT1``) plus a ``layers.txt`` order list.

Each tensor file holds: the 8-byte magic, a u32 name length and the UTF-8
name, a u32 rank, ``rank`` u32 dims, then float32 values in row-major order.
All integers and floats are little-endian.
"""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError

WEIGHT_MAGIC = b"SCARWGT1"
LAYER_LIST = "layers.txt"


def encode_tensor(name, array):
    array = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    encoded = name.encode("utf-8")
    header = WEIGHT_MAGIC + struct.pack("<I", len(encoded)) + encoded
    header += struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def decode_tensor(raw, source="<bytes>"):
    if raw[:8] != WEIGHT_MAGIC:
        raise CheckpointError(f"{source}: bad magic, expected {WEIGHT_MAGIC.decode()}")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        if len(name.encode("utf-8")) != n:
            raise struct.error("short name")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: truncated or corrupt header") from exc
    size = int(np.prod(dims, dtype=np.int64))
    body = raw[pos:]
    if len(body) != 4 * size:
        raise CheckpointError(f"{source}: expected {size} floats for {name!r}, found {len(body) / 4:g}")
    return name, np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


def _filename(name):
    return name.replace("/", "_") + ".bin"


def save_weights(directory, tensors):
    """Write a mapping name -> array as one file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(tensors)
    for name in names:
        value = tensors[name]
        if hasattr(value, "detach"):
            value = value.detach().cpu().numpy()
        (directory / _filename(name)).write_bytes(encode_tensor(name, value))
    (directory / LAYER_LIST).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def load_weights(directory):
    directory = Path(directory)
    listing = directory / LAYER_LIST
    if not listing.is_file():
        raise CheckpointError(f"{directory}: missing {LAYER_LIST}")
    out = OrderedDict()
    for name in listing.read_text(encoding="utf-8").split():
        path = directory / _filename(name)
        if not path.is_file():
            raise CheckpointError(f"{directory}: layer {name!r} listed but {path.name} is missing")
        stored, array = decode_tensor(path.read_bytes(), str(path))
        if stored != name:
            raise CheckpointError(f"{path}: holds {stored!r}, expected {name!r}")
        out[name] = array
    return out
