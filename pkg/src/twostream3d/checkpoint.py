"""Named-tensor checkpoint files.

Layout, all integers little-endian:

    u32 entry count
    per entry: u32 name length, UTF-8 name bytes, u64 absolute file offset
    tensor records in entry order, each in the TT3D format

Insertion order is preserved on round trip.
"""

from __future__ import annotations

import io
import struct
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

from .tensor import read_tensor_from, write_tensor_to

NamedTensors = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or invalid entry names."""


def _as_items(tensors: NamedTensors):
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    for name, arr in items:
        if not name:
            raise CheckpointError("tensor names must be non-empty")
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if not isinstance(arr, np.ndarray):
            raise CheckpointError(f"entry {name!r} is not an array")
    return items


def save_checkpoint(path, tensors: NamedTensors) -> None:
    items = _as_items(tensors)
    encoded = [name.encode("utf-8") for name, _ in items]
    header_size = 4 + sum(4 + len(e) + 8 for e in encoded)

    body = io.BytesIO()
    offsets = []
    for _, arr in items:
        offsets.append(header_size + body.tell())
        write_tensor_to(body, arr)

    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(items)))
        for enc, off in zip(encoded, offsets):
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<Q", off))
        fh.write(body.getvalue())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)

    def take(fmt: str):
        size = struct.calcsize(fmt)
        raw = view.read(size)
        if len(raw) != size:
            raise CheckpointError("truncated checkpoint header")
        return struct.unpack(fmt, raw)[0]

    count = take("<I")
    entries = []
    for _ in range(count):
        name_len = take("<I")
        raw = view.read(name_len)
        if len(raw) != name_len:
            raise CheckpointError("truncated checkpoint header")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not valid UTF-8") from exc
        offset = take("<Q")
        entries.append((name, offset))

    out: Dict[str, np.ndarray] = {}
    for name, offset in entries:
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if offset > len(data):
            raise CheckpointError(f"entry {name!r} points past end of file")
        out[name] = read_tensor_from(io.BytesIO(data[offset:]))
    return out
