import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from lib.exceptions import BadMagic, TruncatedFile
from lib.nets.nets_constants import NetDefaults
from lib.nets.physical_layer import AdamState

_HEADER = struct.Struct("<II")
_COUNTERS = struct.Struct("<QQ")


@dataclass
class CheckpointRecord:
    """
    Decoded checkpoint: JSON metadata, parameter arrays, Adam state and the
    run's rng counter (epochs consumed).
    """
    metadata: dict
    arrays: list
    adam: AdamState
    counter: int


def encode_checkpoint(record):
    """
    Serializes a checkpoint: magic, version, length-prefixed JSON metadata
    (including every array shape), u64 rng counter and Adam step, then
    parameters, first and second moments as little-endian f64.

    Returns:
        bytes: The file contents.
    """
    metadata = dict(record.metadata)
    metadata["shapes"] = [list(a.shape) for a in record.arrays]
    blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [
        NetDefaults.CHECKPOINT_MAGIC,
        _HEADER.pack(NetDefaults.CHECKPOINT_VERSION, len(blob)),
        blob,
        _COUNTERS.pack(record.counter, record.adam.step),
    ]
    for group in (record.arrays, record.adam.first_moment, record.adam.second_moment):
        parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in group)
    return b"".join(parts)


def decode_checkpoint(data):
    """
    Inverse of encode_checkpoint; bit-exact.

    Raises:
        BadMagic: Wrong magic or unsupported version.
        TruncatedFile: Fewer bytes than the header announces.
    """
    magic = NetDefaults.CHECKPOINT_MAGIC
    if data[: len(magic)] != magic:
        raise BadMagic(f"not a checkpoint: magic {data[:len(magic)]!r}")
    offset = len(magic)
    if len(data) < offset + _HEADER.size:
        raise TruncatedFile("checkpoint header is truncated")
    version, blob_len = _HEADER.unpack_from(data, offset)
    if version != NetDefaults.CHECKPOINT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    offset += _HEADER.size
    if len(data) < offset + blob_len + _COUNTERS.size:
        raise TruncatedFile("checkpoint metadata is truncated")
    metadata = json.loads(data[offset: offset + blob_len].decode("utf-8"))
    offset += blob_len
    counter, step = _COUNTERS.unpack_from(data, offset)
    offset += _COUNTERS.size
    shapes = [tuple(s) for s in metadata.pop("shapes")]
    groups = []
    for _ in range(3):
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape)) * 8
            if len(data) < offset + size:
                raise TruncatedFile("checkpoint parameters are truncated")
            arrays.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).astype(np.float64).reshape(shape))
            offset += size
        groups.append(arrays)
    return CheckpointRecord(metadata, groups[0], AdamState(step, groups[1], groups[2]), counter)


def write_checkpoint(path, record):
    """
    Writes to path.part and renames it over path, so a reader only ever sees
    the previous or the new complete checkpoint.
    """
    partial = f"{path}.part"
    with open(partial, "wb") as handle:
        handle.write(encode_checkpoint(record))
    os.replace(partial, path)


def read_checkpoint(path):
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())
