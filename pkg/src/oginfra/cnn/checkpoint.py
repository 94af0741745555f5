"""Single-file model checkpoints.

Layout (all integers little-endian)::

    bytes 0..5   magic b"OGCNN\\x00"
    bytes 6..7   uint16 format version (currently 1)
    bytes 8..11  uint32 length L of the header
    next L bytes UTF-8 JSON header, keys sorted:
                 {"input_shape": [C, H, W],
                  "layers": [LayerSpec dicts],
                  "params": [{"layer": i, "name": "w"|"b", "shape": [...]}, ...]}
    remainder    float64 little-endian values of each listed param, in header
                 order, each flattened row-major

The encoding has no timestamps, so saving the same weights twice yields
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from oginfra.cnn.network import LayerSpec, Network
from oginfra.errors import OGInfraError

MAGIC = b"OGCNN\x00"
VERSION = 1


class CheckpointError(OGInfraError):
    pass


def dumps(model: Network) -> bytes:
    entries = []
    payload = []
    for i, p in enumerate(model.params):
        for name in sorted(p):
            entries.append({"layer": i, "name": name, "shape": list(p[name].shape)})
            payload.append(np.ascontiguousarray(p[name], dtype="<f8").tobytes())
    header = json.dumps(
        {"input_shape": list(model.input_shape), "layers": [s.to_dict() for s in model.specs], "params": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(payload)


def loads(data: bytes) -> Network:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a model checkpoint (bad magic)")
    try:
        version, length = struct.unpack_from("<HI", data, len(MAGIC))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = len(MAGIC) + 6
        header = json.loads(data[offset : offset + length].decode("utf-8"))
        offset += length
        model = Network([LayerSpec.from_dict(d) for d in header["layers"]], tuple(header["input_shape"]))
        for entry in header["params"]:
            target = model.params[entry["layer"]][entry["name"]]
            if list(target.shape) != entry["shape"]:
                raise CheckpointError(f"param {entry} does not match the layer specs")
            count = int(np.prod(entry["shape"]))
            values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            target[...] = values.reshape(entry["shape"])
            offset += 8 * count
    except (struct.error, ValueError, KeyError, TypeError, IndexError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last parameter")
    return model


def save(model: Network, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> Network:
    return loads(Path(path).read_bytes())
