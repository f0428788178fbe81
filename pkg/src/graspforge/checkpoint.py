"""Self-describing binary checkpoint container.

Layout: magic, format version, a JSON header (model config + training
metadata), then the named weight tensors as raw little-endian blocks in
canonical parameter order. Writing is fully deterministic, so
save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointFormatError
from .network import Model, ModelConfig, parameter_names
from .tensor import Tensor

MAGIC = b"GFCKPT\x00"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(path, model: Model, metadata: dict | None = None):
    """Write the model (config + all weights) plus metadata to `path`."""
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensor_count": len(model.params),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name, tensor in model.parameters():
            data = np.ascontiguousarray(tensor.data)
            if data.dtype.byteorder == ">":
                data = data.astype(data.dtype.newbyteorder("<"))
            dt = data.dtype.str if data.dtype.str in _DTYPES else "<f4"
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            db = dt.encode("ascii")
            f.write(struct.pack("<B", len(db)))
            f.write(db)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            raw = data.astype(_DTYPES[dt], copy=False).tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint; returns (model, metadata). Weights load frozen."""
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError(f"{path} is not a graspforge checkpoint")
        version, hlen = struct.unpack("<HI", _read_exact(f, 6, "header size"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params = {}
        for _ in range(int(header["tensor_count"])):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (dlen,) = struct.unpack("<B", _read_exact(f, 1, "dtype length"))
            dt = _read_exact(f, dlen, "dtype").decode("ascii")
            if dt not in _DTYPES:
                raise CheckpointFormatError(f"unsupported tensor dtype '{dt}'")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            (nbytes,) = struct.unpack("<Q", _read_exact(f, 8, "payload size"))
            raw = _read_exact(f, nbytes, f"tensor '{name}'")
            arr = np.frombuffer(raw, dtype=_DTYPES[dt]).reshape(shape).copy()
            params[name] = Tensor(arr)
        expected = parameter_names(config)
        if list(params.keys()) != expected:
            raise CheckpointFormatError(
                f"checkpoint tensors do not match its config: got {sorted(params)[:3]}...")
    return Model(config, params), header.get("metadata", {})
