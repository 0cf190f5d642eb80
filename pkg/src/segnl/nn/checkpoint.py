"""Versioned binary checkpoints.

Layout::

    magic      8 bytes  b"SEGNLCKP"
    version    uint32 little-endian
    hdr_len    uint32 little-endian
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    blobs      little-endian float32 arrays in header order

The header holds the network config, its layer descriptor, training
provenance and the ordered (name, shape) list of every blob: parameters,
then batch-norm buffers, then the optional Adam moments.
"""

import json
import struct

import numpy as np

from segnl.nn.optim import Adam
from segnl.nn.unet import UNetConfig, UNetModel, architecture

MAGIC = b"SEGNLCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, optimizer=None, extra=None):
    entries = [("param", k, v) for k, v in model.params.items()]
    entries += [("buffer", k, v) for k, v in model.buffers.items()]
    if optimizer is not None:
        for k in model.params:
            m, v = optimizer.state.get(k, (np.zeros_like(model.params[k]),) * 2)
            entries += [("adam_m", k, m), ("adam_v", k, v)]
    header = {
        "config": model.config.to_dict(),
        "architecture": architecture(model.config),
        "epoch": int(model.epoch),
        "blobs": [[kind, name, list(arr.shape)] for kind, name, arr in entries],
        "adam_t": None if optimizer is None else int(optimizer.t),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(model, optimizer_or_None, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    version, hdr_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hdr_len].decode("utf-8"))
    offset = 16 + hdr_len
    params, buffers, moments = {}, {}, {}
    for kind, name, shape in header["blobs"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at blob {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
        if kind == "param":
            params[name] = arr
        elif kind == "buffer":
            buffers[name] = arr
        else:
            moments.setdefault(name, {})[kind] = arr
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    config = UNetConfig.from_dict(header["config"])
    if header.get("architecture") != architecture(config):
        raise CheckpointError(f"{path}: layer descriptor does not match the stored config")
    model = UNetModel(config, params, buffers, header["epoch"])
    optimizer = None
    if header["adam_t"] is not None:
        optimizer = Adam()
        optimizer.t = header["adam_t"]
        optimizer.state = {k: (v["adam_m"], v["adam_v"]) for k, v in moments.items()}
    return model, optimizer, header["extra"]
