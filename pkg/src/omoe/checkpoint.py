"""Binary checkpoints of adapter parameters.

Layout (all integers little-endian)::

    b"OMOE"                      magic
    u16   format version (1)
    u32   length of config JSON, then that many UTF-8 bytes
    u32   number of tensor entries
    per entry:
      u16   name length, then UTF-8 name
      u8    dtype tag (1 = float32, 2 = float64)
      u8    rank
      u64 * rank   dims
      raw little-endian values, row-major
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError, PrecisionError
from .tensor import get_precision

MAGIC = b"OMOE"
VERSION = 1
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ContractError):
    pass


def save_checkpoint(path, tensors, config):
    """Write ``tensors`` (name -> array or Tensor) and a JSON-able ``config``."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(getattr(value, "data", value))
            le = arr.dtype.newbyteorder("<")
            if le not in _TAGS:
                raise CheckpointError(f"cannot store dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _TAGS[le], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def read_checkpoint(path):
    """Return ``(tensors, config)`` with tensors as little-endian numpy arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an OMOE checkpoint")
    off = 4
    try:
        version, n_cfg = struct.unpack_from("<HI", blob, off)
        off += 6
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        config = json.loads(blob[off:off + n_cfg].decode("utf-8"))
        off += n_cfg
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n_name].decode("utf-8")
            off += n_name
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            dtype = _DTYPES.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            tensors[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return tensors, config


def save_model(path, model, config):
    save_checkpoint(path, dict(model.named_parameters()), config)


def load_into(model, path):
    """Copy checkpoint values into ``model``'s parameters; returns the config.

    The checkpoint precision must equal the active precision.
    """
    tensors, config = read_checkpoint(path)
    want = get_precision().dtype
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    for name, arr in tensors.items():
        if arr.dtype != want:
            raise PrecisionError(f"checkpoint stores {arr.dtype} but active precision is {get_precision().value}")
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match model {p.shape}")
        p.data[...] = arr
    return config
