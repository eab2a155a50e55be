"""Binary checkpoints.

Layout (little-endian)::

    magic        4 bytes  b"TPCK"
    version      u8       1
    fp_len       u16      then fp_len bytes of ASCII hex fingerprint
    step         u64
    entries      u32
    per entry:
        path_len u16, path (UTF-8)
        ndim     u8, dims u32 * ndim
        data     float64 * prod(dims)

Weight entries use the model's parameter paths. Optimizer state is stored in
the same table under ``optim/<slot>/<path>`` plus a scalar ``optim/t``.
The fingerprint is the SHA-256 of the resolved model description plus every
parameter path and shape; loading into a model with a different fingerprint
is an error.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"TPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint(model: Module) -> str:
    desc = model.describe() if hasattr(model, "describe") else {"type": type(model).__name__}
    desc = dict(desc, parameters=[[n, list(p.shape)] for n, p in model.named_parameters()])
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


def encode(fp: str, step: int, table: "OrderedDict[str, np.ndarray]") -> bytes:
    out = [MAGIC, struct.pack("<BH", VERSION, len(fp)), fp.encode("ascii"), struct.pack("<QI", step, len(table))]
    for path, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name = path.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(buf: bytes) -> tuple[str, int, "OrderedDict[str, np.ndarray]"]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {buf[:4]!r})")
    version, fp_len = struct.unpack_from("<BH", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 7
    fp = buf[pos : pos + fp_len].decode("ascii")
    pos += fp_len
    step, n = struct.unpack_from("<QI", buf, pos)
    pos += 12
    table: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            path = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointError("truncated tensor data")
            table[path] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return fp, step, table


def save_checkpoint(path, model: Module, step: int = 0, optimizer=None) -> bytes:
    table = OrderedDict(model.state_dict())
    if optimizer is not None:
        for key, arr in optimizer.state_table().items():
            table[f"optim/{key}"] = arr
    buf = encode(fingerprint(model), step, table)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf)
    return buf


def load_checkpoint(path, model: Module, optimizer=None) -> int:
    """Load weights (and optimizer state if given) into ``model``; return the step."""
    fp, step, table = decode(Path(path).read_bytes())
    expect = fingerprint(model)
    if fp != expect:
        raise CheckpointError(f"fingerprint mismatch: checkpoint {fp[:12]}... vs model {expect[:12]}...")
    weights = OrderedDict((k, v) for k, v in table.items() if not k.startswith("optim/"))
    model.load_state_dict(weights)
    if optimizer is not None:
        optimizer.load_state_table({k[6:]: v for k, v in table.items() if k.startswith("optim/")})
    return step
