"""Binary checkpoint format.

Layout::

    smamba-checkpoint 1
    header <one-line JSON: model kind, config, free metadata>
    tensor <name> <f32|f64> <extent>x<extent>...
    ...
    end
    <row-major little-endian payloads, in manifest order>
    <8-byte little-endian BLAKE2b-64 checksum of the payload bytes>

The manifest is UTF-8 text terminated by the ``end`` line.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .exceptions import ArtifactMismatchError, LoadError
from .model import LinearBaseline, LinearConfig, ModelConfig, SMambaModel
from .tensor import Tensor

MAGIC = "smamba-checkpoint 1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _kind(model) -> str:
    if isinstance(model, SMambaModel):
        return "smamba"
    if isinstance(model, LinearBaseline):
        return "linear"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def dumps(model, meta: dict | None = None) -> bytes:
    header = {"kind": _kind(model), "config": vars(model.config).copy(), "meta": meta or {}}
    lines = [MAGIC, "header " + json.dumps(header, sort_keys=True)]
    chunks = []
    for name, t in model.parameters().items():
        tag = _TAGS.get(t.data.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {t.data.dtype}")
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        lines.append(f"tensor {name} {tag} {'x'.join(str(e) for e in t.shape) or '-'}")
        chunks.append(np.ascontiguousarray(t.data, dtype=_DTYPES[tag]).tobytes())
    lines.append("end")
    payload = b"".join(chunks)
    return ("\n".join(lines) + "\n").encode("utf-8") + payload + checksum(payload)


def save(path, model, meta: dict | None = None) -> Path:
    path = Path(path)
    blob = dumps(model, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def loads(blob: bytes):
    """Return ``(model, meta)`` decoded from checkpoint bytes."""
    end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise LoadError("not a checkpoint file (bad magic or missing manifest end)")
    manifest = blob[:end].decode("utf-8").split("\n")
    body = blob[end + len(b"\nend\n"):]
    payload, stored = body[:-8], body[-8:]
    if len(body) < 8 or checksum(payload) != stored:
        raise LoadError("checkpoint checksum mismatch")
    header = None
    entries = []
    for line in manifest[1:]:
        kind, _, rest = line.partition(" ")
        try:
            if kind == "header":
                header = json.loads(rest)
            elif kind == "tensor":
                name, tag, ext = rest.split(" ")
                if tag not in _DTYPES:
                    raise ValueError(f"unknown dtype tag {tag}")
                shape = () if ext == "-" else tuple(int(e) for e in ext.split("x"))
                entries.append((name, tag, shape))
            else:
                raise ValueError("unknown entry")
        except ValueError as err:
            raise LoadError(f"bad manifest line {line!r}: {err}") from None
    if header is None:
        raise LoadError("checkpoint manifest has no header")

    arrays = {}
    offset = 0
    for name, tag, shape in entries:
        dt = _DTYPES[tag]
        n = int(np.prod(shape)) * dt.itemsize
        if offset + n > len(payload):
            raise LoadError(f"payload truncated at tensor {name}")
        arrays[name] = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=offset).reshape(shape)
        offset += n
    if offset != len(payload):
        raise LoadError("payload longer than manifest declares")

    params = {k: Tensor(v.astype(v.dtype.newbyteorder("="), copy=True), requires_grad=True) for k, v in arrays.items()}
    dtype = next(iter(params.values())).dtype.type if params else np.float32
    if header["kind"] == "smamba":
        model = SMambaModel(ModelConfig(**header["config"]), params, dtype)
        expected = SMambaModel.initialize(model.config)
        mismatch = {k for k in expected.params if k not in params or expected.params[k].shape != params[k].shape}
        if mismatch or set(params) - set(expected.params):
            raise ArtifactMismatchError(f"checkpoint tensors disagree with its config: {sorted(mismatch)}")
    elif header["kind"] == "linear":
        model = LinearBaseline(LinearConfig(**header["config"]), params, dtype)
    else:
        raise LoadError(f"unknown model kind {header['kind']!r}")
    return model, header.get("meta", {})


def load(path):
    return loads(Path(path).read_bytes())


def manifest_parameter_count(blob: bytes) -> int:
    """Sum of extents declared in a checkpoint manifest."""
    end = blob.find(b"\nend\n")
    total = 0
    for line in blob[:end].decode("utf-8").split("\n"):
        if line.startswith("tensor "):
            ext = line.split(" ")[3]
            total += 1 if ext == "-" else int(np.prod([int(e) for e in ext.split("x")]))
    return total
