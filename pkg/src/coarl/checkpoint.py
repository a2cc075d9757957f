"""Named-tensor checkpoint container.

Layout::

    b"CARL" | u32 version | u64 header_len | header (UTF-8 JSON) | f8 blobs

All integers and floats are little-endian. The header holds ``kind``,
``config``, ``meta`` and a ``tensors`` index ``name -> {offset, shape}`` where
``offset`` counts bytes from the start of the blob section. Blobs are written
in sorted name order so a save/load/save cycle is byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CARL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    kind: str
    config: dict
    tensors: dict
    meta: dict = field(default_factory=dict)


def save_container(path, kind: str, config: dict, tensors: dict, meta: dict | None = None) -> None:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        index[name] = {"offset": offset, "shape": list(a.shape)}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"kind": kind, "config": config, "meta": meta or {}, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_container(path, expect_kind: str | None = None) -> Container:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a CARL checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated checkpoint (header cut short)")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    body = memoryview(raw)[start:]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if off + 8 * n > len(body):
            raise CheckpointError(f"{path}: truncated checkpoint (tensor {name!r} incomplete)")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: checkpoint kind is {kind!r}, expected {expect_kind!r}")
    return Container(kind, header.get("config", {}), tensors, header.get("meta", {}))


def save_model(path, model, extra: dict | None = None, meta: dict | None = None) -> None:
    tensors = dict(model.state_arrays())
    if extra:
        tensors.update(extra)
    save_container(path, "model", model.config.to_dict(), tensors, meta)


def load_model(path, return_container: bool = False):
    from . import autodiff as ad
    from .model import ModelConfig, Seq2SeqModel

    c = load_container(path, expect_kind="model")
    cfg = ModelConfig(**c.config)
    names = [n for n in c.tensors if not n.startswith("adam.")]
    params = {n: ad.parameter(c.tensors[n].copy(), name=n) for n in names}
    model = Seq2SeqModel(cfg, params=params)
    return (model, c) if return_container else model
