"""Binary checkpoint container shared by every trained model.

Layout (little-endian): magic ``ECKP``, u32 version, u32 header length, UTF-8
JSON header, then each parameter as raw f32 in manifest order. The header holds
the model kind, constructor arguments, the data-config hash, the layer manifest
(parameter names and shapes) and free-form extras such as latent statistics.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .numerics import layer_manifest

MAGIC = b"ECKP"
VERSION = 1
_PRE = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, model: nn.Module, *, args: dict, config_hash: str,
                    extra: dict | None = None) -> None:
    manifest = layer_manifest(model)
    header = {
        "kind": kind,
        "args": args,
        "config_hash": config_hash,
        "manifest": manifest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, p in model.named_parameters():
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_header(path: str | Path) -> dict[str, Any]:
    data = Path(path).read_bytes()
    header, _ = _split(data, path)
    return header


def _split(data: bytes, path) -> tuple[dict, int]:
    if len(data) < _PRE.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PRE.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not an echolab checkpoint (magic={magic!r}, version={version})")
    header = json.loads(data[_PRE.size:_PRE.size + hlen].decode())
    return header, _PRE.size + hlen


def load_checkpoint(path: str | Path, model: nn.Module, kind: str) -> dict[str, Any]:
    """Fill ``model`` in place; rejects kind or layer-manifest mismatches."""
    data = Path(path).read_bytes()
    header, off = _split(data, path)
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {header['kind']!r} model, expected {kind!r}")
    expected = layer_manifest(model)
    if header["manifest"] != expected:
        raise CheckpointError(f"{path}: layer manifest does not match the model definition")
    with torch.no_grad():
        for _, p in model.named_parameters():
            n = p.numel()
            if off + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated parameter data at byte {off}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(arr.copy()))
            off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header
