"""Binary checkpoint format.

Layout (all integers little-endian)::

    bytes 0..3   magic b"XSEG"
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 header length H
    H bytes      UTF-8 JSON header, keys sorted, separators "," and ":"
    payload      float32 little-endian arrays, concatenated in header order

The header holds ``config`` (ModelConfig fields), ``provenance`` (free text)
and ``params``: a list of ``{"name", "shape", "offset", "nbytes"}`` records
where ``offset`` is relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .unet import ModelConfig, UNet, layer_specs

MAGIC = b"XSEG"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ParameterMismatchError(CheckpointError):
    pass


def encode(config: ModelConfig, state: dict[str, np.ndarray], provenance: str = "") -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, _, shape in layer_specs(config):
        buf = np.asarray(state[name], dtype="<f4").reshape(shape).tobytes()
        table.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"config": config.to_dict(), "provenance": provenance, "params": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], str]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not an XSEG checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    if len(blob) < 12 + hlen:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode())
        config = ModelConfig.from_dict(header["config"])
        table = header["params"]
        provenance = header.get("provenance", "")
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"malformed header: {exc}") from exc

    payload = blob[12 + hlen :]
    state: dict[str, np.ndarray] = {}
    end = 0
    for rec in table:
        name, shape = rec["name"], tuple(rec["shape"])
        if name in state:
            raise CorruptCheckpointError(f"duplicate parameter {name!r}")
        off, nbytes = rec["offset"], rec["nbytes"]
        if nbytes != 4 * int(np.prod(shape)) or off + nbytes > len(payload):
            raise CorruptCheckpointError(f"parameter {name!r}: payload truncated or size mismatch")
        state[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        end = max(end, off + nbytes)
    if end != len(payload):
        raise CorruptCheckpointError(f"{len(payload) - end} trailing payload bytes")

    expected = {name: shape for name, _, shape in layer_specs(config)}
    extra = [n for n in state if n not in expected]
    if extra:
        raise ParameterMismatchError(f"unknown parameter name(s): {', '.join(extra)}")
    missing = [n for n in expected if n not in state]
    if missing:
        raise ParameterMismatchError(f"missing parameter(s): {', '.join(missing)}")
    for n, shape in expected.items():
        if state[n].shape != shape:
            raise ParameterMismatchError(f"{n}: stored shape {state[n].shape}, expected {shape}")
    return config, state, provenance


def save_checkpoint(model: UNet, path, provenance: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model.config, model.state_dict(), provenance))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], str]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path, expected: ModelConfig | None = None) -> UNet:
    config, state, _ = read_checkpoint(path)
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint config {config} != expected {expected}")
    return UNet(config, state)


def quantize(model: UNet) -> UNet:
    """The model as it will be after a save/load round trip."""
    config, state, _ = decode(encode(model.config, model.state_dict()))
    return UNet(config, state)
