"""Versioned binary checkpoints.

Layout (all integers little-endian unsigned 32-bit):

    magic  b"RMX1"
    version
    header_len
    header JSON (utf-8, header_len bytes)
    payload: concatenated little-endian float32 arrays

The header records array names, shapes and byte offsets, a CRC-32 of the
payload, the config snapshot, fitted thresholds, the component manifest
(which modality bundles the file carries), and optional RNG bookkeeping.
A length or checksum mismatch refuses the whole file; there is no
partial load.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AvailabilityError, CheckpointError

MAGIC = b"RMX1"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""

    config: dict
    arrays: dict[str, np.ndarray]
    components: tuple[str, ...] = ()
    thresholds: Optional[dict[str, float]] = None
    rng_state: Optional[dict] = None
    version: int = VERSION
    extra: dict = field(default_factory=dict)

    def require(self, component: str) -> None:
        if component not in self.components:
            have = ", ".join(self.components) or "none"
            raise AvailabilityError(
                f"checkpoint does not carry component {component!r} "
                f"(available: {have})")

    def array(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no array {name!r}") \
                from None


def _as_array(value) -> np.ndarray:
    data = getattr(value, "data", value)
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        raise CheckpointError(
            f"checkpoint payload is float32; got {arr.dtype} "
            f"(cast explicitly if the loss of precision is intended)")
    return arr.astype("<f4", copy=False)


def save_checkpoint(path, arrays: dict, config: dict,
                    components=(), thresholds=None, rng_state=None,
                    extra: Optional[dict] = None) -> None:
    """Write a checkpoint. ``arrays`` maps names to float32 ndarrays or
    tensors carrying a ``.data`` ndarray."""
    names = sorted(arrays)
    blobs, entries, offset = [], [], 0
    for name in names:
        arr = _as_array(arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "arrays": entries,
        "payload_len": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "config": config,
        "components": list(components),
        "thresholds": thresholds,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(raw) < len(MAGIC) + 2 * _U32.size:
        raise CheckpointError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file "
                              f"(bad magic {raw[:4]!r})")
    version = _U32.unpack_from(raw, 4)[0]
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported "
            f"(this build reads version {VERSION})")
    head_len = _U32.unpack_from(raw, 8)[0]
    head_start = len(MAGIC) + 2 * _U32.size
    head_end = head_start + head_len
    if len(raw) < head_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[head_start:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None

    payload = raw[head_end:]
    expect_len = header.get("payload_len")
    if len(payload) != expect_len:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} bytes, "
            f"header promises {expect_len})")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start:start + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: array {entry['name']!r} extends past payload")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32, copy=True)

    return Checkpoint(
        config=header.get("config", {}),
        arrays=arrays,
        components=tuple(header.get("components", ())),
        thresholds=header.get("thresholds"),
        rng_state=header.get("rng_state"),
        version=version,
        extra=header.get("extra", {}),
    )


def restore_into(checkpoint: Checkpoint, params: dict) -> None:
    """Copy checkpoint arrays into existing parameter tensors in place.
    Every parameter must have a matching array of the same shape."""
    for name, tensor in params.items():
        arr = checkpoint.array(name)
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise CheckpointError(
                f"array {name!r} has shape {tuple(arr.shape)}, parameter "
                f"expects {tuple(tensor.data.shape)}")
        tensor.data[...] = arr
