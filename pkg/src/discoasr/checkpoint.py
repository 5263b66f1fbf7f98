"""Binary checkpoint container with bit-exact round trips.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated raw little-endian array payloads. The header
indexes every array by name with dtype/shape/offset, and carries the resolved
config, its digest, the vocabulary, RNG bookkeeping, and optimizer moments.

Two kinds share the container: "full" model checkpoints and "delta" speaker
checkpoints that store only the finetuned parameter subset plus the plan that
produced it; a delta refuses to apply over a base with a different digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "Checkpoint",
    "DeltaCheckpoint",
    "config_digest",
    "save_checkpoint",
    "load_checkpoint",
    "save_delta",
    "load_delta",
    "apply_delta",
]

MAGIC = b"DSCKPT01"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt container, version mismatch, or digest mismatch."""


def config_digest(config: dict) -> str:
    """sha256 of the canonical JSON encoding of a resolved config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    step: int
    vocab: list[str]
    params: dict[str, np.ndarray]
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


@dataclass
class DeltaCheckpoint:
    base_digest: str
    plan: dict
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def _collect_arrays(groups: dict[str, dict[str, np.ndarray]]):
    """Flatten namespaced array groups into an index plus a payload byte list."""
    index = []
    blobs = []
    offset = 0
    for ns in sorted(groups):
        for name in sorted(groups[ns]):
            arr = np.ascontiguousarray(groups[ns][name])
            if arr.dtype == np.float32:
                dt = "<f4"
            elif arr.dtype == np.float64:
                dt = "<f8"
            else:
                raise CheckpointError(f"unsupported array dtype {arr.dtype} for {ns}/{name}")
            raw = arr.astype(dt, copy=False).tobytes()
            index.append([ns, name, dt, list(arr.shape), offset, len(raw)])
            blobs.append(raw)
            offset += len(raw)
    return index, blobs


def _write_container(path: str | Path, header: dict, blobs: list[bytes]) -> None:
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(payload)).tobytes())
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def _read_container(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=len(MAGIC))[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hlen_off = len(MAGIC) + 4
    hlen = int(np.frombuffer(data, dtype="<u8", count=1, offset=hlen_off)[0])
    hstart = hlen_off + 8
    header = json.loads(data[hstart : hstart + hlen].decode("utf-8"))
    return header, data[hstart + hlen :]


def _unpack_arrays(index: list, payload: bytes) -> dict[str, dict[str, np.ndarray]]:
    groups: dict[str, dict[str, np.ndarray]] = {}
    for ns, name, dt, shape, offset, nbytes in index:
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)) if shape else 1,
                            offset=offset)
        arr = arr.reshape(shape).copy()
        groups.setdefault(ns, {})[name] = arr
    return groups


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    groups = {"params": ckpt.params}
    opt_meta = None
    if ckpt.optimizer is not None:
        groups["opt_m"] = ckpt.optimizer["m"]
        groups["opt_v"] = ckpt.optimizer["v"]
        opt_meta = {"step": ckpt.optimizer["step"]}
    index, blobs = _collect_arrays(groups)
    header = {
        "kind": "full",
        "config": ckpt.config,
        "config_digest": ckpt.digest,
        "step": ckpt.step,
        "vocab": ckpt.vocab,
        "rng": ckpt.rng,
        "optimizer": opt_meta,
        "extra": ckpt.extra,
        "arrays": index,
    }
    _write_container(path, header, blobs)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, payload = _read_container(path)
    if header.get("kind") != "full":
        raise CheckpointError(f"{path}: expected a full checkpoint, got {header.get('kind')!r}")
    groups = _unpack_arrays(header["arrays"], payload)
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch (corrupt header)")
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {
            "step": header["optimizer"]["step"],
            "m": groups.get("opt_m", {}),
            "v": groups.get("opt_v", {}),
        }
    return Checkpoint(
        config=header["config"],
        step=header["step"],
        vocab=header["vocab"],
        params=groups.get("params", {}),
        optimizer=optimizer,
        rng=header["rng"],
        extra=header["extra"],
    )


def save_delta(path: str | Path, delta: DeltaCheckpoint) -> None:
    index, blobs = _collect_arrays({"delta": delta.arrays})
    header = {
        "kind": "delta",
        "base_digest": delta.base_digest,
        "plan": delta.plan,
        "extra": delta.extra,
        "arrays": index,
    }
    _write_container(path, header, blobs)


def load_delta(path: str | Path) -> DeltaCheckpoint:
    header, payload = _read_container(path)
    if header.get("kind") != "delta":
        raise CheckpointError(f"{path}: expected a delta checkpoint, got {header.get('kind')!r}")
    groups = _unpack_arrays(header["arrays"], payload)
    return DeltaCheckpoint(
        base_digest=header["base_digest"],
        plan=header["plan"],
        arrays=groups.get("delta", {}),
        extra=header["extra"],
    )


def apply_delta(base: Checkpoint, delta: DeltaCheckpoint) -> dict[str, np.ndarray]:
    """Overlay a speaker delta on its base checkpoint's parameters."""
    if delta.base_digest != base.digest:
        raise CheckpointError(
            f"delta was finetuned from base {delta.base_digest[:12]}..., "
            f"refusing to apply over {base.digest[:12]}..."
        )
    params = {name: arr.copy() for name, arr in base.params.items()}
    for name, arr in delta.arrays.items():
        if name not in params:
            raise CheckpointError(f"delta parameter {name!r} does not exist in the base model")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"delta parameter {name!r} shape mismatch")
        params[name] = arr.copy()
    return params
