"""Binary container for checkpoints and datasets.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then a payload of little-endian float32 tensors (row-major) concatenated in
manifest order. ``byte_offset`` values are relative to the payload start.
Datasets may additionally declare int32 blocks with ``"dtype": "int32"``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .model import ModelConfig, ModelParams

CKPT_MAGIC = b"DCTCKPT1"
DATA_MAGIC = b"DCTDATA1"
_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


class CheckpointError(Exception):
    """Unreadable, truncated or inconsistent container file."""


def _pack(magic: bytes, meta: dict, arrays: list[tuple[str, np.ndarray, str]]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr, dtype in arrays:
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "shape": list(np.shape(arr)), "byte_offset": offset}
        if dtype != "float32":
            entry["dtype"] = dtype
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({**meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def _unpack(raw: bytes, magic: bytes, source: str) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != magic:
        raise CheckpointError(f"{source}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{source}: corrupt container, header length missing")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{source}: corrupt container, header truncated")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    payload = memoryview(raw)[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in header.get("tensors", []):
        name = entry.get("name", "?")
        dtype = _DTYPES.get(entry.get("dtype", "float32"))
        if dtype is None:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["byte_offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start != expected_end:
            raise CheckpointError(f"{source}: tensor {name!r} offset {start} does not follow previous "
                                  f"tensor (expected {expected_end})")
        if start + nbytes > len(payload):
            raise CheckpointError(f"{source}: corrupt payload, tensor {name!r} with shape {list(shape)} "
                                  f"needs {nbytes} bytes at offset {start}, payload has {len(payload)}")
        arrays[name] = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(shape).copy()
        expected_end = start + nbytes
    if expected_end != len(payload):
        last = header["tensors"][-1]["name"] if header.get("tensors") else "<none>"
        raise CheckpointError(f"{source}: payload length {len(payload)} disagrees with manifest "
                              f"(ends at {expected_end} after tensor {last!r})")
    return header, arrays


def checkpoint_bytes(params: ModelParams) -> bytes:
    meta = {"config": params.config.to_dict(), "format": 1}
    return _pack(CKPT_MAGIC, meta, [(n, t.data, "float32") for n, t in params.items()])


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    return path


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    header, arrays = _unpack(raw, CKPT_MAGIC, str(path))
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config in header ({exc})") from exc
    tensors = {n: Tensor(a, name=n, dtype=np.float32) for n, a in arrays.items()}
    params = ModelParams(config, tensors)
    reference = _expected_shapes(config, params.conditioner_kind)
    for name, shape in reference.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing from checkpoint")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {list(tensors[name].shape)}, "
                                  f"config implies {list(shape)}")
    return params


def _expected_shapes(config: ModelConfig, conditioner_kind: str | None) -> dict[str, tuple]:
    from .model import init_params

    ref = init_params(config, 0)
    if conditioner_kind == "static":
        ref = ref.use_static_conditioners()
    return {n: t.shape for n, t in ref.items()}


def save_dataset(dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"num_classes": int(dataset.num_classes), "split": dataset.split, "format": 1}
    arrays = [("images", dataset.images, "float32"), ("labels", dataset.labels, "int32")]
    path.write_bytes(_pack(DATA_MAGIC, meta, arrays))
    return path


def load_dataset(path):
    from .data import SyntheticDataset

    path = Path(path)
    header, arrays = _unpack(path.read_bytes(), DATA_MAGIC, str(path))
    for name in ("images", "labels"):
        if name not in arrays:
            raise CheckpointError(f"{path}: dataset block {name!r} missing")
    return SyntheticDataset(arrays["images"], arrays["labels"].astype(np.int64),
                            int(header["num_classes"]), header.get("split", "test"))
