"""Binary tensor serialization, dataset directories, and checkpoints.

One tensor record is laid out as::

    magic   4 bytes   b"ITST"
    version u16 LE    currently 1
    dtype   u8        0 = float32, 1 = float64
    rank    u8
    dims    rank x u32 LE
    payload product(dims) values, row-major, little-endian

Records concatenate, so a checkpoint is a u32-length-prefixed JSON header
(config, seed, training step, tensor name order) followed by one record
per tensor. Dataset directories hold one record per split array plus a
JSON manifest naming them. JSON carries the human-facing metadata; the
binary records carry the bulk values, keeping both portable without a
serialization dependency.

All writes go through a temp file and ``os.replace``, so readers never
observe a partially written artifact. Malformed content raises
``UsageError``; genuine I/O failures surface as ``OSError``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict
from typing import BinaryIO

import numpy as np

from .errors import LabelError, UsageError
from .features import Scaler, WindowedDataset
from .model import DECODER_TOKENS, ItstModel, ModelConfig, _param_names, sinusoidal_encoding
from .synth import CHANNELS, CLASS_NAMES, GenConfig
from .tensor import Tensor

__all__ = [
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "MANIFEST_NAME",
]

_MAGIC = b"ITST"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MANIFEST_NAME = "manifest.json"


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    """Append one tensor record to an open binary stream."""
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise UsageError(f"tensor dtype must be float32 or float64, got {array.dtype}")
    if array.ndim > 255:
        raise UsageError(f"tensor rank {array.ndim} does not fit the format")
    if any(d > 0xFFFFFFFF for d in array.shape):
        raise UsageError(f"dimension too large for u32: {array.shape}")
    code = _DTYPE_CODES[array.dtype]
    fh.write(struct.pack("<4sHBB", _MAGIC, _VERSION, code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise UsageError(f"truncated tensor record while reading {what}")
    return data


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one tensor record; the result owns its memory."""
    magic, version, code, rank = struct.unpack("<4sHBB", _read_exact(fh, 8, "header"))
    if magic != _MAGIC:
        raise UsageError(f"bad tensor magic {magic!r}")
    if version != _VERSION:
        raise UsageError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise UsageError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    dtype = _CODE_DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fh, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_tensor(path: str, array: np.ndarray) -> None:
    """Write a single tensor file atomically."""
    buf = io.BytesIO()
    write_tensor(buf, array)
    _atomic_write(path, buf.getvalue())


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        out = read_tensor(fh)
        if fh.read(1):
            raise UsageError(f"trailing bytes after tensor record in {path}")
    return out


def _split_entry(prefix: str, dataset: WindowedDataset) -> dict:
    return {
        "data": f"{prefix}_data.itst",
        "labels": f"{prefix}_labels.itst",
        "count": len(dataset),
    }


def save_dataset(out_dir: str, train: WindowedDataset, test: WindowedDataset,
                 config: GenConfig) -> dict:
    """Write both splits plus the manifest; returns the manifest dict.

    Window data is stored as float32 (the sensor dynamic range does not
    need more), labels as float64, which holds small integers exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "generator": asdict(config),
        "classes": list(CLASS_NAMES),
        "channels": [asdict(spec) for spec in CHANNELS],
        "splits": {
            "train": _split_entry("train", train),
            "test": _split_entry("test", test),
        },
    }
    for name, split in (("train", train), ("test", test)):
        entry = manifest["splits"][name]
        save_tensor(os.path.join(out_dir, entry["data"]),
                    split.data.astype(np.float32))
        save_tensor(os.path.join(out_dir, entry["labels"]),
                    split.labels.astype(np.float64))
    _atomic_write(os.path.join(out_dir, MANIFEST_NAME),
                  (json.dumps(manifest, indent=2) + "\n").encode())
    return manifest


def _load_split(data_dir: str, entry: dict, window: int, channels: int,
                what: str) -> WindowedDataset:
    for key in ("data", "labels"):
        if not os.path.isfile(os.path.join(data_dir, entry[key])):
            raise UsageError(f"dataset manifest references missing file {entry[key]}")
    data = load_tensor(os.path.join(data_dir, entry["data"])).astype(np.float64)
    labels_raw = load_tensor(os.path.join(data_dir, entry["labels"]))
    if data.shape != (entry["count"], window, channels):
        raise UsageError(
            f"{what} data shape {data.shape} does not match manifest "
            f"({entry['count']}, {window}, {channels})"
        )
    if labels_raw.shape != (entry["count"],):
        raise UsageError(f"{what} labels shape {labels_raw.shape} does not match manifest")
    labels = labels_raw.astype(np.int64)
    if not np.array_equal(labels_raw, labels):
        raise LabelError(f"{what} labels are not integral")
    return WindowedDataset(data=data, labels=labels)


def load_dataset(data_dir: str) -> tuple[WindowedDataset, WindowedDataset, dict]:
    """Load a dataset directory back into memory, shape-checking it."""
    manifest_path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise UsageError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path, "rb") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"dataset manifest is not valid JSON: {exc}") from exc
    try:
        window = int(manifest["generator"]["window"])
        channels = len(manifest["channels"])
        splits = manifest["splits"]
        train = _load_split(data_dir, splits["train"], window, channels, "train")
        test = _load_split(data_dir, splits["test"], window, channels, "test")
    except KeyError as exc:
        raise UsageError(f"dataset manifest is missing field {exc}") from exc
    max_label = int(max(train.labels.max(), test.labels.max()))
    if max_label >= len(manifest["classes"]):
        raise LabelError(f"label {max_label} outside the manifest class table")
    return train, test, manifest


def save_checkpoint(path: str, model: ItstModel, scaler: Scaler, step: int) -> None:
    """Serialize a trained model plus its scaler to one file."""
    names = list(model.params)
    header = {
        "format_version": 1,
        "model": asdict(model.config),
        "seed": model.seed,
        "step": step,
        "tensors": names + ["scaler.mean", "scaler.scale"],
    }
    blob = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in names:
        write_tensor(buf, model.params[name].data)
    write_tensor(buf, np.asarray(scaler.mean, dtype=np.float64))
    write_tensor(buf, np.asarray(scaler.scale, dtype=np.float64))
    _atomic_write(path, buf.getvalue())


def load_checkpoint(path: str) -> tuple[ItstModel, Scaler, int]:
    """Rebuild (model, scaler, step) from a checkpoint file."""
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "checkpoint header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "checkpoint header"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"checkpoint header is not valid JSON: {exc}") from exc
        try:
            cfg_dict = dict(header["model"])
            cfg_dict["enabled_paths"] = tuple(cfg_dict["enabled_paths"])
            config = ModelConfig(**cfg_dict)
            seed = int(header["seed"])
            step = int(header["step"])
            stored = list(header["tensors"])
        except (KeyError, TypeError) as exc:
            raise UsageError(f"checkpoint header is malformed: {exc}") from exc
        expected = [name for name, _, _ in _param_names(config)] + ["scaler.mean", "scaler.scale"]
        if stored != expected:
            raise UsageError(
                f"checkpoint tensor list does not match config "
                f"({len(stored)} stored vs {len(expected)} expected)"
            )
        arrays = {}
        for name in stored:
            arrays[name] = read_tensor(fh).astype(np.float64)
        if fh.read(1):
            raise UsageError(f"trailing bytes after checkpoint tensors in {path}")

    params: dict[str, Tensor] = {}
    for name, shape, _ in _param_names(config):
        if arrays[name].shape != shape:
            raise UsageError(f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                             f"expected {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    scaler = Scaler(mean=arrays["scaler.mean"], scale=arrays["scaler.scale"])
    max_tokens = max(config.window, config.features, DECODER_TOKENS)
    pos = sinusoidal_encoding(max_tokens, config.d_model)
    model = ItstModel(config=config, params=params, seed=seed, pos=pos)
    return model, scaler, step
