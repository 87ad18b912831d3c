"""Gridded fields, normalization statistics and the ``EDMT`` tensor file format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

UNITS = ("kelvin", "normalized", "latent", "dimensionless")

MAGIC = b"EDMT"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sHBB")


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class TensorFormatError(ValueError):
    """Raised for malformed ``EDMT`` files."""


@dataclass(frozen=True)
class Field:
    """A single field ``(C, H, W)`` or a batch ``(N, ..., C, H, W)`` tagged with units."""

    values: np.ndarray
    units: str = "normalized"

    def __post_init__(self):
        if self.units not in UNITS:
            raise ContractError(f"unknown units tag {self.units!r}")
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim < 3:
            raise ContractError(f"field needs at least (C, H, W) dims, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class NormStats:
    """Mean and standard deviation in kelvin.

    Scalars for single-space data; arrays of length ``channels`` for latent
    fields whose channels carry different scales.
    """

    mean: float | np.ndarray
    std: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0) or not np.all(np.isfinite(self.std)):
            raise ContractError(f"std must be strictly positive, got {self.std}")

    def _broadcast(self, values: np.ndarray):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim == 1:
            # per-channel: align with the channel axis (-3)
            mean = mean[:, None, None]
            std = std[:, None, None]
        return mean, std

    def to_dict(self) -> dict:
        def plain(v):
            return np.asarray(v).tolist() if np.ndim(v) else float(v)

        return {"mean": plain(self.mean), "std": plain(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        mean, std = d["mean"], d["std"]
        if isinstance(mean, list):
            return cls(np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))
        return cls(float(mean), float(std))


@dataclass
class DatasetManifest:
    count: int
    field_shape: list[int]
    units: str
    stats: NormStats
    split: str
    source: str
    sequence_length: int = 1
    tensor_file: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise ContractError("manifest count must be >= 1")
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"bad split tag {self.split!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stats"] = self.stats.to_dict()
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d["stats"] = NormStats.from_dict(d["stats"])
        return cls(**d)


def normalize(f: Field, s: NormStats) -> Field:
    if f.units != "kelvin":
        raise ContractError(f"normalize expects kelvin, got {f.units}")
    mean, std = s._broadcast(f.values)
    return Field(((f.values - mean) / std).astype(np.float32), "normalized")


def denormalize(f: Field, s: NormStats) -> Field:
    if f.units != "normalized":
        raise ContractError(f"denormalize expects normalized, got {f.units}")
    mean, std = s._broadcast(f.values)
    return Field((f.values * std + mean).astype(np.float32), "kelvin")


def compute_stats(train: Sequence[Field], per_channel: bool = False) -> NormStats:
    """Pooled population mean/std over every pixel of every field.

    Two passes in float64. With ``per_channel`` the pooling runs separately for
    each channel (used for latent spaces).
    """
    if len(train) == 0:
        raise ContractError("compute_stats needs at least one field")
    if any(f.units not in ("kelvin", "latent") for f in train):
        raise ContractError("compute_stats expects kelvin (or latent) fields")
    axis = None
    if per_channel:
        arrays = [np.moveaxis(f.values.reshape(-1, *f.values.shape[-3:]), 1, 0).reshape(f.channels, -1) for f in train]
        data = np.concatenate(arrays, axis=1).astype(np.float64)
        axis = 1
    else:
        data = np.concatenate([f.values.ravel() for f in train]).astype(np.float64)
    mean = data.mean(axis=axis)
    var = ((data - (mean[:, None] if per_channel else mean)) ** 2).mean(axis=axis)
    if np.any(var <= 0):
        raise ContractError("zero variance: degenerate dataset")
    if per_channel:
        return NormStats(mean, np.sqrt(var))
    return NormStats(float(mean), float(np.sqrt(var)))


def write_tensor_file(path: str | Path, data) -> None:
    arr = data.values if isinstance(data, Field) else np.asarray(data)
    if not 1 <= arr.ndim <= 4:
        raise TensorFormatError(f"rank must be 1-4, got {arr.ndim}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("refusing to write non-finite values")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + dims + arr.tobytes())


def read_tensor_file(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if not 1 <= rank <= 4:
        raise TensorFormatError(f"rank must be 1-4, got {rank}")
    offset = _HEADER.size + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, _HEADER.size)
    n = int(np.prod(dims))
    if len(raw) - offset != 4 * n:
        raise TensorFormatError(f"payload has {len(raw) - offset} bytes, expected {4 * n}")
    arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("payload contains non-finite values")
    return arr
