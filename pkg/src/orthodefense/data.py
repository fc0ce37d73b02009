"""Datasets, checkpoints and config files.

File formats
------------
IDX
    Big-endian.  Images: magic ``0x00000803`` then count, rows, cols (u32)
    then unsigned bytes.  Labels: magic ``0x00000801`` then count then bytes.
CSV dataset
    Header ``label,p0,p1,...``; one flattened image per row with pixel
    values in [0, 1].
ORTH checkpoint
    Little-endian, no padding::

        b"ORTH"  u32 version (=1)
        u32 len  arch descriptor (UTF-8)
        u32 tensor count
          per tensor: u32 len name, u8 dtype (0=f64, 1=f32), u8 rank,
                      rank * u32 extents, raw row-major data
        u32 len  metadata (UTF-8 ``key=value`` lines)
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import ArchitectureError, Model

__all__ = [
    "Dataset",
    "DataFormatError",
    "IDXError",
    "IDXMagicError",
    "IDXTruncatedError",
    "IDXCountMismatchError",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "ConfigError",
    "load_idx",
    "parse_idx",
    "write_idx",
    "load_csv",
    "write_csv",
    "gen_synthetic",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "parse_checkpoint",
    "file_hash",
    "Config",
    "CONFIG_SCHEMA",
    "parse_config",
    "load_config",
]


class DataFormatError(ValueError):
    """Base class for malformed input files."""


class IDXError(DataFormatError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


class CheckpointError(DataFormatError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split_id: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split_id: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes,
                       self.split_id if split_id is None else split_id)

    def split(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded random train/validation split."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return self.subset(order[n_val:], "train"), self.subset(order[:n_val], "val")


# ---------------------------------------------------------------------------
# IDX


def parse_idx(image_bytes: bytes, label_bytes: bytes, num_classes: int | None = None) -> Dataset:
    if len(image_bytes) < 16:
        raise IDXTruncatedError("image file shorter than its 16-byte header")
    magic, n, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != 0x00000803:
        raise IDXMagicError(f"image file magic {magic:#010x}, expected 0x00000803")
    if len(label_bytes) < 8:
        raise IDXTruncatedError("label file shorter than its 8-byte header")
    lmagic, n_labels = struct.unpack(">II", label_bytes[:8])
    if lmagic != 0x00000801:
        raise IDXMagicError(f"label file magic {lmagic:#010x}, expected 0x00000801")
    if n != n_labels:
        raise IDXCountMismatchError(f"{n} images but {n_labels} labels")
    need = 16 + n * rows * cols
    if len(image_bytes) != need:
        raise IDXTruncatedError(f"image file has {len(image_bytes)} bytes, header implies {need}")
    if len(label_bytes) != 8 + n:
        raise IDXTruncatedError(f"label file has {len(label_bytes)} bytes, header implies {8 + n}")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 2)
    k = max(k, 2)
    if n and labels.max() >= k:
        raise IDXError(f"label {labels.max()} out of range for {k} classes")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, k)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled into [0, 1]."""
    ds = parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes)
    ds.split_id = Path(images_path).name
    return ds


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX (pixels rounded to bytes)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX holds single-channel images only")
    pixels = np.round(dataset.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", 0x00000801, n) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, image_shape=None, num_classes: int | None = None) -> Dataset:
    """Read ``label,p0,p1,...`` rows.  Without ``image_shape`` images are square, one channel."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty CSV file") from None
        if not header or header[0] != "label" or header[1:] != [f"p{i}" for i in range(len(header) - 1)]:
            raise DataFormatError(f"{path}: header must be label,p0,p1,...")
        d = len(header) - 1
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if image_shape is None:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise DataFormatError(f"{path}: {d} pixels is not a square image; pass image_shape")
        image_shape = (1, side, side)
    images = np.asarray(rows, dtype=np.float64).reshape((len(rows), *image_shape))
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1 if len(labels) else 2, 2)
    try:
        return Dataset(images, labels, k, Path(path).name)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_csv(dataset: Dataset, path) -> None:
    flat = dataset.images.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"p{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_field(rng, hw, channels):
    """Zero-mean, unit-RMS random field made of a few low-frequency cosines."""
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    field = np.zeros((channels, hw, hw))
    for c in range(channels):
        for _ in range(4):
            fx, fy = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field[c] += rng.normal() * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        field[c] += rng.normal(size=(hw, hw)) * 0.5
    field -= field.mean()
    return field / np.sqrt((field ** 2).mean())


def gen_synthetic(classes: int, n: int, hw: int, seed: int, channels: int = 1,
                  noise: float = 0.15, contrast: float = 0.1) -> Dataset:
    """Seeded K-class template images plus Gaussian pixel noise.

    Class ``k`` has template ``0.5 + contrast * field_k`` with ``field_k`` a
    unit-RMS random pattern; every image is its class template plus
    N(0, noise^2) per pixel, clipped to [0, 1].  Class counts differ by at
    most one (earlier classes take the remainder).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < classes:
        raise ValueError("need at least one image per class")
    rng = np.random.default_rng(seed)
    templates = np.stack([0.5 + contrast * _smooth_field(rng, hw, channels) for _ in range(classes)])
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = templates[labels] + rng.normal(scale=noise, size=(n, channels, hw, hw))
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"ORTH"
_VERSION = 1


def checkpoint_bytes(model: Model, meta: Mapping[str, object] | None = None, dtype: int = 0) -> bytes:
    if dtype not in (0, 1):
        raise ValueError("dtype must be 0 (float64) or 1 (float32)")
    np_dtype = "<f8" if dtype == 0 else "<f4"
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", _VERSION))
    _write_text(out, model.descriptor)
    names = model.param_names()
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        _write_text(out, name)
        out.write(struct.pack("<BB", dtype, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    meta = meta or {}
    _write_text(out, "".join(f"{k}={meta[k]}\n" for k in sorted(meta)))
    return out.getvalue()


def _write_text(out, text: str):
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends inside {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        raw = self.take(self.u32(what + " length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} is not valid UTF-8") from None


def parse_checkpoint(buf: bytes) -> tuple[Model, dict[str, str]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointMagicError(f"magic {magic!r}, expected {_MAGIC!r}")
    version = r.u32("version")
    if version != _VERSION:
        raise CheckpointVersionError(f"version {version}, expected {_VERSION}")
    descriptor = r.text("arch descriptor")
    count = r.u32("tensor count")
    params = {}
    for _ in range(count):
        name = r.text("tensor name")
        dtype, rank = struct.unpack("<BB", r.take(2, f"{name} header"))
        if dtype not in (0, 1):
            raise CheckpointError(f"{name}: unknown dtype byte {dtype}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} extents"))
        width = 8 if dtype == 0 else 4
        nbytes = math.prod(shape) * width
        raw = r.take(nbytes, f"{name} data")
        arr = np.frombuffer(raw, dtype="<f8" if dtype == 0 else "<f4").astype(np.float64).reshape(shape)
        if name in params:
            raise CheckpointShapeError(f"tensor {name} appears twice")
        params[name] = arr
    meta_text = r.text("metadata")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
    meta = {}
    for line in meta_text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"metadata line {line!r} is not key=value")
        meta[key] = value
    try:
        model = Model.from_descriptor(descriptor, params)
    except (ArchitectureError, ValueError) as exc:
        raise CheckpointShapeError(f"tensor table does not match arch descriptor: {exc}") from None
    return model, meta


def save_checkpoint(model: Model, meta: Mapping[str, object] | None, path, dtype: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta, dtype))


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    return parse_checkpoint(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _specs(text: str) -> tuple[str, ...]:
    return tuple(text.split())


def _penalty(text: str) -> str:
    text = text.strip()
    if text not in ("abs", "signed", "square"):
        raise ValueError(f"penalty must be abs, signed or square, not {text!r}")
    return text


# key -> (parser, default); None default means "no default"
CONFIG_SCHEMA: dict[str, tuple] = {
    "dataset.kind": (str, "synthetic"),
    "dataset.path": (str, None),
    "dataset.labels_path": (str, None),
    "dataset.val_fraction": (float, 0.25),
    "dataset.split_seed": (int, 0),
    "dataset.synth.classes": (int, 4),
    "dataset.synth.n": (int, 4000),
    "dataset.synth.hw": (int, 24),
    "dataset.synth.seed": (int, 0),
    "dataset.synth.contrast": (float, 0.05),
    "model.arch": (str, "mlp"),
    "model.hidden": (int, 128),
    "train.lr": (float, 0.002),
    "train.momentum": (float, 0.9),
    "train.batch": (int, 64),
    "train.lambda": (float, 0.0),
    "train.penalty": (_penalty, "square"),
    "train.max_epochs": (int, 100),
    "train.epochs_check": (int, 20),
    "train.seed": (int, 0),
    "eval.n_samples": (int, 500),
    "eval.eps_grid": (_floats, (0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.08)),
    "eval.attacks": (_words, ("fgsm", "ifgsm", "mifgsm", "pgd")),
    "eval.iters": (int, 10),
    "eval.mu": (float, 1.0),
    "eval.random_start": (_bool, True),
    "eval.seed": (int, 0),
    "eval.defenses": (_specs, ()),  # whitespace-separated, e.g. "jpeg:quality=90 bit:depth=4"
    "eval.lambdas": (_floats, (0.0, 5.0, 30.0, 100.0)),
    "eval.workers": (int, 1),
    "reference.checkpoint": (str, None),
}


@dataclass
class Config:
    """Resolved key-value configuration (defaults merged with file and overrides)."""

    values: dict[str, object] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def set(self, key: str, text: str) -> None:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            self.values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        self.raw[key] = text.strip()

    def dumps(self) -> str:
        """Canonical text form: every key, sorted, unset keys omitted."""
        lines = []
        for key in sorted(CONFIG_SCHEMA):
            if key in self.raw:
                lines.append(f"{key} = {self.raw[key]}".rstrip())
            else:
                default = CONFIG_SCHEMA[key][1]
                if default is None:
                    continue
                lines.append(f"{key} = {_render(default)}".rstrip())
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` starts a comment).  Unknown keys are rejected."""
    cfg = Config({k: default for k, (_, default) in CONFIG_SCHEMA.items()})
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg


def load_config(path, overrides: Mapping[str, str] | None = None) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)
