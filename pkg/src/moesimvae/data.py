"""Dataset ingestion, batching and checkpoint persistence."""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError, IncompatibleCheckpointError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"MOESIMV1"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: Optional[list[str]] = None
    image_shape: Optional[tuple[int, int]] = None
    scale_min: Optional[np.ndarray] = None
    scale_max: Optional[np.ndarray] = None
    label_names: Optional[list[str]] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise FormatError(f"features must be a 2-D matrix, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise FormatError("features contain non-finite values")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise FormatError("features must be scaled to [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise FormatError(f"{len(self.labels)} labels for {len(self.features)} samples")

    def __len__(self):
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.features[:n], None if self.labels is None else self.labels[:n],
                       self.feature_names, self.image_shape, self.scale_min, self.scale_max,
                       self.label_names)


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int, limit: Optional[int] = None) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header declares {expected}")
    arr = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return arr[:limit] if limit is not None else arr


def load_idx(images_path, labels_path=None, limit: Optional[int] = None) -> Dataset:
    """Read IDX images (optionally gzip-compressed) and labels.

    Images are flattened to ``rows * cols`` features and divided by 255.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, limit)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, limit)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    return Dataset(features, labels, image_shape=(rows, cols))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">" + "I" * 3, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def minmax_scale(values: np.ndarray, lo=None, hi=None):
    """Per-column min-max scaling; zero-range columns map to 0.

    Returns the scaled matrix and the (min, max) used, so that the same
    statistics can be re-applied at inference time (values are clipped).
    """
    values = np.asarray(values, dtype=np.float64)
    lo = values.min(axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = values.max(axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (values - lo) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0), lo, hi


def load_csv(path, label_column: Optional[str] = None, arcsinh_cofactor: Optional[float] = None,
             scale_min=None, scale_max=None, limit: Optional[int] = None) -> Dataset:
    """Read a headed CSV of numeric features (e.g. cytometry markers).

    With ``arcsinh_cofactor`` set, features are transformed by
    ``arcsinh(x / cofactor)`` before min-max scaling. Labels in
    ``label_column`` are mapped to integers in order of first appearance.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise FormatError(f"{path}: label column {label_column!r} not in header")
            label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]
        rows, raw_labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(row[i]) for i in feature_cols])
            except ValueError:
                bad = next(row[i] for i in feature_cols if not _is_float(row[i]))
                raise FormatError(f"{path}: line {line_no}: non-numeric feature value {bad!r}") from None
            if label_idx is not None:
                raw_labels.append(row[label_idx].strip())
            if limit is not None and len(rows) >= limit:
                break
    if not rows:
        raise FormatError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite feature values")
    if arcsinh_cofactor is not None:
        values = np.arcsinh(values / arcsinh_cofactor)
    scaled, lo, hi = minmax_scale(values, scale_min, scale_max)
    labels = label_names = None
    if label_idx is not None:
        mapping: dict[str, int] = {}
        labels = np.array([mapping.setdefault(v, len(mapping)) for v in raw_labels], dtype=np.int64)
        label_names = list(mapping)
    return Dataset(scaled, labels, feature_names=[header[i] for i in feature_cols],
                   scale_min=lo, scale_max=hi, label_names=label_names)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_embedding(path) -> np.ndarray:
    """Headerless CSV of floats, one row per dataset sample."""
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return arr


def batch_iterator(dataset, batch_size: int, seed: int, epoch: int = 0,
                   drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(row_indices, features)`` for one shuffled epoch.

    The permutation depends only on ``(seed, epoch)`` so an interrupted run
    can resume at an epoch boundary without replaying earlier epochs.
    """
    features = dataset.features if isinstance(dataset, Dataset) else np.asarray(dataset)
    n = len(features)
    if not 1 <= batch_size <= n:
        raise ParameterError(f"batch_size must lie in [1, {n}], got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield idx, features[idx]


def file_fingerprint(path) -> dict:
    h = hashlib.sha256()
    path = resolve_path(path)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return {"path": str(path), "sha256": h.hexdigest(), "bytes": os.path.getsize(path)}


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    optimizer_t: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically (temp file + rename).

    Layout, little-endian: 8-byte magic, u32 version, u32 descriptor length,
    JSON descriptor, u32 tensor count, then per tensor: u16 name length,
    name, u8 rank, u32 dims, float32 payload.
    """
    meta = {
        "config": ckpt.config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "optimizer_t": ckpt.optimizer_t,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(_to_jsonable(meta), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4").copy(order="C")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack("<" + "I" * arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            for p in parts:
                f.write(p)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IncompatibleCheckpointError("checkpoint is truncated or has a corrupted length field")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(8) != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpointError(f"{path}: corrupted descriptor") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack("<" + "I" * rank)
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise IncompatibleCheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(config=meta["config"], tensors=tensors, step=meta["step"], epoch=meta["epoch"],
                      optimizer_t=meta["optimizer_t"], rng_state=meta.get("rng_state"),
                      extra=meta.get("extra", {}), version=version)


def make_blobs(n_samples: int = 2000, n_features: int = 20, n_centers: int = 4,
               separation: float = 10.0, seed: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, min-max scaled to [0, 1].

    Centres sit on scaled coordinate axes so every pair is exactly
    ``separation`` standard deviations apart. Blob sizes are balanced.
    """
    if n_centers > n_features:
        raise ParameterError(f"need n_centers <= n_features, got {n_centers} > {n_features}")
    if n_samples < n_centers:
        raise ParameterError(f"need at least one sample per centre, got {n_samples}")
    rng = np.random.default_rng(seed)
    centres = np.zeros((n_centers, n_features))
    centres[np.arange(n_centers), np.arange(n_centers)] = separation / np.sqrt(2.0)
    labels = np.arange(n_samples) % n_centers
    labels = labels[rng.permutation(n_samples)]
    x = centres[labels] + rng.standard_normal((n_samples, n_features))
    scaled, lo, hi = minmax_scale(x)
    return Dataset(scaled, labels, feature_names=[f"x{i}" for i in range(n_features)],
                   scale_min=lo, scale_max=hi)


def load_dataset(cfg, scale_min=None, scale_max=None) -> Dataset:
    """Build the dataset described by a ``DataConfig``.

    ``scale_min``/``scale_max`` re-apply stored training statistics to CSV data.
    """
    cfg.validate()
    if cfg.format == "blobs":
        ds = make_blobs(cfg.n_samples, cfg.n_features, cfg.n_centers, cfg.separation, cfg.data_seed)
        return ds.subset(cfg.limit) if cfg.limit else ds
    path = resolve_path(cfg.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {cfg.path}")
    if cfg.format == "idx":
        labels = resolve_path(cfg.labels_path) if cfg.labels_path else None
        return load_idx(path, labels, limit=cfg.limit)
    return load_csv(path, cfg.label_column, cfg.arcsinh_cofactor, scale_min, scale_max, limit=cfg.limit)


RESOURCE_PREFIX = "resource:"


def resolve_path(path) -> Path:
    """Filesystem path, with ``resource:NAME`` pointing into the bundled data."""
    text = str(path)
    if text.startswith(RESOURCE_PREFIX):
        return Path(str(resources.files("moesimvae") / "resources" / text[len(RESOURCE_PREFIX):]))
    return Path(text)
