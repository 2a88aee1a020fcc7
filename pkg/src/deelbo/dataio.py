"""Datasets, synthetic tasks, checkpoints and result records."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from deelbo.errors import CheckpointError, DataFormatError
from deelbo.nnet import Batch, ModelSpec

CHECKPOINT_MAGIC = b"DEEL"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DataFormatError(f"inconsistent shapes X={self.X.shape}, y={self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self):
        return self.X.shape[1]

    def batch(self):
        return Batch(self.X, self.y)

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.mean, self.std)

    def class_counts(self):
        return np.bincount(self.y, minlength=self.num_classes)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()


def fit_normalization(data):
    """Per-feature mean and std of ``data`` (std floored at 1 for constant features)."""
    mean = data.X.mean(axis=0)
    std = data.X.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return mean, std


def normalize(data, mean, std):
    return Dataset((data.X - mean) / std, data.y.copy(), data.num_classes, mean, std)


def concat(*parts):
    C = parts[0].num_classes
    return Dataset(
        np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]), C
    )


def load_csv(path, num_classes=None):
    """Read ``f0,...,f{P-1},label`` rows. Labels must lie in ``[0, num_classes)``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        P = len(header) - 1
        expected = [f"f{i}" for i in range(P)] + ["label"]
        if P < 1 or [h.strip() for h in header] != expected:
            raise DataFormatError(f"{path}:1: header must be f0,...,f{{P-1}},label")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != P + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {P + 1} cells, got {len(row)}")
            try:
                feats = [float(c) for c in row[:P]]
                label = int(row[P])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataFormatError(f"{path}:{lineno}: label {label} out of range")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    C = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(np.array(rows), np.array(labels), C)


def save_csv(path, data):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.input_dim)] + ["label"])
        for x, label in zip(data.X, data.y):
            writer.writerow([repr(float(v)) for v in x] + [int(label)])


def balanced_subsample(data, n_per_class, seed):
    """Exactly ``n_per_class`` examples of every class, in shuffled order."""
    if n_per_class < 0:
        raise DataFormatError(f"n_per_class must be >= 0, got {n_per_class}")
    if n_per_class == 0:
        warnings.warn("balanced_subsample with n_per_class=0 returns an empty dataset", stacklevel=2)
    rng = np.random.default_rng(seed)
    counts = data.class_counts()
    picked = []
    for c in range(data.num_classes):
        if counts[c] < n_per_class:
            raise DataFormatError(
                f"class {c} has {counts[c]} examples, fewer than the {n_per_class} requested"
            )
        idx = np.flatnonzero(data.y == c)
        picked.append(rng.choice(idx, size=n_per_class, replace=False))
    idx = np.concatenate(picked) if picked else np.array([], dtype=np.int64)
    return data.subset(rng.permutation(idx))


def make_synthetic(num_classes, input_dim, n, separation, seed):
    """Balanced isotropic Gaussian clusters with centers at distance ``separation``."""
    if num_classes < 2:
        raise DataFormatError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = separation * dirs
    y = rng.permutation(np.arange(n) % num_classes)
    X = centers[y] + rng.standard_normal((n, input_dim))
    return Dataset(X, y, num_classes)


@dataclass
class TransferTask:
    source: Dataset
    target_train: Dataset
    target_test: Dataset
    info: dict = field(default_factory=dict)


def make_transfer_task(
    num_classes=4,
    input_dim=20,
    latent_dim=4,
    clusters_per_class=2,
    n_source=2000,
    n_target_per_class=25,
    n_test=2000,
    separation=2.5,
    shift=0.3,
    noise=0.6,
    seed=0,
):
    """Source and shifted target tasks sharing a clustered latent structure.

    Points come from ``num_classes * clusters_per_class`` clusters in a
    ``latent_dim`` subspace, embedded in ``input_dim`` dimensions with
    isotropic noise everywhere. The source task labels every cluster
    separately; the target task perturbs the cluster centers by ``shift``
    and groups them ``clusters_per_class`` at a time under a random pairing,
    so a backbone that separates source clusters makes the target task
    nearly linear.
    """
    rng = np.random.default_rng(seed)
    n_clusters = num_classes * clusters_per_class
    basis, _ = np.linalg.qr(rng.standard_normal((input_dim, latent_dim)))
    centers = separation * rng.standard_normal((n_clusters, latent_dim))
    target_centers = centers + shift * rng.standard_normal(centers.shape)
    grouping = rng.permutation(n_clusters) % num_classes

    def draw(centers_, cluster_ids):
        latent = centers_[cluster_ids] + rng.standard_normal((len(cluster_ids), latent_dim))
        return latent @ basis.T + noise * rng.standard_normal((len(cluster_ids), input_dim))

    src_ids = rng.permutation(np.arange(n_source) % n_clusters)
    source = Dataset(draw(centers, src_ids), src_ids, n_clusters)

    def target(n_per_class):
        ids = []
        for c in range(num_classes):
            members = np.flatnonzero(grouping == c)
            ids.append(rng.choice(members, size=n_per_class))
        ids = rng.permutation(np.concatenate(ids))
        return Dataset(draw(target_centers, ids), grouping[ids], num_classes)

    train = target(n_target_per_class)
    test = target(max(1, n_test // num_classes))
    return TransferTask(source, train, test, {"grouping": grouping.tolist(), "seed": seed})


@dataclass
class Checkpoint:
    """Named float64/int64 arrays plus scalars, tied to a :class:`ModelSpec`."""

    spec: ModelSpec | None = None
    arrays: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def require(self, name):
        if name not in self.arrays:
            raise CheckpointError(f"checkpoint is missing required array {name!r}")
        return self.arrays[name]

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.spec, self.version) != (other.spec, other.version):
            return False
        if self.arrays.keys() != other.arrays.keys() or self.scalars.keys() != other.scalars.keys():
            return False
        for k, v in self.arrays.items():
            o = other.arrays[k]
            if v.dtype != o.dtype or v.shape != o.shape or v.tobytes() != o.tobytes():
                return False
        return all(
            np.float64(v).tobytes() == np.float64(other.scalars[k]).tobytes()
            for k, v in self.scalars.items()
        )


_SPEC_KEYS = ("spec.input_dim", "spec.hidden_sizes", "spec.repr_dim", "spec.num_classes")


def _entries(ckpt):
    if ckpt.spec is not None:
        yield "spec.input_dim", np.array(ckpt.spec.input_dim, dtype="<i8")
        yield "spec.hidden_sizes", np.array(ckpt.spec.hidden_sizes, dtype="<i8").reshape(-1)
        yield "spec.repr_dim", np.array(ckpt.spec.repr_dim, dtype="<i8")
        yield "spec.num_classes", np.array(ckpt.spec.num_classes, dtype="<i8")
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        yield name, np.ascontiguousarray(arr, dtype=dtype)
    for name in sorted(ckpt.scalars):
        yield "scalar." + name, np.array(ckpt.scalars[name], dtype="<f8")


def checkpoint_bytes(ckpt):
    entries = list(_entries(ckpt))
    out = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(entries))]
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        dtype = arr.dtype.str.encode("ascii")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", len(dtype)) + dtype)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        out.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def save_checkpoint(path, ckpt):
    path = Path(path)
    data = checkpoint_bytes(ckpt)
    with FileLock(str(path) + ".lock"):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data):
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    raw = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (dtype_len,) = reader.unpack("<B")
        dtype = reader.take(dtype_len).decode("ascii")
        if dtype not in ("<f8", "<i8"):
            raise CheckpointError(f"entry {name!r} has unsupported dtype {dtype}")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"entry {name!r} payload size does not match its shape")
        raw[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after the last checkpoint entry")

    spec = None
    present = [k for k in _SPEC_KEYS if k in raw]
    if present:
        missing = [k for k in _SPEC_KEYS if k not in raw]
        if missing:
            raise CheckpointError(f"checkpoint is missing required array {missing[0]!r}")
        spec = ModelSpec(
            int(raw.pop("spec.input_dim")),
            tuple(int(h) for h in raw.pop("spec.hidden_sizes")),
            int(raw.pop("spec.repr_dim")),
            int(raw.pop("spec.num_classes")),
        )
    scalars = {k[len("scalar.") :]: float(v) for k, v in raw.items() if k.startswith("scalar.")}
    arrays = {k: v for k, v in raw.items() if not k.startswith("scalar.")}
    return Checkpoint(spec, arrays, scalars, version)


def load_checkpoint(path, required=()):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ckpt = parse_checkpoint(path.read_bytes())
    for name in required:
        if name == "spec":
            if ckpt.spec is None:
                raise CheckpointError("checkpoint is missing required array 'spec.input_dim'")
        else:
            ckpt.require(name)
    return ckpt


def append_jsonl(path, record):
    """Append one JSON object as a line, holding an exclusive lock on the file."""
    path = Path(path)
    line = json.dumps(record, sort_keys=True)
    with FileLock(str(path) + ".lock"):
        with path.open("a") as fh:
            fh.write(line + "\n")


def read_jsonl(path):
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
