"""Feature datasets: CSV/binary persistence and the synthetic evolution-feature benchmark."""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from cafv.autodiff import RngStream

MAGIC = b"CAFV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")
_REC = struct.Struct("<iB")
_PROV = struct.Struct("<qi")


class FeatureFileError(ValueError):
    """Malformed feature file; raised before any dataset is returned."""


@dataclass(frozen=True)
class FeatureRecord:
    id: int
    f: np.ndarray
    label: int
    source_id: Optional[int] = None
    delta: Optional[int] = None

    @property
    def synthetic(self) -> bool:
        return self.source_id is not None


class Dataset:
    """An immutable set of feature vectors with integer intensity labels.

    Real records carry ``source_id == -1`` and ``delta == 0``; synthetic ones
    record the source sample id and the context delta they were generated with.
    """

    def __init__(self, features, labels, ids=None, source_ids=None, deltas=None, split: str = "train"):
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if not np.isfinite(features).all():
            raise ValueError("features must be finite")
        n = len(features)
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if len(labels) != n:
            raise ValueError(f"{n} feature rows but {len(labels)} labels")
        if n and labels.min() < 0:
            raise ValueError("labels must be >= 0")
        ids = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64)
        if len(np.unique(ids)) != n:
            raise ValueError("record ids must be unique")
        source_ids = np.full(n, -1, np.int64) if source_ids is None else np.array(source_ids, np.int64)
        deltas = np.zeros(n, np.int64) if deltas is None else np.array(deltas, np.int64)
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        for a in (features, labels, ids, source_ids, deltas):
            a.setflags(write=False)
        self.features, self.labels, self.ids = features, labels, ids
        self.source_ids, self.deltas = source_ids, deltas
        self.split = split

    @classmethod
    def empty(cls, feature_dim: int, split: str = "train") -> "Dataset":
        return cls(np.zeros((0, feature_dim)), [], split=split)

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord], feature_dim: Optional[int] = None,
                     split: str = "train") -> "Dataset":
        if not records:
            if feature_dim is None:
                raise ValueError("feature_dim required for an empty record list")
            return cls.empty(feature_dim, split)
        return cls(
            np.stack([r.f for r in records]),
            [r.label for r in records],
            [r.id for r in records],
            [-1 if r.source_id is None else r.source_id for r in records],
            [0 if r.delta is None else r.delta for r in records],
            split=split,
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("features", "labels", "ids", "source_ids", "deltas")))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def label_set(self) -> Tuple[int, ...]:
        return tuple(int(s) for s in np.unique(self.labels))

    @property
    def has_synthetic(self) -> bool:
        return bool(np.any(self.source_ids >= 0))

    def record(self, i: int) -> FeatureRecord:
        synthetic = self.source_ids[i] >= 0
        return FeatureRecord(
            int(self.ids[i]), self.features[i], int(self.labels[i]),
            int(self.source_ids[i]) if synthetic else None,
            int(self.deltas[i]) if synthetic else None,
        )

    def records(self) -> Iterator[FeatureRecord]:
        return (self.record(i) for i in range(len(self)))

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def union(self, other: "Dataset") -> "Dataset":
        """Concatenation with fresh sequential ids (provenance kept)."""
        if len(other) and len(self) and other.feature_dim != self.feature_dim:
            raise ValueError(f"feature dims differ: {self.feature_dim} vs {other.feature_dim}")
        return Dataset(
            np.concatenate([self.features, other.features.reshape(-1, self.feature_dim)]),
            np.concatenate([self.labels, other.labels]),
            None,
            np.concatenate([self.source_ids, other.source_ids]),
            np.concatenate([self.deltas, other.deltas]),
            split=self.split,
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.features, self.labels, self.ids, self.source_ids, self.deltas):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# persistence


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise ValueError(f"unknown feature format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def _f32_text(x: np.float32) -> str:
    # numpy prints the shortest string that round-trips the float32 value
    s = str(x)
    return s[:-2] if s.endswith(".0") else s


def encode_binary(ds: Dataset) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.feature_dim, len(ds)))
    f32 = ds.features.astype("<f4")
    for i in range(len(ds)):
        synthetic = ds.source_ids[i] >= 0
        out += _REC.pack(int(ds.labels[i]), 1 if synthetic else 0)
        if synthetic:
            out += _PROV.pack(int(ds.source_ids[i]), int(ds.deltas[i]))
        out += f32[i].tobytes()
    return bytes(out)


def decode_binary(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < _HEADER.size:
        raise FeatureFileError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, d, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    pos = _HEADER.size
    minimum = pos + n * (_REC.size + 4 * d)
    if len(buf) < minimum:
        raise FeatureFileError(f"truncated file: expected at least {minimum} bytes, got {len(buf)}")
    feats = np.zeros((n, d))
    labels = np.zeros(n, np.int64)
    sources = np.full(n, -1, np.int64)
    deltas = np.zeros(n, np.int64)
    fbytes = 4 * d

    def need(k, what):
        if pos + k > len(buf):
            raise FeatureFileError(
                f"truncated file at record {i} ({what}): expected at least {pos + k} bytes, got {len(buf)}"
            )

    for i in range(n):
        need(_REC.size, "label")
        labels[i], flag = _REC.unpack_from(buf, pos)
        pos += _REC.size
        if flag == 1:
            need(_PROV.size, "provenance")
            sources[i], deltas[i] = _PROV.unpack_from(buf, pos)
            pos += _PROV.size
        elif flag != 0:
            raise FeatureFileError(f"record {i}: bad provenance flag {flag}")
        need(fbytes, "features")
        feats[i] = np.frombuffer(buf, "<f4", d, pos)
        pos += fbytes
    if pos != len(buf):
        raise FeatureFileError(f"trailing data: expected {pos} bytes, got {len(buf)}")
    try:
        return Dataset(feats, labels, None, sources, deltas, split=split)
    except ValueError as exc:
        raise FeatureFileError(str(exc)) from None


def encode_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    synthetic = ds.has_synthetic
    header = ["label"] + [f"f{j}" for j in range(ds.feature_dim)]
    w.writerow(header + (["source_id", "delta"] if synthetic else []))
    f32 = ds.features.astype(np.float32)
    for i in range(len(ds)):
        row = [str(int(ds.labels[i]))] + [_f32_text(x) for x in f32[i]]
        if synthetic:
            real = ds.source_ids[i] < 0
            row += ["", ""] if real else [str(int(ds.source_ids[i])), str(int(ds.deltas[i]))]
        w.writerow(row)
    return buf.getvalue()


def decode_csv(text: str, split: str = "train") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FeatureFileError("empty CSV: missing header")
    header = rows[0]
    synthetic = header[-2:] == ["source_id", "delta"]
    fcols = header[1:-2] if synthetic else header[1:]
    if not header or header[0] != "label" or fcols != [f"f{j}" for j in range(len(fcols))]:
        raise FeatureFileError(f"bad CSV header {header[:4]}...; expected label,f0,...,f{{d-1}}")
    d = len(fcols)
    width = len(header)
    feats, labels, sources, deltas = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FeatureFileError(f"line {lineno}: ragged row with {len(row)} cells, expected {width}")
        try:
            labels.append(int(row[0]))
            feats.append([float(x) for x in row[1 : 1 + d]])
            if synthetic and row[-2] != "":
                sources.append(int(row[-2]))
                deltas.append(int(row[-1]))
            else:
                sources.append(-1)
                deltas.append(0)
        except ValueError:
            raise FeatureFileError(f"line {lineno}: non-numeric cell") from None
    try:
        return Dataset(np.array(feats, dtype=np.float64).reshape(-1, d), labels, None, sources, deltas, split)
    except ValueError as exc:
        raise FeatureFileError(str(exc)) from None


def load_features(path, fmt: Optional[str] = None, split: str = "train") -> Dataset:
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            return decode_csv(fh.read(), split)
    with open(path, "rb") as fh:
        return decode_binary(fh.read(), split)


def save_features(ds: Dataset, path, fmt: Optional[str] = None) -> None:
    fmt = _infer_format(path, fmt)
    payload = encode_csv(ds).encode("utf-8") if fmt == "csv" else encode_binary(ds)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def class_histogram(ds: Dataset) -> Dict[int, int]:
    labels, counts = np.unique(ds.labels, return_counts=True)
    return {int(s): int(c) for s, c in zip(labels, counts)}


def histogram_csv(hist: Dict[int, int]) -> str:
    return "label,count\n" + "".join(f"{k},{v}\n" for k, v in sorted(hist.items()))


# ---------------------------------------------------------------------------
# synthetic benchmark

DEFAULT_TRAIN_COUNTS = (400, 400, 5, 400, 5, 400, 5, 400, 400)


@dataclass
class SyntheticSpec:
    """Classes on a line: prototype k is relu(base + (k-1) * drift).

    ``counts`` are per-class totals split 80/20 by class; when ``test_counts``
    is given, ``counts`` are training counts and the test set is drawn
    separately with ``test_counts`` per class.
    """

    n_classes: int = 9
    feature_dim: int = 16
    sigma: float = 0.1
    counts: Tuple[int, ...] = DEFAULT_TRAIN_COUNTS
    test_counts: Optional[Tuple[int, ...]] = (100,) * 9
    seed: int = 7
    label_offset: int = 10
    label_step: int = 1
    base_low: float = 0.5
    base_high: float = 1.5
    drift_scale: float = 0.2
    drift_zero_fraction: float = 0.25
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if len(self.counts) != self.n_classes:
            raise ValueError(f"counts has {len(self.counts)} entries, expected {self.n_classes}")
        if min(self.counts) < 1:
            raise ValueError("every class needs at least one sample")
        if self.test_counts is not None:
            if len(self.test_counts) != self.n_classes or min(self.test_counts) < 1:
                raise ValueError("test_counts must give >= 1 sample for every class")
        if self.label_offset < 0 or self.label_step < 1:
            raise ValueError("labels must be non-negative and strictly increasing")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")

    @property
    def labels(self) -> Tuple[int, ...]:
        return tuple(self.label_offset + k * self.label_step for k in range(self.n_classes))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("counts", "test_counts"):
            if d.get(k) is not None:
                d[k] = tuple(int(x) for x in d[k])
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Prototypes:
    """Ground truth of a synthetic benchmark."""

    labels: Tuple[int, ...]
    means: np.ndarray
    base: Optional[np.ndarray] = None
    drift: Optional[np.ndarray] = None

    def mean_of(self, label: int) -> np.ndarray:
        return self.means[self.labels.index(int(label))]

    def to_csv(self) -> str:
        d = self.means.shape[1]
        lines = ["label," + ",".join(f"f{j}" for j in range(d))]
        for s, m in zip(self.labels, self.means):
            lines.append(f"{s}," + ",".join(repr(float(x)) for x in m))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Prototypes":
        rows = list(csv.reader(io.StringIO(text)))
        labels = tuple(int(r[0]) for r in rows[1:])
        means = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return cls(labels, means)


def _split_counts(n: int, frac: float) -> int:
    if n < 2:
        return 0
    return min(n - 1, max(1, int(round(frac * n))))


def make_synthetic_benchmark(spec: SyntheticSpec) -> Tuple[Dataset, Dataset, Prototypes]:
    spec.validate()
    rng = RngStream(spec.seed, "data")
    d = spec.feature_dim
    base = rng.uniform((d,), spec.base_low, spec.base_high)
    drift = rng.uniform((d,), -spec.drift_scale, spec.drift_scale)
    drift = np.where(rng.uniform((d,)) < spec.drift_zero_fraction, 0.0, drift)
    raw = base[None, :] + np.arange(spec.n_classes)[:, None] * drift[None, :]
    means = np.maximum(raw, 0.0)
    labels = spec.labels

    def draw(k, n):
        return np.maximum(means[k] + spec.sigma * rng.normal((n, d)), 0.0)

    train_f, train_y, test_f, test_y = [], [], [], []
    for k in range(spec.n_classes):
        x = draw(k, spec.counts[k])
        if spec.test_counts is None:
            n_test = _split_counts(len(x), spec.test_fraction)
            order = rng.gen.permutation(len(x))
            test_part, train_part = x[order[:n_test]], x[order[n_test:]]
        else:
            train_part, test_part = x, draw(k, spec.test_counts[k])
        train_f.append(train_part)
        train_y += [labels[k]] * len(train_part)
        test_f.append(test_part)
        test_y += [labels[k]] * len(test_part)
    train = Dataset(np.concatenate(train_f), train_y, split="train")
    test = Dataset(np.concatenate(test_f).reshape(-1, d), test_y, split="test")
    return train, test, Prototypes(labels, means, base, drift)
