"""Feature sets, pseudo-label ensembles, splits and their file formats.

Binary layouts (all little-endian):

* features ``MFNT``: version u32, N u64, d u32, has_labels u8, C u32, then
  N*d float32 row-major, then N int32 labels when has_labels is set.
* pseudo-labels ``MFPL``: version u32, N u64, T u32, Z u32, then N*T int32
  (sample-major, trial-minor).

The CSV feature format has the header ``id,label,f0,...,f{d-1}``; an empty
label or ``-1`` marks an unlabeled sample.
"""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"MFNT"
PSEUDO_MAGIC = b"MFPL"
FORMAT_VERSION = 1
UNLABELED = -1

_FEATURE_HEADER = struct.Struct("<4sIQIBI")
_PSEUDO_HEADER = struct.Struct("<4sIQII")


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """N feature vectors of dimension d with optional class labels.

    ``labels`` is a masked integer array; masked entries are unlabeled
    samples. A plain integer array is accepted on construction, with -1
    meaning unlabeled.
    """

    features: np.ndarray
    labels: np.ma.MaskedArray | None = None
    n_classes: int = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"features must be a non-empty N x d matrix, got shape {x.shape}")
        bad = ~np.isfinite(x)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise ValueError(f"non-finite feature value in row {row}")
        object.__setattr__(self, "features", _readonly(x))

        c = int(self.n_classes)
        if c < 0:
            raise ValueError("n_classes must be >= 0")
        object.__setattr__(self, "n_classes", c)
        if self.labels is None:
            return
        if isinstance(self.labels, np.ma.MaskedArray):
            mask = np.ma.getmaskarray(self.labels).copy()
            values = np.asarray(self.labels.filled(0), dtype=np.int64)
        else:
            values = np.asarray(self.labels, dtype=np.int64)
            mask = values == UNLABELED
        if values.shape != (x.shape[0],):
            raise ValueError(f"expected {x.shape[0]} labels, got shape {values.shape}")
        for i in np.flatnonzero(~mask & ((values < 0) | (values >= c))):
            raise ValueError(f"label {values[i]} of row {i} outside [0, {c})")
        values = np.where(mask, 0, values)
        lab = np.ma.MaskedArray(values, mask=mask)
        lab.data.setflags(write=False)
        lab.mask.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def labeled_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.n_samples, dtype=bool)
        return ~np.ma.getmaskarray(self.labels)

    def label_array(self) -> np.ndarray:
        """Labels as int64 with -1 for unlabeled samples (file representation)."""
        if self.labels is None:
            return np.full(self.n_samples, UNLABELED, dtype=np.int64)
        return np.asarray(self.labels.filled(UNLABELED), dtype=np.int64)

    def subset(self, indices) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return FeatureSet(self.features[idx], labels, self.n_classes)

    def with_features(self, features) -> "FeatureSet":
        return FeatureSet(features, self.labels, self.n_classes)

    def equals(self, other: "FeatureSet") -> bool:
        if self.n_classes != other.n_classes or self.has_labels != other.has_labels:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        return np.array_equal(self.label_array(), other.label_array())


@dataclass(frozen=True, eq=False)
class PseudoLabelEnsemble:
    """N x T matrix of pseudo-class ids in [0, Z)."""

    labels: np.ndarray
    n_pseudo_classes: int

    def __post_init__(self):
        y = np.asarray(self.labels)
        if y.ndim != 2:
            raise ValueError(f"pseudo-labels must be N x T, got shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise ValueError("pseudo-labels must be integers")
        y = y.astype(np.int64)
        z = int(self.n_pseudo_classes)
        if z < 1:
            raise ValueError("n_pseudo_classes must be >= 1")
        bad = (y < 0) | (y >= z)
        if bad.any():
            row, trial = np.argwhere(bad)[0]
            raise ValueError(f"pseudo-label {y[row, trial]} at (row {row}, trial {trial}) outside [0, {z})")
        object.__setattr__(self, "labels", _readonly(y))
        object.__setattr__(self, "n_pseudo_classes", z)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_trials(self) -> int:
        return self.labels.shape[1]

    def equals(self, other: "PseudoLabelEnsemble") -> bool:
        return self.n_pseudo_classes == other.n_pseudo_classes and np.array_equal(
            self.labels, other.labels
        )


@dataclass(frozen=True)
class SplitSpec:
    labeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        seen: set[int] = set()
        for name in ("labeled", "unlabeled", "test"):
            arr = _readonly(np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
            if (arr < 0).any():
                raise ValueError(f"negative index in [{name}]")
            overlap = seen.intersection(arr.tolist())
            if overlap or len(set(arr.tolist())) != arr.size:
                raise ValueError(f"[{name}] indices are duplicated or overlap another section")
            seen.update(arr.tolist())
            object.__setattr__(self, name, arr)

    def check(self, n_samples: int) -> None:
        for name in ("labeled", "unlabeled", "test"):
            arr = getattr(self, name)
            if arr.size and arr.max() >= n_samples:
                raise ValueError(f"[{name}] index {arr.max()} out of range for N={n_samples}")


def _detect_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise ValueError(f"unknown feature format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def load_features(path, format=None, n_classes=None) -> FeatureSet:
    """Read a feature file. Row i of the file becomes sample i.

    ``n_classes`` only applies to CSV input, which does not record C; by
    default C is one more than the largest label present.
    """
    fmt = _detect_format(path, format)
    if fmt == "csv":
        return _load_csv(path, n_classes)
    return _load_binary(path)


def save_features(fs: FeatureSet, path, format=None) -> None:
    fmt = _detect_format(path, format)
    if fmt == "csv":
        _save_csv(fs, path)
    else:
        _save_binary(fs, path)


def _load_csv(path, n_classes):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        d = len(header) - 2
        expected = ["id", "label"] + [f"f{j}" for j in range(d)]
        if d < 1 or [h.strip() for h in header] != expected:
            raise FormatError(f"{path}: line 1: malformed header, expected id,label,f0,...")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise FormatError(f"{path}: line {line_no}: expected {d + 2} columns, got {len(row)}")
            try:
                int(row[0])
            except ValueError:
                raise FormatError(f"{path}: line {line_no}: bad id {row[0]!r}") from None
            lab = row[1].strip()
            try:
                label = UNLABELED if lab == "" else int(lab)
            except ValueError:
                raise FormatError(f"{path}: line {line_no}: bad label {lab!r}") from None
            if label < UNLABELED:
                raise FormatError(f"{path}: line {line_no}: negative label {label}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError:
                raise FormatError(f"{path}: line {line_no}: unparsable feature value") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}: line {line_no}: non-finite feature value")
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    has_labels = bool((labels != UNLABELED).any())
    c = int(labels.max()) + 1 if has_labels else 0
    if n_classes is not None:
        bad = np.flatnonzero(labels >= n_classes)
        if bad.size:
            raise FormatError(f"{path}: line {bad[0] + 2}: label {labels[bad[0]]} >= C={n_classes}")
        c = int(n_classes)
    return FeatureSet(np.asarray(rows), labels if has_labels else None, c)


def _save_csv(fs, path):
    labels = fs.label_array()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(fs.dim)])
        for i in range(fs.n_samples):
            lab = "" if labels[i] == UNLABELED else str(labels[i])
            w.writerow([str(i), lab] + [repr(float(v)) for v in fs.features[i]])


def _load_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, has_labels, c = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: malformed header, N={n} d={d}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: malformed header, has_labels={has_labels}")
    if not has_labels and c != 0:
        raise FormatError(f"{path}: malformed header, C={c} without labels")
    size = _FEATURE_HEADER.size + 4 * n * d + (4 * n if has_labels else 0)
    if len(raw) != size:
        raise FormatError(f"{path}: expected {size} bytes for N={n}, d={d}, got {len(raw)}")
    off = _FEATURE_HEADER.size
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    bad = ~np.isfinite(x)
    if bad.any():
        raise FormatError(f"{path}: row {int(np.argwhere(bad)[0, 0])}: non-finite feature value")
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 4 * n * d).astype(np.int64)
        bad = np.flatnonzero((labels < UNLABELED) | (labels >= c))
        if bad.size:
            raise FormatError(f"{path}: row {bad[0]}: label {labels[bad[0]]} invalid for C={c}")
    return FeatureSet(x.astype(np.float64), labels, c)


def _save_binary(fs, path):
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FORMAT_VERSION, fs.n_samples, fs.dim, int(fs.has_labels),
        fs.n_classes if fs.has_labels else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fs.features.astype("<f4").tobytes())
        if fs.has_labels:
            fh.write(fs.label_array().astype("<i4").tobytes())


def save_pseudo(ens: PseudoLabelEnsemble, path) -> None:
    header = _PSEUDO_HEADER.pack(
        PSEUDO_MAGIC, FORMAT_VERSION, ens.n_samples, ens.n_trials, ens.n_pseudo_classes
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ens.labels.astype("<i4").tobytes())


def load_pseudo(path) -> PseudoLabelEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _PSEUDO_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, t, z = _PSEUDO_HEADER.unpack_from(raw)
    if magic != PSEUDO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if z < 1:
        raise FormatError(f"{path}: malformed header, Z={z}")
    size = _PSEUDO_HEADER.size + 4 * n * t
    if len(raw) != size:
        raise FormatError(f"{path}: expected {size} bytes for N={n}, T={t}, got {len(raw)}")
    y = np.frombuffer(raw, dtype="<i4", count=n * t, offset=_PSEUDO_HEADER.size).reshape(n, t)
    bad = (y < 0) | (y >= z)
    if bad.any():
        row, trial = np.argwhere(bad)[0]
        raise FormatError(f"{path}: entry {y[row, trial]} at (row {row}, trial {trial}) outside [0, {z})")
    return PseudoLabelEnsemble(y.astype(np.int64), z)


def save_split(split: SplitSpec, path) -> None:
    lines = []
    for name in ("labeled", "unlabeled", "test"):
        lines.append(f"[{name}]")
        lines.extend(str(int(i)) for i in getattr(split, name))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    sections: dict[str, list[int]] = {}
    current = None
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in ("labeled", "unlabeled", "test") or current in sections:
                raise FormatError(f"{path}: line {line_no}: unexpected section {line}")
            sections[current] = []
            continue
        if current is None:
            raise FormatError(f"{path}: line {line_no}: index before any section header")
        try:
            sections[current].append(int(line))
        except ValueError:
            raise FormatError(f"{path}: line {line_no}: bad index {line!r}") from None
    try:
        return SplitSpec(**sections)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def make_split(fs: FeatureSet, per_class: int, test_fraction: float, rng) -> SplitSpec:
    """Stratified split: ``per_class`` labeled samples per class, a test share
    per class, and every remaining sample unlabeled."""
    if not fs.has_labels:
        raise ValueError("stratified split requires labels")
    labels = fs.label_array()
    lab, unl, test = [], [], []
    for c in range(fs.n_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * idx.size))
        if idx.size - n_test < per_class:
            raise ValueError(f"class {c} has too few samples for {per_class} labeled")
        test.extend(idx[:n_test])
        lab.extend(idx[n_test:n_test + per_class])
        unl.extend(idx[n_test + per_class:])
    unl.extend(np.flatnonzero(labels == UNLABELED))
    return SplitSpec(np.sort(lab), np.sort(unl), np.sort(test))


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
