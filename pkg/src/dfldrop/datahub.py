"""Dataset ingestion, normalization, cross-validation folds and client partitioning."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestionError, PreconditionError, ShapeError

SCHEMES = ("iid", "clusters", "classes")
SILO_CAP = 200
TRAIN_FRACTION = 0.8


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    feature_names: tuple[str, ...] | None = None
    grid_shape: tuple[int, int] | None = None
    class_labels: tuple = ()  # original label value of each dense class id

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ShapeError(f"X has shape {self.X.shape} but there are {self.y.shape[0]} labels")
        if self.grid_shape is not None and self.grid_shape[0] * self.grid_shape[1] != self.X.shape[1]:
            raise ShapeError(f"grid {self.grid_shape} does not cover {self.X.shape[1]} features")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])


@dataclass(frozen=True, eq=False)
class Silo:
    """One client's private data: disjoint train/validation views."""

    owner: int
    train: Dataset
    val: Dataset
    indices: np.ndarray  # rows of the partitioned dataset held by this silo
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.train) + len(self.val)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignment: np.ndarray  # fold id per sample

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)


# --------------------------------------------------------------------------
# ingestion


def load_csv(path, *, header: bool = False, grid_shape=None, name: str | None = None) -> Dataset:
    """Read a numeric CSV whose last column holds integral class labels.

    Labels are re-indexed densely to ``0..C-1`` in sorted order of the
    original values; the originals are kept in ``class_labels``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc.strerror})") from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    names = None
    if header and rows:
        names = tuple(c.strip() for c in rows[0][:-1])
        rows = rows[1:]
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise IngestionError(f"{path}: need at least one feature column and a label column")
    first_line = 2 if header else 1
    values = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise IngestionError(f"{path}: row {r + first_line} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise IngestionError(
                    f"{path}: row {r + first_line}, column {c + 1}: non-numeric value {cell!r}") from None
    if not np.all(np.isfinite(values)):
        r, c = np.argwhere(~np.isfinite(values))[0]
        raise IngestionError(f"{path}: row {r + first_line}, column {c + 1}: non-finite value")
    raw = values[:, -1]
    bad = np.flatnonzero(raw != np.round(raw))
    if bad.size:
        raise IngestionError(f"{path}: row {bad[0] + first_line}, column {width}: label is not an integer")
    originals, y = np.unique(raw.astype(np.int64), return_inverse=True)
    if originals.size < 2:
        raise IngestionError(f"{path}: need at least two classes")
    return Dataset(
        X=values[:, :-1],
        y=y.astype(np.int64),
        n_classes=int(originals.size),
        feature_names=names,
        grid_shape=tuple(grid_shape) if grid_shape else None,
        class_labels=tuple(int(v) for v in originals),
    )


def minmax_normalize(ds: Dataset) -> Dataset:
    """Scale each feature to [0, 1]; constant features become 0."""
    lo = ds.X.min(axis=0)
    span = ds.X.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    X = np.where(span > 0, (ds.X - lo) / safe, 0.0)
    return replace(ds, X=np.clip(X, 0.0, 1.0))


# --------------------------------------------------------------------------
# folds


def kfold_plan(ds: Dataset, k: int = 10, seed=None) -> FoldPlan:
    """Stratified k-fold assignment.

    Samples are shuffled within each class, the classes are laid end to end,
    and position ``p`` goes to fold ``p mod k``. Every class then lands in each
    fold ``floor`` or ``ceil`` of its proportional share, and fold sizes differ
    by at most one.
    """
    n = len(ds)
    if k < 2 or n < k:
        raise PreconditionError(f"cannot build {k} folds from {n} samples")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(ds.y == c)) for c in range(ds.n_classes)])
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldPlan(k, assignment)


# --------------------------------------------------------------------------
# k-means


def _kmeans_pp(X, k, rng):
    centers = [X[rng.integers(X.shape[0])]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(X.shape[0])
        else:
            idx = rng.choice(X.shape[0], p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans(X, k: int, seed=None, max_iter: int = 300, tol: float = 1e-6, return_trace: bool = False):
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster takes the point farthest from its current centroid.
    Returns ``(assignments, centroids)`` and, with ``return_trace``, the
    inertia after every assignment step.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise PreconditionError(f"k-means needs at least k={k} rows, got {n}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    trace = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            if not np.any(labels == j):
                own = d2[np.arange(n), labels]
                counts = np.bincount(labels, minlength=k)
                own = np.where(counts[labels] > 1, own, -1.0)  # never empty another cluster
                far = int(np.argmax(own))
                labels[far] = j
        trace.append(float(np.sum((X - C[labels]) ** 2)))
        new_C = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.max(np.linalg.norm(new_C - C, axis=1)))
        C = new_C
        if shift < tol:
            break
    labels = np.argmin(((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2), axis=1)
    for j in range(k):
        if not np.any(labels == j):
            own = ((X - C[labels]) ** 2).sum(axis=1)
            counts = np.bincount(labels, minlength=k)
            labels[int(np.argmax(np.where(counts[labels] > 1, own, -1.0)))] = j
    if return_trace:
        return labels, C, trace
    return labels, C


# --------------------------------------------------------------------------
# partitioning


def class_assignment(y: np.ndarray, n_classes: int, m: int) -> list[list[int]]:
    """Deal classes to clients round-robin, most frequent first."""
    present = [c for c in range(n_classes) if np.any(y == c)]
    if len(present) < m:
        raise ConfigError(f"classes scheme needs at least {m} classes, data has {len(present)}")
    counts = np.bincount(y, minlength=n_classes)
    ordered = sorted(present, key=lambda c: (-counts[c], c))
    owners: list[list[int]] = [[] for _ in range(m)]
    for pos, c in enumerate(ordered):
        owners[pos % m].append(int(c))
    return [sorted(cs) for cs in owners]


def split_train_val(n: int, rng, train_fraction: float = TRAIN_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(np.floor(train_fraction * n + 0.5))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def make_silo(owner: int, ds: Dataset, rows: np.ndarray, rng, provenance: dict, cap: int | None = SILO_CAP) -> Silo:
    rows = np.asarray(rows, dtype=np.int64)
    if cap is not None and rows.size > cap:
        rows = np.sort(rng.choice(rows, size=cap, replace=False))
    tr, va = split_train_val(rows.size, rng)
    return Silo(owner, ds.subset(rows[tr]), ds.subset(rows[va]), rows, dict(provenance))


def partition(ds: Dataset, scheme: str, m: int, seed=None, cap: int | None = SILO_CAP) -> list[Silo]:
    """Split ``ds`` across ``m`` clients, then cap and train/val-split each silo."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown partition scheme {scheme!r}")
    if m < 1 or len(ds) < m:
        raise PreconditionError(f"cannot split {len(ds)} samples across {m} clients")
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        groups = np.array_split(rng.permutation(len(ds)), m)
        details = [{} for _ in range(m)]
    elif scheme == "clusters":
        labels, _ = kmeans(ds.X, m, seed=rng)
        groups = [np.flatnonzero(labels == j) for j in range(m)]
        details = [{"cluster": j} for j in range(m)]
    else:
        owners = class_assignment(ds.y, ds.n_classes, m)
        groups = [np.flatnonzero(np.isin(ds.y, cs)) for cs in owners]
        details = [{"classes": cs} for cs in owners]
    silos = []
    for j, (rows, extra) in enumerate(zip(groups, details)):
        if rows.size == 0:
            raise PreconditionError(f"client {j} received no samples under {scheme!r}")
        silos.append(make_silo(j, ds, np.sort(rows), rng, {"scheme": scheme, **extra}, cap))
    return silos
