"""Task datasets: synthetic heterogeneous families, silo partitioning, CSV IO, splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, PartitionError, SplitError

# Per-label silo sizes of a chest X-ray label table; scaled down they give
# realistic relative positive counts for synthetic multi-label tables.
REFERENCE_SILO_SIZES = {
    "Pleural Other": 4022,
    "Lung Lesion": 12140,
    "Pneumothorax": 19224,
    "Consolidation": 17698,
    "Pneumonia": 23362,
    "Atelectasis": 58602,
    "Pleural Effusion": 27080,
    "Lung Opacity": 18810,
}


@dataclass(frozen=True)
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray
    task_id: str = "task"
    provenance: str = "synthetic"
    row_ids: np.ndarray | None = None
    direction: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise DataError(f"{self.task_id}: features must be a 2-D matrix")
        if y.shape != (X.shape[0],):
            raise DataError(f"{self.task_id}: {y.shape[0] if y.ndim else 0} labels for {X.shape[0]} rows")
        if y.size and not np.isin(y, (0, 1)).all():
            raise DataError(f"{self.task_id}: labels must be 0 or 1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y.astype(np.int8))
        ids = np.arange(X.shape[0]) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        object.__setattr__(self, "row_ids", ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        return len(self) - pos, pos

    def subset(self, index, suffix: str = "") -> "TaskDataset":
        index = np.asarray(index, dtype=np.int64)
        return TaskDataset(
            self.features[index], self.labels[index], self.task_id + suffix,
            self.provenance, self.row_ids[index], self.direction,
        )

    def require_both_classes(self) -> None:
        neg, pos = self.class_counts
        if neg == 0 or pos == 0:
            raise DataError(f"{self.task_id}: needs both classes, has {neg} negative and {pos} positive")


# -- synthetic task families --------------------------------------------------


@dataclass(frozen=True)
class TaskFamilySpec:
    """Linear tasks whose decision directions scatter around a base direction.

    Each task's direction sits at angle ``phi ~ N(0, heterogeneity)`` from
    ``base_direction`` inside a random plane containing it.
    """

    dim: int = 20
    heterogeneity: float = 0.0
    label_noise: float = 0.0
    samples_per_task: int | tuple[int, ...] = 400
    seed: int = 0
    base_direction: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.dim) < 2:
            raise ConfigError("task family needs dim >= 2")
        if not self.heterogeneity >= 0.0:
            raise ConfigError(f"heterogeneity must be >= 0, got {self.heterogeneity}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.base_direction is not None and len(self.base_direction) != self.dim:
            raise ConfigError("base_direction length differs from dim")
        if isinstance(self.samples_per_task, (list, tuple)):
            object.__setattr__(self, "samples_per_task", tuple(int(s) for s in self.samples_per_task))

    def base(self) -> np.ndarray:
        if self.base_direction is None:
            b = np.zeros(self.dim)
            b[0] = 1.0
        else:
            b = np.asarray(self.base_direction, dtype=np.float64)
        norm = np.linalg.norm(b)
        if norm == 0:
            raise ConfigError("base_direction must be nonzero")
        return b / norm

    def sizes(self, k: int) -> list[int]:
        s = self.samples_per_task
        if isinstance(s, tuple):
            if len(s) < k:
                raise ConfigError(f"samples_per_task lists {len(s)} sizes for {k} tasks")
            return list(s[:k])
        return [int(s)] * k

    def to_dict(self) -> dict:
        s = self.samples_per_task
        return {
            "dim": int(self.dim),
            "heterogeneity": float(self.heterogeneity),
            "label_noise": float(self.label_noise),
            "samples_per_task": list(s) if isinstance(s, tuple) else int(s),
            "seed": int(self.seed),
            "base_direction": None if self.base_direction is None else list(self.base_direction),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskFamilySpec":
        known = {"dim", "heterogeneity", "label_noise", "samples_per_task", "seed", "base_direction"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown task family fields: {sorted(extra)}")
        d = dict(d)
        if isinstance(d.get("samples_per_task"), list):
            d["samples_per_task"] = tuple(d["samples_per_task"])
        if d.get("base_direction") is not None:
            d["base_direction"] = tuple(float(v) for v in d["base_direction"])
        return cls(**d)


def sample_directions(base: np.ndarray, heterogeneity: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors ``cos(phi) base + sin(phi) u`` with ``u`` a random unit vector orthogonal to ``base``."""
    base = np.asarray(base, dtype=np.float64)
    d = base.shape[0]
    out = np.empty((k, d))
    for i in range(k):
        phi = rng.normal(0.0, heterogeneity) if heterogeneity > 0 else 0.0
        u = rng.normal(size=d)
        u -= (u @ base) * base
        u /= np.linalg.norm(u)
        w = math.cos(phi) * base + math.sin(phi) * u
        out[i] = w / np.linalg.norm(w)
    return out


def expected_pairwise_cosine(heterogeneity: float) -> float:
    """E[cos angle(w_i, w_j)] for two independent draws of :func:`sample_directions`."""
    return math.exp(-heterogeneity**2)


def generate_task_family(spec: TaskFamilySpec, k: int) -> list[TaskDataset]:
    if k < 1:
        raise ConfigError("need at least one task")
    rng = np.random.default_rng(spec.seed)
    dirs = sample_directions(spec.base(), spec.heterogeneity, k, rng)
    tasks = []
    for i, (w, m) in enumerate(zip(dirs, spec.sizes(k))):
        X = rng.normal(size=(m, spec.dim))
        y = (X @ w > 0).astype(np.int8)
        if spec.label_noise > 0:
            flip = rng.random(m) < spec.label_noise
            y = np.where(flip, 1 - y, y).astype(np.int8)
        tasks.append(TaskDataset(X, y, f"task{i}", "synthetic", None, w))
    return tasks


# -- multi-label tables and silos ----------------------------------------------


@dataclass(frozen=True)
class MultiLabelTable:
    features: np.ndarray
    labels: np.ndarray
    label_columns: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        Y = np.asarray(self.labels)
        cols = tuple(self.label_columns)
        if X.ndim != 2 or Y.shape != (X.shape[0], len(cols)):
            raise DataError("label matrix must have one row per feature row and one column per label")
        if Y.size and not np.isin(Y, (0, 1)).all():
            raise DataError("multi-label entries must be 0 or 1")
        if len(set(cols)) != len(cols):
            raise DataError("duplicate label column names")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y.astype(np.int8))
        object.__setattr__(self, "label_columns", cols)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def counts(self) -> dict[str, int]:
        return {c: int(n) for c, n in zip(self.label_columns, self.labels.sum(axis=0))}

    def column(self, name: str) -> np.ndarray:
        try:
            return self.labels[:, self.label_columns.index(name)]
        except ValueError:
            raise PartitionError(f"no label column named {name!r}", column=name) from None


def synthetic_multilabel_table(
    positive_counts: dict[str, int], n_rows: int, dim: int = 8, seed: int = 0
) -> MultiLabelTable:
    """Random table whose columns have exactly the given positive counts.

    Positives are placed independently per column, so a row may be positive
    in several columns.
    """
    rng = np.random.default_rng(seed)
    names = tuple(positive_counts)
    Y = np.zeros((n_rows, len(names)), dtype=np.int8)
    for j, name in enumerate(names):
        c = int(positive_counts[name])
        if not 0 <= c <= n_rows:
            raise ConfigError(f"column {name!r} cannot hold {c} positives in {n_rows} rows")
        Y[rng.choice(n_rows, size=c, replace=False), j] = 1
    X = rng.normal(size=(n_rows, dim))
    return MultiLabelTable(X, Y, names)


def silo_order(table: MultiLabelTable, silo_labels: Sequence[str], order: str = "least-first") -> list[str]:
    """Processing order of the requested columns; ties keep the requested order."""
    if order not in ("least-first", "most-first"):
        raise ConfigError(f"unknown silo order {order!r}")
    counts = {c: int(table.column(c).sum()) for c in silo_labels}
    sign = 1 if order == "least-first" else -1
    return sorted(silo_labels, key=lambda c: (sign * counts[c], list(silo_labels).index(c)))


def build_silos(
    table: MultiLabelTable,
    silo_labels: Sequence[str],
    seed: int = 0,
    order: str = "least-first",
) -> list[TaskDataset]:
    """Disjoint 1:1 balanced silos, one per label column, in processing order.

    Each silo takes every still-unassigned row positive in its column, then
    an equal number of unassigned rows negative in that column.
    """
    if len(set(silo_labels)) != len(silo_labels):
        raise PartitionError("silo labels repeat a column")
    rng = np.random.default_rng(seed)
    free = np.ones(len(table), dtype=bool)
    silos = []
    for name in silo_order(table, silo_labels, order):
        col = table.column(name)
        pos = np.flatnonzero(free & (col == 1))
        neg = np.flatnonzero(free & (col == 0))
        if pos.size == 0:
            raise PartitionError(f"column {name!r} has no unassigned positive rows", column=name)
        if neg.size < pos.size:
            raise PartitionError(
                f"column {name!r} needs {pos.size} unassigned negative rows, {neg.size} remain",
                column=name,
            )
        neg = np.sort(rng.choice(neg, size=pos.size, replace=False))
        rows = np.concatenate([pos, neg])
        free[rows] = False
        labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)]).astype(np.int8)
        silos.append(TaskDataset(table.features[rows], labels, name, "silo", rows))
    return silos


# -- CSV --------------------------------------------------------------------------


def load_csv(path, feature_columns: Sequence[str] | None = None, label_column: str = "label") -> TaskDataset:
    """Read a header-first CSV; rows keep their on-disk order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: no label column {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        fidx = [header.index(c) for c in feature_columns]
        lidx = header.index(label_column)
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line)
            try:
                rows.append([float(row[i]) for i in fidx])
            except ValueError as exc:
                raise ParseError(f"non-numeric feature ({exc})", line=line) from None
            lab = row[lidx].strip()
            if lab not in ("0", "1", "0.0", "1.0"):
                raise DataError(f"line {line}: label {lab!r} is not 0 or 1")
            labels.append(int(float(lab)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return TaskDataset(np.array(rows), np.array(labels), path.stem, "csv")


def write_csv(path, dataset: TaskDataset, feature_names: Sequence[str] | None = None) -> None:
    names = list(feature_names) if feature_names else [f"x{i}" for i in range(dataset.dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# -- splitting ----------------------------------------------------------------------


def split(dataset: TaskDataset, train_fraction: float = 0.9, seed: int = 0) -> tuple[TaskDataset, TaskDataset]:
    """Stratified train/test split; each class keeps at least one row on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(dataset.labels == cls)
        if idx.size < 2:
            raise SplitError(f"{dataset.task_id}: class {cls} has {idx.size} samples, need 2")
        idx = rng.permutation(idx)
        k = min(max(int(math.floor(train_fraction * idx.size + 0.5)), 1), idx.size - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return dataset.subset(tr, "/train"), dataset.subset(te, "/test")
