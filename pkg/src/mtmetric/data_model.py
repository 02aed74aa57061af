"""Longitudinal datasets: loading, validation, imputation and gradient labels.

A dataset is a table of timestamped feature vectors, one row per observation
of one individual, plus a label matrix with one slot per task. Missing labels
are stored as NaN.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AUTOMATED = "automated"
EXPERT = "expert"
GRADIENT_FORWARD = "gradient_forward"
GRADIENT_BACKWARD = "gradient_backward"
TASK_KINDS = (AUTOMATED, EXPERT, GRADIENT_FORWARD, GRADIENT_BACKWARD)
GRADIENT_KINDS = (GRADIENT_FORWARD, GRADIENT_BACKWARD)


class DatasetError(ValueError):
    """Raised for malformed dataset files or inconsistent schemas."""


@dataclass(frozen=True)
class TaskSchema:
    """Metadata for one label slot.

    ``resolution`` is the tolerance under which two values of this task count
    as a match. ``include_in_match`` lets a task be dropped from the n-of-T
    match rule while still being carried (and regressed) as a label.
    """

    name: str
    kind: str
    resolution: float
    source_task: int | None = None
    include_in_match: bool = True

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if not (self.resolution >= 0 and math.isfinite(self.resolution)):
            raise DatasetError(f"task {self.name!r}: resolution must be finite and >= 0")
        if self.kind in GRADIENT_KINDS and self.source_task is None:
            raise DatasetError(f"task {self.name!r}: gradient task needs source_task")
        if self.kind not in GRADIENT_KINDS and self.source_task is not None:
            raise DatasetError(f"task {self.name!r}: only gradient tasks take source_task")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "resolution": self.resolution,
            "source_task": self.source_task,
            "include_in_match": self.include_in_match,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSchema":
        return cls(
            name=str(d["name"]),
            kind=str(d["kind"]),
            resolution=float(d["resolution"]),
            source_task=None if d.get("source_task") is None else int(d["source_task"]),
            include_in_match=bool(d.get("include_in_match", True)),
        )


def validate_schema(schema: Sequence[TaskSchema]) -> tuple[TaskSchema, ...]:
    schema = tuple(schema)
    names = [t.name for t in schema]
    if len(set(names)) != len(names):
        raise DatasetError(f"duplicate task names in schema: {names}")
    for t in schema:
        if t.kind in GRADIENT_KINDS:
            src = t.source_task
            if not 0 <= src < len(schema) or schema[src].kind != EXPERT:
                raise DatasetError(
                    f"task {t.name!r}: source_task {src} is not an expert task")
    return schema


def default_schema(n_automated: int = 3, n_expert: int = 2,
                   automated_resolution: float = 0.25,
                   expert_resolution: float = 0.125,
                   gradient_resolution: float = 0.01,
                   gradients_in_match: bool = True) -> tuple[TaskSchema, ...]:
    """Automated slots, then expert slots, then one forward/backward gradient
    pair per expert task (3 + 2 + 4 = 9 slots by default)."""
    tasks = [TaskSchema(f"auto_{i}", AUTOMATED, automated_resolution)
             for i in range(n_automated)]
    tasks += [TaskSchema(f"expert_{i}", EXPERT, expert_resolution)
              for i in range(n_expert)]
    for i in range(n_expert):
        src = n_automated + i
        tasks.append(TaskSchema(f"expert_{i}_fwd", GRADIENT_FORWARD, gradient_resolution,
                                src, gradients_in_match))
        tasks.append(TaskSchema(f"expert_{i}_bwd", GRADIENT_BACKWARD, gradient_resolution,
                                src, gradients_in_match))
    return validate_schema(tasks)


def schema_hash(schema: Sequence[TaskSchema]) -> str:
    blob = json.dumps([t.to_dict() for t in schema], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_schema(schema: Sequence[TaskSchema], path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in schema], indent=2) + "\n")


def load_schema(path) -> tuple[TaskSchema, ...]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid schema JSON at byte offset {exc.pos}") from exc
    if not isinstance(raw, list):
        raise DatasetError(f"{path}: schema must be a JSON list")
    return validate_schema(TaskSchema.from_dict(d) for d in raw)


@dataclass(frozen=True)
class ObservationRecord:
    individual_id: str
    timestamp: int
    features: np.ndarray
    labels: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.labels)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of observations sorted by (individual_id, timestamp).

    Attributes
    ----------
    individual_ids : ndarray of str, shape (N,)
    timestamps : ndarray of int64, shape (N,)
        Days since epoch.
    features : ndarray of float, shape (N, d)
    labels : ndarray of float, shape (N, T)
        NaN marks a missing label.
    schema : tuple of TaskSchema, length T
    """

    individual_ids: np.ndarray
    timestamps: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    schema: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ids = np.asarray(self.individual_ids).astype(str)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        X = np.asarray(self.features, dtype=float)
        Y = np.asarray(self.labels, dtype=float)
        schema = validate_schema(self.schema)
        n = len(ids)
        if X.ndim != 2 or X.shape[0] != n:
            raise DatasetError(f"features must have shape (N, d) with N={n}, got {X.shape}")
        if Y.shape != (n, len(schema)):
            raise DatasetError(f"labels must have shape ({n}, {len(schema)}), got {Y.shape}")
        if ts.shape != (n,):
            raise DatasetError("timestamps must have shape (N,)")
        if not np.all(np.isfinite(X)):
            bad = int(np.argwhere(~np.isfinite(X))[0, 0])
            raise DatasetError(f"record {bad}: non-finite feature")
        if np.any(np.isinf(Y)):
            raise DatasetError("labels must be finite or NaN")
        order = np.lexsort((ts, ids))
        ids, ts, X, Y = ids[order], ts[order], X[order], Y[order]
        if n > 1:
            dup = (ids[1:] == ids[:-1]) & (ts[1:] == ts[:-1])
            if dup.any():
                i = int(np.argmax(dup))
                raise DatasetError(
                    f"duplicate timestamp {ts[i]} for individual {ids[i]!r}")
        object.__setattr__(self, "individual_ids", _frozen(ids))
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(Y))
        object.__setattr__(self, "schema", schema)

    def __len__(self) -> int:
        return len(self.individual_ids)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_tasks(self) -> int:
        return len(self.schema)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.labels)

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema)

    def record(self, i: int) -> ObservationRecord:
        return ObservationRecord(str(self.individual_ids[i]), int(self.timestamps[i]),
                                 self.features[i], self.labels[i])

    def replace(self, **changes) -> "Dataset":
        kw = dict(individual_ids=self.individual_ids, timestamps=self.timestamps,
                  features=self.features, labels=self.labels, schema=self.schema)
        kw.update(changes)
        return Dataset(**kw)

    def subset(self, indices) -> "Dataset":
        idx = np.sort(np.asarray(indices, dtype=int))
        return self.replace(individual_ids=self.individual_ids[idx],
                            timestamps=self.timestamps[idx],
                            features=self.features[idx], labels=self.labels[idx])

    def individuals(self) -> list[str]:
        return list(dict.fromkeys(self.individual_ids.tolist()))

    def groups(self) -> Iterable[np.ndarray]:
        """Yield the record indices of each individual, in time order."""
        ids = self.individual_ids
        if len(ids) == 0:
            return
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        ends = np.r_[starts[1:], len(ids)]
        for s, e in zip(starts, ends):
            yield np.arange(s, e)


def _format_float(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def save_dataset(dataset: Dataset, path) -> None:
    """Write the CSV form. Floats use the shortest round-trip repr."""
    header = ["individual_id", "timestamp"]
    header += [f"f_{j}" for j in range(dataset.d)]
    header += [t.name for t in dataset.schema]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [dataset.individual_ids[i], str(int(dataset.timestamps[i]))]
            row += [repr(float(v)) for v in dataset.features[i]]
            row += [_format_float(v) for v in dataset.labels[i]]
            w.writerow(row)


def load_dataset(csv_path, schema: Sequence[TaskSchema]) -> Dataset:
    """Parse a dataset CSV against ``schema``.

    Label columns may appear in any order but must be exactly the schema's
    task names. Row numbers in error messages count the header as row 1.
    """
    schema = validate_schema(schema)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{csv_path}: empty file") from None
        if header[:2] != ["individual_id", "timestamp"]:
            raise DatasetError(f"{csv_path}: header must start with individual_id,timestamp")
        d = 0
        while 2 + d < len(header) and header[2 + d] == f"f_{d}":
            d += 1
        if d == 0:
            raise DatasetError(f"{csv_path}: no feature columns f_0..")
        label_cols = header[2 + d:]
        names = [t.name for t in schema]
        for col in label_cols:
            if col not in names:
                raise DatasetError(f"{csv_path}: unknown column {col!r}")
        if len(set(label_cols)) != len(label_cols):
            raise DatasetError(f"{csv_path}: duplicate label column")
        missing = [n for n in names if n not in label_cols]
        if missing:
            raise DatasetError(f"{csv_path}: missing label columns {missing}")
        col_of = [label_cols.index(n) for n in names]

        ids, ts, feats, labels = [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{csv_path}: row {rownum}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            try:
                ts.append(int(row[1]))
            except ValueError:
                raise DatasetError(
                    f"{csv_path}: row {rownum}, column 'timestamp': not an integer: {row[1]!r}"
                ) from None
            f = np.empty(d)
            for j in range(d):
                try:
                    f[j] = float(row[2 + j])
                except ValueError:
                    f[j] = np.nan
                if not math.isfinite(f[j]):
                    raise DatasetError(
                        f"{csv_path}: row {rownum}, column 'f_{j}': non-finite feature {row[2 + j]!r}")
            feats.append(f)
            raw = row[2 + d:]
            y = np.empty(len(schema))
            for t, c in enumerate(col_of):
                cell = raw[c].strip()
                if cell == "":
                    y[t] = np.nan
                    continue
                try:
                    y[t] = float(cell)
                except ValueError:
                    y[t] = np.nan
                if not math.isfinite(y[t]):
                    raise DatasetError(
                        f"{csv_path}: row {rownum}, column {names[t]!r}: invalid label {cell!r}")
            labels.append(y)

    try:
        return Dataset(np.array(ids, dtype=str), np.array(ts, dtype=np.int64),
                       np.array(feats).reshape(len(ids), d),
                       np.array(labels).reshape(len(ids), len(schema)), schema)
    except DatasetError as exc:
        raise DatasetError(f"{csv_path}: {exc}") from None


def impute_nearest(dataset: Dataset) -> Dataset:
    """Fill missing expert labels from the temporally nearest observation of
    the same individual. Equidistant neighbours resolve to the earlier one;
    an individual that never observed a task keeps it missing."""
    expert = [t for t, s in enumerate(dataset.schema) if s.kind == EXPERT]
    Y = np.array(dataset.labels)
    for idx in dataset.groups():
        days = dataset.timestamps[idx]
        for t in expert:
            col = Y[idx, t]
            obs = np.flatnonzero(~np.isnan(col))
            if len(obs) == 0 or len(obs) == len(idx):
                continue
            obs_days = days[obs]
            for m in np.flatnonzero(np.isnan(col)):
                dist = np.abs(obs_days - days[m])
                # argmin returns the first minimum; obs is time-ordered so
                # this is the earlier of two equidistant observations
                col[m] = col[obs[np.argmin(dist)]]
            Y[idx, t] = col
    return dataset.replace(labels=Y)


def compute_gradient_labels(dataset: Dataset) -> Dataset:
    """Fill gradient slots with per-day forward/backward finite differences of
    their source expert task. Series boundaries get 0; a difference touching a
    missing source value stays missing."""
    Y = np.array(dataset.labels)
    grads = [(t, s) for t, s in enumerate(dataset.schema) if s.kind in GRADIENT_KINDS]
    if not grads:
        return dataset
    for idx in dataset.groups():
        days = dataset.timestamps[idx].astype(float)
        for t, s in grads:
            y = Y[idx, s.source_task]
            out = np.zeros(len(idx))
            if len(idx) > 1:
                rate = np.diff(y) / np.diff(days)
                if s.kind == GRADIENT_FORWARD:
                    out[:-1] = rate
                else:
                    out[1:] = rate
            out[np.isnan(y)] = np.nan
            Y[idx, t] = out
    return dataset.replace(labels=Y)


def prepare(dataset: Dataset) -> Dataset:
    """Imputation followed by gradient labels."""
    return compute_gradient_labels(impute_nearest(dataset))


@dataclass(frozen=True)
class FeatureScaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "FeatureScaler":
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(X.mean(axis=0), scale)

    @classmethod
    def identity(cls, d: int) -> "FeatureScaler":
        return cls(np.zeros(d), np.ones(d))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


def standardize(dataset: Dataset, scaler: FeatureScaler | None = None):
    """Return ``(standardized dataset, scaler)``; the scaler is fitted on
    ``dataset`` unless one is given."""
    if scaler is None:
        scaler = FeatureScaler.fit(dataset.features)
    return dataset.replace(features=scaler.transform(dataset.features)), scaler


def split_by_individual(dataset: Dataset, train_fraction: float, seed: int):
    """Partition by individual so no individual lands in both splits."""
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    inds = dataset.individuals()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(inds))
    n_train = int(round(train_fraction * len(inds)))
    if train_fraction < 1 and len(inds) > 1:
        n_train = min(max(n_train, 1), len(inds) - 1)
    train_ids = {inds[i] for i in perm[:n_train]}
    mask = np.array([i in train_ids for i in dataset.individual_ids.tolist()], dtype=bool)
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))
