"""Dataset container, CSV ingestion, normalization, sensor splits and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAIN_TAGS = (SOURCE, TARGET)

SENSOR_COLUMN = "sensor_id"
DAY_COLUMN = "doy"


class DataError(ValueError):
    """Raised for malformed input data (bad CSV rows, schema mismatch, ...)."""


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout shared by every CSV of one experiment.

    ``coordinate_indices`` point into ``feature_names`` and mark the
    (longitude-like, latitude-like) pair.
    """

    feature_names: tuple
    coordinate_indices: tuple = (0, 1)
    label_name: str = "pm25"
    aux_label_name: Optional[str] = None

    def __post_init__(self):
        names = tuple(self.feature_names)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "coordinate_indices", tuple(self.coordinate_indices))
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        ci = self.coordinate_indices
        if len(ci) != 2 or ci[0] == ci[1] or not all(0 <= i < len(names) for i in ci):
            raise DataError(f"invalid coordinate indices {ci} for {len(names)} features")
        if self.label_name in names:
            raise DataError(f"label {self.label_name!r} is also listed as a feature")
        if self.aux_label_name is not None and self.aux_label_name in names:
            raise DataError(f"aux label {self.aux_label_name!r} is also listed as a feature")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True)
class Dataset:
    """Immutable table of samples for one domain.

    ``samples`` is (n, p). ``coords`` keeps the raw planar coordinates so
    they survive normalization; it defaults to the coordinate columns.
    """

    samples: np.ndarray
    labels: np.ndarray
    sensor_ids: np.ndarray
    day_index: np.ndarray
    domain_tag: str = TARGET
    feature_names: tuple = ()
    aux_labels: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    coordinate_indices: tuple = (0, 1)

    def __post_init__(self):
        X = np.asarray(self.samples, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"samples must be 2-D, got shape {X.shape}")
        n, p = X.shape
        object.__setattr__(self, "samples", _frozen(X, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.float64))
        object.__setattr__(self, "sensor_ids", _frozen(self.sensor_ids, np.int64))
        object.__setattr__(self, "day_index", _frozen(self.day_index, np.int64))
        for name in ("labels", "sensor_ids", "day_index"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if self.aux_labels is not None:
            aux = _frozen(self.aux_labels, np.float64)
            if aux.shape != (n,):
                raise DataError("aux_labels length differs from sample count")
            object.__setattr__(self, "aux_labels", aux)
        if self.domain_tag not in DOMAIN_TAGS:
            raise DataError(f"domain_tag must be one of {DOMAIN_TAGS}")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} columns")
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "coordinate_indices", tuple(self.coordinate_indices))
        if self.coords is None:
            ci = self.coordinate_indices
            c = X[:, list(ci)] if p > max(ci) else np.zeros((n, 2))
        else:
            c = np.asarray(self.coords, dtype=np.float64)
        if c.shape != (n, 2):
            raise DataError(f"coords must be ({n}, 2), got {c.shape}")
        object.__setattr__(self, "coords", _frozen(c, np.float64))
        for name in ("samples", "labels", "coords"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in {name}")
        if self.aux_labels is not None and not np.all(np.isfinite(self.aux_labels)):
            raise DataError("non-finite values in aux_labels")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` (index array or boolean mask), in that order."""
        idx = np.asarray(idx)
        return replace(
            self,
            samples=self.samples[idx],
            labels=self.labels[idx],
            sensor_ids=self.sensor_ids[idx],
            day_index=self.day_index[idx],
            aux_labels=None if self.aux_labels is None else self.aux_labels[idx],
            coords=self.coords[idx],
        )

    def with_samples(self, samples, feature_names=None) -> "Dataset":
        return replace(
            self,
            samples=samples,
            feature_names=tuple(feature_names) if feature_names is not None else self.feature_names,
        )

    def append_feature(self, column, name: str) -> "Dataset":
        column = np.asarray(column, dtype=np.float64).reshape(-1)
        if column.shape[0] != len(self):
            raise DataError("appended column length differs from sample count")
        return self.with_samples(
            np.column_stack([self.samples, column]), self.feature_names + (name,)
        )


def concat(datasets: Sequence[Dataset], domain_tag: Optional[str] = None) -> Dataset:
    """Row-wise concatenation; feature names must agree."""
    if not datasets:
        raise DataError("nothing to concatenate")
    first = datasets[0]
    for d in datasets[1:]:
        if d.feature_names != first.feature_names:
            raise DataError("cannot concatenate datasets with different features")
    has_aux = all(d.aux_labels is not None for d in datasets)
    return Dataset(
        samples=np.vstack([d.samples for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        sensor_ids=np.concatenate([d.sensor_ids for d in datasets]),
        day_index=np.concatenate([d.day_index for d in datasets]),
        domain_tag=domain_tag or first.domain_tag,
        feature_names=first.feature_names,
        aux_labels=np.concatenate([d.aux_labels for d in datasets]) if has_aux else None,
        coords=np.vstack([d.coords for d in datasets]),
        coordinate_indices=first.coordinate_indices,
    )


# -- CSV ---------------------------------------------------------------------


def schema_from_csv(path, label_name: str = "pm25", aux_label_name=None, coordinate_names=None) -> FeatureSchema:
    """Infer a schema from a CSV header: every column that is not the
    sensor, day, label or aux column is a feature, in file order.
    Coordinates default to the first two features."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        try:
            header = [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
    skip = {SENSOR_COLUMN, DAY_COLUMN, label_name, aux_label_name}
    features = tuple(h for h in header if h not in skip)
    if len(features) < 2:
        raise DataError(f"{path}: need at least two feature columns, found {list(features)}")
    if coordinate_names is None:
        ci = (0, 1)
    else:
        try:
            ci = tuple(features.index(c) for c in coordinate_names)
        except ValueError:
            raise DataError(f"{path}: coordinate columns {list(coordinate_names)} not among features") from None
    aux = aux_label_name if aux_label_name in header else None
    return FeatureSchema(features, ci, label_name, aux)


def load_csv(path, schema: FeatureSchema, domain_tag: str = TARGET, label_optional: bool = False) -> Dataset:
    """Read a CSV written in the ``sensor_id, doy, <features>, <label>`` layout.

    Column order in the file is free; every schema column plus
    ``sensor_id`` and ``doy`` must be present. Extra columns are rejected.
    With ``label_optional`` a file without the label (and aux) column
    loads with zero labels, for unlabeled prediction grids.

    Raises
    ------
    DataError
        On a missing/unknown column, a blank or non-numeric cell, or a
        row with the wrong number of cells. Messages carry the line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    required = [SENSOR_COLUMN, DAY_COLUMN, *schema.feature_names, schema.label_name]
    if schema.aux_label_name is not None:
        required.append(schema.aux_label_name)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_label = schema.label_name in header
        if label_optional and not has_label:
            required = required[: 2 + schema.n_features]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: header is missing column(s) {missing}")
        unknown = [c for c in header if c not in required]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}")
        pos = {c: header.index(c) for c in required}

        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}"
                )
            values = []
            for c in required:
                cell = row[pos[c]].strip()
                if not cell:
                    raise DataError(f"{path}:{line_no}: blank value in column {c!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{line_no}: non-numeric value {cell!r} in column {c!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{line_no}: non-finite value in column {c!r}")
                values.append(v)
            rows.append(values)

    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(required))
    p = schema.n_features
    if len(required) == 2 + p:
        table = np.column_stack([table, np.zeros(len(rows))])
    for col, name in ((0, SENSOR_COLUMN), (1, DAY_COLUMN)):
        if not np.all(table[:, col] == np.round(table[:, col])):
            raise DataError(f"{path}: column {name!r} must hold integers")
    return Dataset(
        samples=table[:, 2 : 2 + p],
        labels=table[:, 2 + p],
        sensor_ids=table[:, 0].astype(np.int64),
        day_index=table[:, 1].astype(np.int64),
        domain_tag=domain_tag,
        feature_names=schema.feature_names,
        aux_labels=table[:, 3 + p] if schema.aux_label_name is not None and table.shape[1] > 3 + p else None,
        coordinate_indices=schema.coordinate_indices,
    )


def write_csv(path, dataset: Dataset, label_name: str = "pm25", aux_label_name=None) -> None:
    """Write ``dataset`` in the layout read by :func:`load_csv`."""
    header = [SENSOR_COLUMN, DAY_COLUMN, *dataset.feature_names, label_name]
    if aux_label_name is not None:
        if dataset.aux_labels is None:
            raise DataError("dataset has no aux labels to write")
        header.append(aux_label_name)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(dataset)):
            row = [int(dataset.sensor_ids[i]), int(dataset.day_index[i])]
            row += [repr(float(v)) for v in dataset.samples[i]]
            row.append(repr(float(dataset.labels[i])))
            if aux_label_name is not None:
                row.append(repr(float(dataset.aux_labels[i])))
            w.writerow(row)


# -- normalization -------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, np.float64))
        object.__setattr__(self, "std", _frozen(self.std, np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DataError("mean/std must be 1-D vectors of equal length")
        if np.any(self.std <= 0):
            raise DataError("standard deviations must be strictly positive")


def fit_normalizer(datasets: Sequence[Dataset]) -> NormStats:
    """Per-feature mean and population std over the union of ``datasets``.

    Zero-variance columns get std 1 so they map to 0.
    """
    blocks = [d.samples for d in datasets if len(d)]
    if not blocks:
        raise DataError("cannot fit a normalizer on zero samples")
    X = np.vstack(blocks)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    return NormStats(mean=mean, std=std)


def apply_normalizer(dataset: Dataset, stats: NormStats) -> Dataset:
    if dataset.n_features != stats.mean.shape[0]:
        raise DataError(
            f"normalizer has {stats.mean.shape[0]} features, dataset has {dataset.n_features}"
        )
    return dataset.with_samples((dataset.samples - stats.mean) / stats.std)


# -- splitting -----------------------------------------------------------------


def split_by_sensor(
    dataset: Dataset, n_train_sensors: int, samples_per_sensor: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Hold out whole sensors.

    ``n_train_sensors`` sensors are drawn without replacement; each
    contributes up to ``samples_per_sensor`` randomly chosen rows to the
    training set. Every row of every other sensor goes to the test set.
    """
    sensors = np.unique(dataset.sensor_ids)
    if n_train_sensors > sensors.size:
        raise DataError(
            f"requested {n_train_sensors} training sensors, dataset has {sensors.size}"
        )
    if n_train_sensors < 0 or samples_per_sensor < 1:
        raise DataError("n_train_sensors must be >= 0 and samples_per_sensor >= 1")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(sensors, size=n_train_sensors, replace=False))
    train_idx = []
    for s in chosen:
        rows = np.flatnonzero(dataset.sensor_ids == s)
        if rows.size > samples_per_sensor:
            rows = np.sort(rng.choice(rows, size=samples_per_sensor, replace=False))
        train_idx.append(rows)
    train_idx = np.concatenate(train_idx) if train_idx else np.array([], dtype=np.int64)
    test_mask = ~np.isin(dataset.sensor_ids, chosen)
    return dataset.subset(train_idx.astype(np.int64)), dataset.subset(np.flatnonzero(test_mask))


# -- metrics -------------------------------------------------------------------


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape[0]} vs {yhat.shape[0]}")
    if y.size == 0:
        raise ValueError("empty vectors")
    return y, yhat


def r_squared(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


@dataclass(frozen=True)
class Metrics:
    r_squared: float
    rmse: float

    @classmethod
    def of(cls, y, yhat) -> "Metrics":
        return cls(r_squared=r_squared(y, yhat), rmse=rmse(y, yhat))


def pearson(a, b) -> float:
    """Pearson correlation; 0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        return 0.0
    return float(np.dot(a, b)) / den
