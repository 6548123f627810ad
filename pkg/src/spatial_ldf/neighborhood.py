"""Neighborhood clouds and the label-voided input tensors built from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Dataset

WEIGHT_EPS = 1e-6
DEFAULT_K = 12


class CloudError(DataError):
    pass


@dataclass(frozen=True)
class NeighborhoodCloud:
    objective_index: int
    neighbor_indices: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[0]


@dataclass(frozen=True)
class CloudSet:
    """Clouds for many objectives at once, as (n_objectives, k) arrays."""

    neighbor_indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.neighbor_indices.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[1]

    def __getitem__(self, i) -> NeighborhoodCloud:
        return NeighborhoodCloud(int(i), self.neighbor_indices[i], self.distances[i])

    @classmethod
    def from_clouds(cls, clouds: Sequence[NeighborhoodCloud]) -> "CloudSet":
        return cls(
            np.array([c.neighbor_indices for c in clouds], dtype=np.int64),
            np.array([c.distances for c in clouds], dtype=np.float64),
        )


@dataclass(frozen=True)
class LdfInput:
    """One (k+1) x (p+1) autoencoder input.

    Row 0 is the objective with its label cell set to 0; rows 1..k are the
    weighted neighbors with their labels in the last column.
    """

    tensor: np.ndarray
    target_label: float
    aux_label: Optional[float] = None


@dataclass(frozen=True)
class LdfBatch:
    tensors: np.ndarray  # (n, k+1, p+1)
    target_labels: np.ndarray
    aux_labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.tensors.shape[0]

    def __getitem__(self, i) -> LdfInput:
        aux = None if self.aux_labels is None else float(self.aux_labels[i])
        return LdfInput(self.tensors[i], float(self.target_labels[i]), aux)

    def take(self, idx) -> "LdfBatch":
        return LdfBatch(
            self.tensors[idx],
            self.target_labels[idx],
            None if self.aux_labels is None else self.aux_labels[idx],
        )

    @classmethod
    def stack(cls, inputs: Sequence[LdfInput]) -> "LdfBatch":
        if not inputs:
            raise ValueError("no inputs")
        has_aux = all(x.aux_label is not None for x in inputs)
        return cls(
            np.stack([np.asarray(x.tensor, dtype=np.float64) for x in inputs]),
            np.array([x.target_label for x in inputs], dtype=np.float64),
            np.array([x.aux_label for x in inputs], dtype=np.float64) if has_aux else None,
        )


def _nearest(x, candidates: np.ndarray, pool_X: np.ndarray, k: int):
    """k nearest of ``candidates`` (ascending pool indices) to each row of x."""
    diff = x[:, None, :] - pool_X[candidates][None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # stable sort on ascending candidate indices breaks ties by lower index
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return candidates[order], np.take_along_axis(d, order, axis=1)


def build_cloud(
    objective,
    pool: Dataset,
    k: int = DEFAULT_K,
    day_window: int = 0,
    objective_day: Optional[int] = None,
    exclude=None,
) -> NeighborhoodCloud:
    """The ``k`` pool rows closest to one objective.

    ``objective`` is either a row index into ``pool`` (that row is then
    excluded from its own cloud) or a feature vector, in which case
    ``objective_day`` is required. Only pool rows whose day lies within
    ``day_window`` of the objective's day are candidates. ``exclude`` is
    an optional extra collection of ineligible pool indices.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if np.ndim(objective) == 0:
        idx = int(objective)
        x = pool.samples[idx]
        day = int(pool.day_index[idx]) if objective_day is None else int(objective_day)
        banned = {idx}
    else:
        idx = -1
        x = np.asarray(objective, dtype=np.float64)
        if objective_day is None:
            raise ValueError("objective_day is required for an external objective")
        day = int(objective_day)
        banned = set()
    if x.shape != (pool.n_features,):
        raise DataError(f"objective has {x.shape} features, pool has {pool.n_features}")
    if exclude is not None:
        banned.update(int(i) for i in np.asarray(exclude).reshape(-1))
    ok = np.abs(pool.day_index - day) <= day_window
    if banned:
        ok[list(banned)] = False
    candidates = np.flatnonzero(ok)
    if candidates.size < k:
        raise CloudError(
            f"day {day}: only {candidates.size} candidate(s) within window {day_window}, need k={k}"
        )
    nbr, dist = _nearest(x[None, :], candidates, pool.samples, k)
    return NeighborhoodCloud(idx, nbr[0], dist[0])


def build_clouds(
    objectives: Dataset,
    pool: Dataset,
    k: int = DEFAULT_K,
    day_window: int = 0,
    objective_keys=None,
    pool_keys=None,
) -> CloudSet:
    """Vectorised :func:`build_cloud` for every row of ``objectives``.

    Pool rows whose key equals the objective's key are never neighbors;
    with keys identifying (domain, sensor) this removes the objective itself
    and, for ``day_window > 0``, its own sensor on other days.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if objectives.n_features != pool.n_features:
        raise DataError("objectives and pool have different feature counts")
    n = len(objectives)
    nbr = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    use_keys = objective_keys is not None and pool_keys is not None
    if use_keys:
        objective_keys = np.asarray(objective_keys)
        pool_keys = np.asarray(pool_keys)
    for day in np.unique(objectives.day_index):
        rows = np.flatnonzero(objectives.day_index == day)
        window = np.abs(pool.day_index - day) <= day_window
        if not use_keys:
            candidates = np.flatnonzero(window)
            if candidates.size < k:
                raise CloudError(
                    f"day {day}: only {candidates.size} candidate(s) within window "
                    f"{day_window}, need k={k}"
                )
            nbr[rows], dist[rows] = _nearest(objectives.samples[rows], candidates, pool.samples, k)
            continue
        # group objectives sharing a key so each group sees one candidate set
        for key in np.unique(objective_keys[rows]):
            sub = rows[objective_keys[rows] == key]
            candidates = np.flatnonzero(window & (pool_keys != key))
            if candidates.size < k:
                raise CloudError(
                    f"day {day}: only {candidates.size} candidate(s) within window "
                    f"{day_window}, need k={k}"
                )
            nbr[sub], dist[sub] = _nearest(objectives.samples[sub], candidates, pool.samples, k)
    return CloudSet(nbr, dist)


def feature_weights(objective, neighbors, eps: float = WEIGHT_EPS) -> np.ndarray:
    """Inverse absolute per-feature distance, each column rescaled to max 1.

    ``objective`` is (p,) and ``neighbors`` (k, p); batched inputs of
    shape (n, p) and (n, k, p) are also accepted.
    """
    objective = np.asarray(objective, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    w = 1.0 / (np.abs(neighbors - objective[..., None, :]) + eps)
    return w / w.max(axis=-2, keepdims=True)


def assemble_ldf_input(
    cloud: NeighborhoodCloud,
    pool: Dataset,
    weights: np.ndarray,
    objective=None,
    objective_label: Optional[float] = None,
    objective_aux: Optional[float] = None,
) -> LdfInput:
    """Stack the objective and its weighted neighbors.

    By default the objective is ``pool`` row ``cloud.objective_index``;
    pass ``objective`` (features) and ``objective_label`` for an external one.
    """
    if objective is None:
        i = cloud.objective_index
        x = pool.samples[i]
        label = float(pool.labels[i])
        aux = None if pool.aux_labels is None else float(pool.aux_labels[i])
    else:
        x = np.asarray(objective, dtype=np.float64)
        label = float(objective_label) if objective_label is not None else 0.0
        aux = objective_aux
    nb = cloud.neighbor_indices
    k, p = nb.shape[0], pool.n_features
    if weights.shape != (k, p):
        raise DataError(f"weights have shape {weights.shape}, expected {(k, p)}")
    t = np.zeros((k + 1, p + 1))
    t[0, :p] = x
    t[1:, :p] = weights * pool.samples[nb]
    t[1:, p] = pool.labels[nb]
    return LdfInput(t, label, aux)


def assemble_batch(
    objectives_X: np.ndarray,
    objective_labels,
    clouds: CloudSet,
    pool_X: np.ndarray,
    pool_labels: np.ndarray,
    objective_aux=None,
    eps: float = WEIGHT_EPS,
) -> LdfBatch:
    """Weights plus assembly for every objective in one shot."""
    objectives_X = np.asarray(objectives_X, dtype=np.float64)
    n, p = objectives_X.shape
    if len(clouds) != n:
        raise DataError(f"{len(clouds)} clouds for {n} objectives")
    nbX = pool_X[clouds.neighbor_indices]  # (n, k, p)
    w = feature_weights(objectives_X, nbX, eps)
    T = np.zeros((n, clouds.k + 1, p + 1))
    T[:, 0, :p] = objectives_X
    T[:, 1:, :p] = w * nbX
    T[:, 1:, p] = np.asarray(pool_labels, dtype=np.float64)[clouds.neighbor_indices]
    labels = np.zeros(n) if objective_labels is None else np.asarray(objective_labels, float)
    aux = None if objective_aux is None else np.asarray(objective_aux, dtype=np.float64)
    return LdfBatch(T, labels, aux)


def write_cloud_index(path, clouds: CloudSet, objective_ids=None) -> None:
    """CSV with ``objective_id, neighbor_ids, distances`` (lists joined by ';')."""
    import csv

    ids = np.arange(len(clouds)) if objective_ids is None else np.asarray(objective_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["objective_id", "neighbor_ids", "distances"])
        for i in range(len(clouds)):
            w.writerow([
                int(ids[i]),
                ";".join(str(int(j)) for j in clouds.neighbor_indices[i]),
                ";".join(repr(float(d)) for d in clouds.distances[i]),
            ])
