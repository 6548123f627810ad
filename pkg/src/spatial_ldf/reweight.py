"""Importance weights for source samples: NNW, KLIEP and KMM.

All three return a :class:`WeightVector` aligned with the source rows
and scaled to mean one (exactly for NNW and KLIEP, within the sum
band for KMM).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import DataError, Dataset

METHODS = ("NNW", "KLIEP", "KMM", "uniform")


class ReweightError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    method_tag: str = "uniform"
    history: tuple = ()  # objective per accepted iteration (iterative methods)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ReweightError("weights must be a finite nonnegative vector")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.method_tag not in METHODS:
            raise ValueError(f"unknown method tag {self.method_tag!r}")

    def __len__(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, m: int) -> "WeightVector":
        return cls(np.ones(m), "uniform")


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "rbf"
    gamma: float = 0.5
    degree: int = 2
    coef0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "poly"):
            raise ValueError("kernel kind must be 'rbf' or 'poly'")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")


def _matrix(x) -> np.ndarray:
    if isinstance(x, Dataset):
        return x.samples
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _sq_dists(A, B) -> np.ndarray:
    """Exact pairwise squared Euclidean distances (no expansion trick)."""
    out = np.empty((A.shape[0], B.shape[0]))
    step = max(1, 2_000_000 // max(1, B.shape[0] * A.shape[1]))
    for s in range(0, A.shape[0], step):
        d = A[s : s + step, None, :] - B[None, :, :]
        out[s : s + step] = np.einsum("ijk,ijk->ij", d, d)
    return out


def kernel_eval(x, y, cfg: KernelConfig) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if cfg.kind == "rbf":
        return math.exp(-cfg.gamma * float(np.dot(x - y, x - y)))
    return (cfg.gamma * float(np.dot(x, y)) + cfg.coef0) ** cfg.degree


def kernel_matrix(A, B, cfg: KernelConfig) -> np.ndarray:
    A, B = _matrix(A), _matrix(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if cfg.kind == "rbf":
        return np.exp(-cfg.gamma * _sq_dists(A, B))
    return (cfg.gamma * (A @ B.T) + cfg.coef0) ** cfg.degree


# -- NNW ----------------------------------------------------------------------


def nearest_counts(source, target, n_neighbors: int) -> np.ndarray:
    """How often each source row is among a target row's nearest sources."""
    Xs, Xt = _matrix(source), _matrix(target)
    m = Xs.shape[0]
    if not 1 <= n_neighbors <= m:
        raise DataError(f"n_neighbors={n_neighbors} needs 1 <= n_neighbors <= m={m}")
    if Xt.shape[0] < 1:
        raise DataError("target is empty")
    d = _sq_dists(Xt, Xs)
    # stable sort: equal distances resolve to the lower source index
    nearest = np.argsort(d, axis=1, kind="stable")[:, :n_neighbors]
    return np.bincount(nearest.ravel(), minlength=m)


def nnw_weights(source, target, n_neighbors: int = 1) -> WeightVector:
    """Nearest-neighbor (Voronoi-count) weighting.

    Each target row votes for its ``n_neighbors`` nearest source rows;
    ``w_i = count_i * m / (n * n_neighbors)`` so the weights average one.
    ``n_neighbors=1`` is plain Voronoi-cell counting.
    """
    counts = nearest_counts(source, target, n_neighbors)
    m, n = counts.shape[0], _matrix(target).shape[0]
    return WeightVector(counts * (m / (n * n_neighbors)), "NNW")


# -- KLIEP ----------------------------------------------------------------------


def kliep_weights(
    source,
    target,
    cfg: KernelConfig = KernelConfig(),
    n_centers: int = 100,
    max_iter: int = 5000,
    tol: float = 1e-9,
) -> WeightVector:
    """KL importance estimation by projected gradient ascent.

    The density ratio is ``r(x) = sum_j alpha_j K(x, c_j)`` with centers
    ``c_j`` the first ``min(n_centers, n)`` target rows. Maximises the mean
    log ratio over target rows subject to ``alpha >= 0`` and a source mean
    ratio of one. A step is accepted only if it does not lower the
    objective; rejected steps halve the step size.
    """
    Xs, Xt = _matrix(source), _matrix(target)
    m, n = Xs.shape[0], Xt.shape[0]
    if m < 1 or n < 1:
        raise DataError("source and target must be non-empty")
    if cfg.kind == "poly" and cfg.degree % 2:
        raise ValueError("KLIEP needs a nonnegative kernel; use an even polynomial degree")
    centers = Xt[: min(n_centers, n)]
    A = kernel_matrix(Xt, centers, cfg)  # (n, b)
    Ks = kernel_matrix(Xs, centers, cfg)  # (m, b)
    b = Ks.mean(axis=0)
    if not np.all(np.isfinite(A)) or b.sum() <= 0:
        raise ReweightError("degenerate kernel matrix")

    def objective(alpha):
        with np.errstate(divide="ignore"):
            return float(np.mean(np.log(A @ alpha)))

    def normalize(alpha):
        return alpha / float(b @ alpha)

    alpha = normalize(np.ones(A.shape[1]))
    obj = objective(alpha)
    if not math.isfinite(obj):
        raise ReweightError("KLIEP objective is not finite at the starting point")
    history = [obj]
    bb = float(b @ b)
    grad = A.T @ (1.0 / (A @ alpha)) / n
    lr = 0.1 * np.linalg.norm(alpha) / max(np.linalg.norm(grad), 1e-300)
    for _ in range(max_iter):
        cand = alpha + lr * grad
        cand = cand + (1.0 - b @ cand) * b / bb
        cand = np.maximum(cand, 0.0)
        if not np.any(cand > 0):
            lr *= 0.5
            continue
        cand = normalize(cand)
        new = objective(cand)
        if math.isfinite(new) and new >= obj:
            converged = new - obj < tol
            alpha, obj = cand, new
            history.append(obj)
            grad = A.T @ (1.0 / (A @ alpha)) / n
            lr *= 1.5
            if converged:
                break
        else:
            lr *= 0.5
            if lr < 1e-300:
                break
    if not math.isfinite(obj):
        raise ReweightError("KLIEP objective became non-finite")
    w = Ks @ alpha
    # exact mean one up to rounding
    w = w / w.mean()
    return WeightVector(np.maximum(w, 0.0), "KLIEP", tuple(history))


# -- KMM ----------------------------------------------------------------------


def default_kmm_eps(m: int) -> float:
    return (math.sqrt(m) - 1.0) / math.sqrt(m)


def project_box_band(v, B: float, lo: float, hi: float, iters: int = 200) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= B, lo <= sum(w) <= hi}``.

    Clip to the box; if the sum leaves the band, shift every coordinate by
    the scalar found by bisection before clipping again.
    """
    w = np.clip(v, 0.0, B)
    s = w.sum()
    if lo <= s <= hi:
        return w
    goal = lo if s < lo else hi
    # sum(clip(v - tau)) is nonincreasing in tau
    t_lo, t_hi = float(np.min(v) - B), float(np.max(v))
    for _ in range(iters):
        tau = 0.5 * (t_lo + t_hi)
        if np.clip(v - tau, 0.0, B).sum() > goal:
            t_lo = tau
        else:
            t_hi = tau
    # t_lo keeps the sum above the goal, t_hi keeps it at or below
    return np.clip(v - (t_lo if goal == lo else t_hi), 0.0, B)


def kmm_objective(w, K, kappa) -> float:
    return float(0.5 * w @ K @ w - kappa @ w)


@dataclass
class QPResult:
    w: np.ndarray
    history: list = field(default_factory=list)
    n_iter: int = 0


def solve_kmm_qp(K, kappa, B: float, eps: float, max_iter: int = 2000, tol: float = 1e-9, w0=None) -> QPResult:
    """Projected gradient descent on ``0.5 w'Kw - kappa'w``.

    Feasible set ``0 <= w <= B`` and ``|sum(w) - m| <= m * eps``. The step
    is ``1/L`` with ``L`` the largest absolute row sum of ``K``, an upper
    bound on its spectral radius, so every step is a descent step.
    """
    K = np.asarray(K, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    m = K.shape[0]
    lo, hi = m * (1.0 - eps), m * (1.0 + eps)
    L = float(np.max(np.abs(K).sum(axis=1)))
    if not L > 0:
        raise ReweightError("kernel matrix is zero")
    w = project_box_band(np.ones(m) if w0 is None else np.asarray(w0, float), B, lo, hi)
    Kw = K @ w
    obj = float(0.5 * w @ Kw - kappa @ w)
    if not math.isfinite(obj):
        raise ReweightError("KMM objective is not finite")
    hist = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        w_new = project_box_band(w - (Kw - kappa) / L, B, lo, hi)
        Kw_new = K @ w_new
        new = float(0.5 * w_new @ Kw_new - kappa @ w_new)
        if not math.isfinite(new):
            raise ReweightError("KMM objective became non-finite")
        done = abs(obj - new) <= tol * max(1.0, abs(obj))
        w, Kw, obj = w_new, Kw_new, new
        hist.append(obj)
        if done:
            break
    return QPResult(w, hist, it)


def kmm_weights(
    source,
    target,
    cfg: KernelConfig = KernelConfig(),
    B: float = 1000.0,
    eps: Optional[float] = None,
    max_iter: int = 2000,
    tol: float = 1e-9,
) -> WeightVector:
    """Kernel mean matching.

    Minimises ``0.5 w'K_ss w - kappa'w`` with
    ``kappa_i = (m/n) sum_j k(x_i, t_j)``, ``0 <= w <= B`` and
    ``|sum(w) - m| <= m * eps``; ``eps`` defaults to ``(sqrt(m)-1)/sqrt(m)``.
    """
    Xs, Xt = _matrix(source), _matrix(target)
    m, n = Xs.shape[0], Xt.shape[0]
    if m < 1 or n < 1:
        raise DataError("source and target must be non-empty")
    if not B > 0:
        raise ValueError("B must be > 0")
    eps = default_kmm_eps(m) if eps is None else float(eps)
    K = kernel_matrix(Xs, Xs, cfg)
    kappa = (m / n) * kernel_matrix(Xs, Xt, cfg).sum(axis=1)
    res = solve_kmm_qp(K, kappa, B, eps, max_iter, tol)
    return WeightVector(res.w, "KMM", tuple(res.history))
