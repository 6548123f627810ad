"""Synthetic source/target/grid data with known spatial structure.

Every smooth surface is a Gaussian random field realised as a truncated
random Fourier sum, so it can be evaluated anywhere (sensors or a dense
lattice) at the same cost.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import SOURCE, TARGET, Dataset, FeatureSchema

N_FOURIER = 64


@dataclass(frozen=True)
class SynthConfig:
    n_source_sensors: int = 60
    n_target_sensors: int = 40
    n_days: int = 20
    # (xmin, ymin, xmax, ymax)
    source_box: tuple = (0.0, 0.0, 2.0, 1.0)
    target_box: tuple = (2.2, 0.0, 3.2, 1.0)
    p_extra: int = 6
    spatial_length_scale: float = 0.5
    noise_std: float = 1.0
    feature_noise_std: float = 0.3
    shift_vector: Optional[tuple] = None
    label_fn_seed: int = 7
    aux_coupling: float = 0.7
    aux_length_scale: float = 0.05
    # None draws coefficients from label_fn_seed
    coefficients: Optional[tuple] = None
    nonlinear_strength: float = 1.0
    field_strength: float = 3.0
    label_offset: float = 12.0
    grid_resolution: int = 50

    def __post_init__(self):
        for name in ("n_source_sensors", "n_target_sensors", "n_days", "grid_resolution"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.p_extra < 0:
            raise ValueError("p_extra must be >= 0")
        for name in ("source_box", "target_box"):
            box = tuple(float(v) for v in getattr(self, name))
            if len(box) != 4 or box[2] <= box[0] or box[3] <= box[1]:
                raise ValueError(f"{name} must be a non-degenerate (xmin, ymin, xmax, ymax)")
            object.__setattr__(self, name, box)
        if not self.spatial_length_scale > 0 or not self.aux_length_scale > 0:
            raise ValueError("length scales must be > 0")
        if self.noise_std < 0 or self.feature_noise_std < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0.0 <= self.aux_coupling <= 1.0:
            raise ValueError("aux_coupling must lie in [0, 1]")
        if self.shift_vector is not None:
            sv = tuple(float(v) for v in self.shift_vector)
            if len(sv) != self.p_extra:
                raise ValueError(f"shift_vector needs {self.p_extra} entries")
            object.__setattr__(self, "shift_vector", sv)
        if self.coefficients is not None:
            cv = tuple(float(v) for v in self.coefficients)
            if len(cv) != self.p_extra:
                raise ValueError(f"coefficients needs {self.p_extra} entries")
            object.__setattr__(self, "coefficients", cv)

    @property
    def shift(self) -> np.ndarray:
        if self.shift_vector is None:
            return np.zeros(self.p_extra)
        return np.asarray(self.shift_vector, dtype=np.float64)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("source_box", "target_box", "shift_vector", "coefficients"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class RandomField:
    """Stationary unit-variance field with squared-exponential covariance."""

    omega: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, length_scale: float, n_terms: int = N_FOURIER):
        return cls(
            omega=rng.normal(0.0, 1.0 / length_scale, size=(n_terms, 2)),
            phase=rng.uniform(0.0, 2.0 * math.pi, size=n_terms),
            amplitude=rng.normal(size=n_terms),
        )

    def __call__(self, coords) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        arg = coords @ self.omega.T + self.phase
        return math.sqrt(2.0 / self.omega.shape[0]) * (np.cos(arg) @ self.amplitude)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.tolist(),
            "phase": self.phase.tolist(),
            "amplitude": self.amplitude.tolist(),
        }


@dataclass
class GroundTruth:
    """The fixed world behind a generated benchmark.

    The label of a row with extra features ``x`` at planar location ``s`` is
    ``offset + coef . x + nl * (x0 * x1 + q(s)^2) + field_strength * g(s)``
    plus Gaussian noise, where ``q`` is the latitude rescaled to [-1, 1]
    over the union of both boxes and ``g`` is ``label_field``.
    """

    config: SynthConfig
    coefficient_vector: np.ndarray
    feature_fields: list
    label_field: RandomField
    aux_field: RandomField
    lat_range: tuple
    label_mean: float = 0.0
    label_std: float = 1.0
    nonlinear_terms: list = field(default_factory=list)

    @classmethod
    def build(cls, config: SynthConfig) -> "GroundTruth":
        rng = np.random.default_rng(config.label_fn_seed)
        ls = config.spatial_length_scale
        feature_fields = [RandomField.sample(rng, ls) for _ in range(config.p_extra)]
        label_field = RandomField.sample(rng, ls)
        aux_field = RandomField.sample(rng, config.aux_length_scale)
        coef = rng.normal(0.0, 1.0, size=config.p_extra)
        if config.coefficients is not None:
            coef = np.asarray(config.coefficients, dtype=np.float64)
        ymin = min(config.source_box[1], config.target_box[1])
        ymax = max(config.source_box[3], config.target_box[3])
        terms = []
        if config.nonlinear_strength != 0.0:
            if config.p_extra >= 2:
                terms.append("product of extra features 0 and 1")
            terms.append("squared rescaled latitude")
        return cls(
            config=config,
            coefficient_vector=coef,
            feature_fields=feature_fields,
            label_field=label_field,
            aux_field=aux_field,
            lat_range=(ymin, ymax),
            nonlinear_terms=terms,
        )

    def features_at(self, coords, shift=None) -> np.ndarray:
        """Noise-free extra features at ``coords`` (n, 2)."""
        coords = np.atleast_2d(coords)
        cols = [f(coords) for f in self.feature_fields]
        F = np.column_stack(cols) if cols else np.zeros((coords.shape[0], 0))
        if shift is not None:
            F = F + shift
        return F

    def label_mean_fn(self, extra, coords) -> np.ndarray:
        """Noise-free label for extra-feature rows ``extra`` at ``coords``."""
        cfg = self.config
        extra = np.atleast_2d(extra)
        coords = np.atleast_2d(coords)
        y = cfg.label_offset + extra @ self.coefficient_vector
        nl = cfg.nonlinear_strength
        if nl != 0.0:
            if cfg.p_extra >= 2:
                y = y + nl * extra[:, 0] * extra[:, 1]
            lo, hi = self.lat_range
            q = 2.0 * (coords[:, 1] - lo) / (hi - lo) - 1.0
            y = y + nl * q**2
        if cfg.field_strength != 0.0:
            y = y + cfg.field_strength * self.label_field(coords)
        return y

    def aux_from(self, labels, coords) -> np.ndarray:
        a = self.config.aux_coupling
        z = (np.asarray(labels) - self.label_mean) / self.label_std
        return a * z + (1.0 - a) * self.aux_field(coords)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "coefficient_vector": self.coefficient_vector.tolist(),
            "nonlinear_terms": list(self.nonlinear_terms),
            "lat_range": list(self.lat_range),
            "label_standardization": {"mean": self.label_mean, "std": self.label_std},
            "latent_field_params": {
                "label_field": self.label_field.to_dict(),
                "aux_field": self.aux_field.to_dict(),
                "feature_fields": [f.to_dict() for f in self.feature_fields],
            },
        }


def feature_names(p_extra: int) -> tuple:
    return ("lon", "lat") + tuple(f"f{j}" for j in range(p_extra))


def default_schema(p_extra: int = SynthConfig.p_extra) -> FeatureSchema:
    return FeatureSchema(
        feature_names=feature_names(p_extra),
        coordinate_indices=(0, 1),
        label_name="pm25",
        aux_label_name="aod",
    )


def _uniform_in(box, n, rng) -> np.ndarray:
    xmin, ymin, xmax, ymax = box
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


def _sensor_rows(truth, cfg, coords, shift, first_id, rng):
    """Rows for every (sensor, day) pair, sensor-major."""
    n_s, n_d = coords.shape[0], cfg.n_days
    base = truth.features_at(coords, shift)
    sensor = np.repeat(np.arange(n_s), n_d)
    day = np.tile(np.arange(n_d), n_s)
    C = coords[sensor]
    extra = base[sensor] + cfg.feature_noise_std * rng.standard_normal((n_s * n_d, cfg.p_extra))
    y = truth.label_mean_fn(extra, C) + cfg.noise_std * rng.standard_normal(n_s * n_d)
    return np.column_stack([C, extra]), y, sensor + first_id, day, C


def generate(config: SynthConfig, seed: int):
    """Draw one benchmark world.

    Returns
    -------
    source, target, grid : Dataset
        ``grid`` is a ``grid_resolution`` x ``grid_resolution`` lattice over
        the target box with noise-free features. Its ``labels`` hold the
        noise-free ground-truth surface, for evaluation only.
    truth : GroundTruth
    """
    truth = GroundTruth.build(config)
    rng = np.random.default_rng(seed)
    names = feature_names(config.p_extra)

    src_coords = _uniform_in(config.source_box, config.n_source_sensors, rng)
    tgt_coords = _uniform_in(config.target_box, config.n_target_sensors, rng)
    Xs, ys, sid_s, day_s, Cs = _sensor_rows(truth, config, src_coords, None, 0, rng)
    Xt, yt, sid_t, day_t, Ct = _sensor_rows(
        truth, config, tgt_coords, config.shift, config.n_source_sensors, rng
    )

    all_y = np.concatenate([ys, yt])
    truth.label_mean = float(all_y.mean())
    truth.label_std = float(all_y.std()) or 1.0

    source = Dataset(
        samples=Xs, labels=ys, sensor_ids=sid_s, day_index=day_s, domain_tag=SOURCE,
        feature_names=names, aux_labels=truth.aux_from(ys, Cs), coords=Cs,
    )
    target = Dataset(
        samples=Xt, labels=yt, sensor_ids=sid_t, day_index=day_t, domain_tag=TARGET,
        feature_names=names, aux_labels=truth.aux_from(yt, Ct), coords=Ct,
    )

    r = config.grid_resolution
    xmin, ymin, xmax, ymax = config.target_box
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, r), np.linspace(ymin, ymax, r))
    Cg = np.column_stack([gx.ravel(), gy.ravel()])
    extra_g = truth.features_at(Cg, config.shift)
    yg = truth.label_mean_fn(extra_g, Cg)
    grid = Dataset(
        samples=np.column_stack([Cg, extra_g]), labels=yg,
        sensor_ids=np.arange(Cg.shape[0]) + config.n_source_sensors + config.n_target_sensors,
        day_index=np.zeros(Cg.shape[0], dtype=np.int64), domain_tag=TARGET,
        feature_names=names, aux_labels=truth.aux_from(yg, Cg), coords=Cg,
    )
    return source, target, grid, truth


def morans_i(coords, values) -> float:
    """Global Moran's I with inverse-distance weights and a zero diagonal."""
    coords = np.asarray(coords, dtype=np.float64)
    z = np.asarray(values, dtype=np.float64).reshape(-1)
    n = z.shape[0]
    if n < 3 or coords.shape != (n, 2):
        raise ValueError("need at least 3 points with matching (n, 2) coordinates")
    z = z - z.mean()
    denom = float(np.dot(z, z))
    if denom == 0.0:
        raise ValueError("Moran's I is undefined for constant values")
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    if np.any(d == 0.0):
        raise ValueError("duplicate coordinates make inverse-distance weights infinite")
    W = 1.0 / d
    return float(n / W.sum() * (z @ W @ z) / denom)


def sensor_means(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-sensor mean label and that sensor's coordinates."""
    ids, inv = np.unique(dataset.sensor_ids, return_inverse=True)
    sums = np.bincount(inv, weights=dataset.labels)
    counts = np.bincount(inv)
    coords = np.zeros((ids.size, 2))
    coords[inv] = dataset.coords
    return coords, sums / counts
