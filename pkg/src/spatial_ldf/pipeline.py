"""Experiment orchestration: splits, LDF imputation, reweighting, regression.

One *cell* is a (repeat, sensor_count) pair. Within a cell every roster
entry sees the same split, the same normalization and (per variant) the
same trained autoencoder, so scores are paired across models.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autoencoder as ae
from . import reweight as rw
from . import trees
from .data import (
    SOURCE,
    TARGET,
    DataError,
    Dataset,
    FeatureSchema,
    apply_normalizer,
    concat,
    fit_normalizer,
    load_csv,
    pearson,
    r_squared,
    rmse,
    split_by_sensor,
)
from .neighborhood import DEFAULT_K, assemble_batch, build_clouds
from .synthgen import SynthConfig, generate

ML_MODELS = ("RF", "GBR")
TRANSFER_MODELS = ("NNW", "KLIEP", "KMM")
MODELS = ML_MODELS + TRANSFER_MODELS + ("FNN",)
VARIANTS = ("plain", "LDF", "LDF-A")
LDF_COLUMN = "ldf"

# Reduced search space used by default; PAPER_GRIDS holds the full one.
DEFAULT_GRIDS = {
    "ml": {"n_estimators": [100], "max_depth": [4, 8, None], "max_leaf_nodes": [None], "learning_rate": [0.1]},
    "transfer": {"max_depth": [6, 8, None]},
    "nnw": {"n_neighbors": [6, 8, 10]},
    "kernel": {"kind": ["rbf"], "gamma": [0.1, 0.5, 1.0]},
}
PAPER_GRIDS = {
    "ml": {
        "n_estimators": [100, 400, 1000],
        "max_depth": [4, 8, None],
        "max_leaf_nodes": [4, 8, None],
        "learning_rate": [0.1, 0.5, 1.0],
    },
    "transfer": {"max_depth": [6, 8, None]},
    "nnw": {"n_neighbors": [6, 8, 10]},
    "kernel": {"kind": ["rbf", "poly"], "gamma": [0.1, 0.5, 1.0]},
}


class LeakageError(AssertionError):
    pass


def parse_entry(entry) -> tuple:
    """``"NNW[LDF]"`` or ``("NNW", "LDF")`` -> ``("NNW", "LDF")``."""
    if isinstance(entry, str):
        name, _, rest = entry.partition("[")
        variant = rest.rstrip("]") if rest else "plain"
        entry = (name.strip(), variant.strip())
    model, variant = entry
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if model in ML_MODELS and variant != "plain":
        raise ValueError(f"{model} is a target-only baseline and has no {variant} variant")
    return (model, variant)


def entry_label(model: str, variant: str) -> str:
    return model if variant == "plain" else f"{model}[{variant}]"


@dataclass(frozen=True)
class ExperimentConfig:
    roster: tuple = (("NNW", "plain"), ("NNW", "LDF"))
    sensor_counts: tuple = (5, 7, 9, 11)
    cv_repeats: int = 20
    samples_per_sensor: int = 20
    k_neighbors: int = DEFAULT_K
    day_window: int = 0
    master_seed: int = 0
    # data: a synthetic world, or a pair of CSV files
    synth: Optional[SynthConfig] = None
    synth_seed: int = 0
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    feature_names: Optional[tuple] = None
    label_name: str = "pm25"
    aux_label_name: Optional[str] = None
    coordinate_indices: tuple = (0, 1)
    # model search
    grids: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_GRIDS)))
    transfer_regressor: str = "tree"
    val_fraction: float = 0.2
    kliep_centers: int = 100
    kmm_B: float = 1000.0
    # autoencoder and FNN training
    ae_epochs: int = 40
    ae_batch_size: int = 64
    ae_learning_rate: float = 1e-3
    ae_alternation: str = "re"
    fnn_epochs: int = 100

    def __post_init__(self):
        object.__setattr__(self, "roster", tuple(parse_entry(e) for e in self.roster))
        object.__setattr__(self, "sensor_counts", tuple(int(s) for s in self.sensor_counts))
        if not self.roster:
            raise ValueError("roster must not be empty")
        if self.cv_repeats < 1:
            raise ValueError("cv_repeats must be >= 1")
        if not self.sensor_counts or min(self.sensor_counts) < 1:
            raise ValueError("sensor_counts must be a non-empty list of positive integers")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.transfer_regressor not in ("tree", "gbr"):
            raise ValueError("transfer_regressor must be 'tree' or 'gbr'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.synth is None and not (self.source_path and self.target_path):
            object.__setattr__(self, "synth", SynthConfig())
        if isinstance(self.synth, dict):
            object.__setattr__(self, "synth", SynthConfig.from_dict(self.synth))
        grids = json.loads(json.dumps(DEFAULT_GRIDS))
        for key, val in (self.grids or {}).items():
            grids.setdefault(key, {}).update(val)
        object.__setattr__(self, "grids", grids)

    @property
    def variants(self) -> tuple:
        return tuple(v for v in VARIANTS if any(e[1] == v for e in self.roster))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roster"] = [entry_label(m, v) for m, v in self.roster]
        d["sensor_counts"] = list(self.sensor_counts)
        d["synth"] = None if self.synth is None else self.synth.to_dict()
        d["feature_names"] = list(self.feature_names) if self.feature_names else None
        d["coordinate_indices"] = list(self.coordinate_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        if d.get("synth") is not None:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        for key in ("roster", "sensor_counts", "feature_names", "coordinate_indices"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        # relative data paths resolve against the config file
        base = Path(path).resolve().parent
        updates = {}
        for key in ("source_path", "target_path"):
            p = getattr(cfg, key)
            if p and not Path(p).is_absolute():
                updates[key] = str(base / p)
        return replace(cfg, **updates) if updates else cfg


def default_config_path() -> Path:
    return Path(__file__).with_name("configs") / "benchmark.json"


def load_domains(cfg: ExperimentConfig):
    """(source, target) datasets named by the config."""
    if cfg.source_path and cfg.target_path:
        if not cfg.feature_names:
            raise DataError("CSV experiments need feature_names in the config")
        schema = FeatureSchema(
            tuple(cfg.feature_names), tuple(cfg.coordinate_indices), cfg.label_name, cfg.aux_label_name
        )
        return load_csv(cfg.source_path, schema, SOURCE), load_csv(cfg.target_path, schema, TARGET)
    source, target, _, _ = generate(cfg.synth, cfg.synth_seed)
    return source, target


# -- seeds and leakage ---------------------------------------------------------------

_STREAMS = {"split": 1, "inner": 2, "LDF": 3, "LDF-A": 4}


def derive_seed(master_seed: int, *parts) -> int:
    """Deterministic 32-bit seed from the master seed and integer/str parts."""
    words = [int(master_seed)]
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
        else:
            words.append(int(p))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def domain_keys(ds: Dataset) -> np.ndarray:
    """Sensor ids qualified by domain, so equal ids in two domains differ."""
    return ds.sensor_ids.astype(np.int64) * 2 + (1 if ds.domain_tag == TARGET else 0)


def check_leakage(test: Dataset, **partitions) -> None:
    """Raise :class:`LeakageError` if a test sensor appears in any partition.

    Partitions are Datasets or arrays of domain keys.
    """
    held_out = set(domain_keys(test).tolist())
    for name, part in partitions.items():
        keys = domain_keys(part) if isinstance(part, Dataset) else np.asarray(part)
        bad = held_out.intersection(keys.tolist())
        if bad:
            raise LeakageError(f"test sensor key(s) {sorted(bad)[:5]} present in {name}")


# -- LDF featurizer ---------------------------------------------------------------


@dataclass
class LdfFeaturizer:
    """A trained autoencoder plus the pool its clouds are drawn from.

    ``transform`` imputes the standardized latent for external objectives
    (test rows, grids); pool rows get theirs from :func:`fit_ldf`.
    """

    model: ae.AutoencoderModel
    pool_X: np.ndarray
    pool_y: np.ndarray  # standardized labels
    pool_days: np.ndarray
    k: int
    day_window: int
    label_mean: float
    label_std: float
    latent_mean: float = 0.0
    latent_std: float = 1.0
    name: str = LDF_COLUMN
    history: Optional[ae.LossHistory] = None

    def _pool(self) -> Dataset:
        n = self.pool_X.shape[0]
        return Dataset(self.pool_X, self.pool_y, np.zeros(n), self.pool_days, SOURCE)

    def raw_latent(self, ds: Dataset) -> np.ndarray:
        if ds.n_features != self.pool_X.shape[1]:
            raise DataError(f"featurizer expects {self.pool_X.shape[1]} features, got {ds.n_features}")
        clouds = build_clouds(ds, self._pool(), self.k, self.day_window)
        batch = assemble_batch(ds.samples, None, clouds, self.pool_X, self.pool_y)
        return ae.encode_batch(self.model, batch)

    def transform(self, ds: Dataset) -> Dataset:
        z = (self.raw_latent(ds) - self.latent_mean) / self.latent_std
        return ds.append_feature(z, self.name)

    def to_dict(self) -> dict:
        return {
            "format": "spatial_ldf.featurizer",
            "version": 1,
            "arch": asdict(self.model.arch),
            "params": self.model.flat().tolist(),
            "pool_X": self.pool_X.tolist(),
            "pool_y": self.pool_y.tolist(),
            "pool_days": self.pool_days.tolist(),
            "k": self.k,
            "day_window": self.day_window,
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "latent_mean": self.latent_mean,
            "latent_std": self.latent_std,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LdfFeaturizer":
        if d.get("format") != "spatial_ldf.featurizer" or d.get("version") != 1:
            raise DataError("not an LDF featurizer dump")
        model = ae.AutoencoderModel.from_flat(ae.ArchConfig(**d["arch"]), d["params"])
        return cls(
            model,
            np.asarray(d["pool_X"], dtype=np.float64),
            np.asarray(d["pool_y"], dtype=np.float64),
            np.asarray(d["pool_days"], dtype=np.int64),
            int(d["k"]),
            int(d["day_window"]),
            float(d["label_mean"]),
            float(d["label_std"]),
            float(d["latent_mean"]),
            float(d["latent_std"]),
            d.get("name", LDF_COLUMN),
        )


def _standardize(v):
    mu = float(np.mean(v))
    sd = float(np.std(v))
    return mu, (sd if sd > 0 else 1.0)


def fit_ldf(
    parts,
    k: int = DEFAULT_K,
    variant: str = "LDF",
    seed: int = 0,
    train_cfg: Optional[ae.TrainConfig] = None,
    day_window: int = 0,
):
    """Train the autoencoder on the union of ``parts`` and impute each of them.

    Every part becomes an objective whose cloud comes from the pool of all
    parts, never from its own sensor. Labels (and aux labels for LDF-A)
    are standardized with pool statistics before assembly.

    Returns
    -------
    featurizer : LdfFeaturizer
    augmented : list of Dataset
        ``parts`` with the standardized latent appended.
    """
    if variant not in ("LDF", "LDF-A"):
        raise ValueError("variant must be 'LDF' or 'LDF-A'")
    parts = list(parts)
    pool = concat(parts, SOURCE)
    keys = np.concatenate([domain_keys(p) for p in parts])
    y_mu, y_sd = _standardize(pool.labels)
    ys = (pool.labels - y_mu) / y_sd
    aux = None
    if variant == "LDF-A":
        if pool.aux_labels is None:
            raise DataError("LDF-A needs aux labels on every training part")
        a_mu, a_sd = _standardize(pool.aux_labels)
        aux = (pool.aux_labels - a_mu) / a_sd
    clouds = build_clouds(pool, pool, k, day_window, keys, keys)
    batch = assemble_batch(pool.samples, ys, clouds, pool.samples, ys, aux)
    arch = ae.ArchConfig(k=k, p=pool.n_features, estimator_outputs=2 if variant == "LDF-A" else 1)
    train_cfg = train_cfg or ae.TrainConfig(seed=seed)
    model, hist = ae.train(ae.init_model(arch, seed), batch, train_cfg)
    z = ae.encode_batch(model, batch)
    z_mu, z_sd = _standardize(z)
    feat = LdfFeaturizer(
        model, pool.samples.copy(), ys, pool.day_index.copy(), k, day_window,
        y_mu, y_sd, z_mu, z_sd, LDF_COLUMN, hist,
    )
    zs = (z - z_mu) / z_sd
    out, start = [], 0
    for p in parts:
        out.append(p.append_feature(zs[start : start + len(p)], LDF_COLUMN))
        start += len(p)
    return feat, out


# -- regressors ------------------------------------------------------------------


@dataclass
class Fitted:
    """A trained regressor with a uniform ``predict``."""

    kind: str
    model: object
    feature_names: Optional[tuple] = None
    params: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        if self.kind == "fnn":
            return ae.predict_fnn(self.model, X)
        return trees.predict_ensemble(self.model, X)


def _tree_cfg(params) -> trees.TreeConfig:
    return trees.TreeConfig(max_depth=params.get("max_depth"), max_leaf_nodes=params.get("max_leaf_nodes"))


def fit_regressor(kind: str, X, y, w=None, params: Optional[dict] = None, seed: int = 0,
                  feature_names=None, fnn_epochs: int = 100) -> Fitted:
    """``kind`` is one of tree, gbr, rf, fnn."""
    params = dict(params or {})
    if kind == "tree":
        w_ = np.ones(len(y)) if w is None else np.asarray(w, dtype=np.float64)
        tree = trees.fit_tree(X, y, w_, _tree_cfg(params))
        base = float(np.dot(w_, y) / w_.sum())
        model = trees.Ensemble(base, [tree], 1.0, "rf", np.shape(X)[1])
    elif kind == "gbr":
        cfg = trees.EnsembleConfig(
            n_estimators=params.get("n_estimators", 100), learning_rate=params.get("learning_rate", 0.1), mode="gbr"
        )
        model = trees.fit_gbr(X, y, w, cfg, _tree_cfg(params))
    elif kind == "rf":
        cfg = trees.EnsembleConfig(n_estimators=params.get("n_estimators", 100), mode="rf", bootstrap_seed=seed)
        model = trees.fit_rf(X, y, w, cfg, _tree_cfg(params))
    elif kind == "fnn":
        model = ae.train_fnn(X, y, w, ae.TrainConfig(epochs=fnn_epochs, seed=seed))
    else:
        raise ValueError(f"unknown regressor kind {kind!r}")
    if feature_names is not None and kind != "fnn":
        model.feature_names = tuple(feature_names)
    return Fitted(kind, model, tuple(feature_names) if feature_names is not None else None, params)


def _grid(spec: dict, keys) -> list:
    keys = [k for k in keys if k in spec]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(spec[k] for k in keys))]


def source_weights(model: str, source: Dataset, target: Dataset, params: dict, cfg: ExperimentConfig) -> rw.WeightVector:
    if model == "NNW":
        return rw.nnw_weights(source, target, min(params["n_neighbors"], len(source)))
    kcfg = rw.KernelConfig(kind=params.get("kind", "rbf"), gamma=params["gamma"])
    if model == "KLIEP":
        return rw.kliep_weights(source, target, kcfg, n_centers=cfg.kliep_centers)
    if model == "KMM":
        return rw.kmm_weights(source, target, kcfg, B=cfg.kmm_B)
    raise ValueError(f"{model} is not a reweighting model")


def _inner_split(train: Dataset, frac: float, seed: int):
    """Hold out ``frac`` of the training sensors (at least one) for validation."""
    sensors = np.unique(train.sensor_ids)
    if sensors.size < 2:
        return None
    rng = np.random.default_rng(seed)
    n_val = min(sensors.size - 1, max(1, int(round(frac * sensors.size))))
    val = rng.permutation(sensors)[:n_val]
    mask = np.isin(train.sensor_ids, val)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def _val_mse(fitted: Fitted, X, y) -> float:
    return float(np.mean((fitted.predict(X) - y) ** 2))


def fit_entry(model: str, source: Dataset, train: Dataset, cfg: ExperimentConfig, seed: int) -> Fitted:
    """Select hyperparameters on an inner sensor split, then refit on all data.

    ML baselines train on ``train`` only; transfer models and FNN train on
    source plus ``train``, with source rows weighted by the chosen method.
    """
    grids = cfg.grids
    inner = _inner_split(train, cfg.val_fraction, derive_seed(seed, "inner"))
    names = train.feature_names

    if model in ML_MODELS:
        kind = model.lower()
        keys = ("n_estimators", "max_depth", "max_leaf_nodes") + (("learning_rate",) if kind == "gbr" else ())
        cands = _grid(grids["ml"], keys)
        best = cands[0]
        if len(cands) > 1 and inner is not None:
            tr, va = inner
            scores = [
                _val_mse(fit_regressor(kind, train.samples[tr], train.labels[tr], None, c, seed), train.samples[va], train.labels[va])
                for c in cands
            ]
            best = cands[int(np.argmin(scores))]
        return fit_regressor(kind, train.samples, train.labels, None, best, seed, names)

    X = np.vstack([source.samples, train.samples])
    y = np.concatenate([source.labels, train.labels])
    m = len(source)
    if model == "FNN":
        fitted = fit_regressor("fnn", X, y, None, {}, seed, names, cfg.fnn_epochs)
        fitted.params["n_train_rows"] = X.shape[0]
        return fitted

    wgrid = _grid(grids["nnw"], ("n_neighbors",)) if model == "NNW" else _grid(grids["kernel"], ("kind", "gamma"))
    if cfg.transfer_regressor == "tree":
        rgrid = _grid(grids["transfer"], ("max_depth",))
    else:
        rgrid = [dict(c, **{"max_depth": d}) for c in _grid(grids["ml"], ("n_estimators", "learning_rate"))
                 for d in grids["transfer"]["max_depth"]]
    # weights use target features only (no labels), computed once per setting
    weights = [source_weights(model, source, train, wp, cfg).weights for wp in wgrid]
    best = (0, 0)
    if len(wgrid) * len(rgrid) > 1 and inner is not None:
        tr, va = inner
        Xi = np.vstack([source.samples, train.samples[tr]])
        yi = np.concatenate([source.labels, train.labels[tr]])
        scores = {}
        for (i, w), (j, rp) in itertools.product(enumerate(weights), enumerate(rgrid)):
            wi = np.concatenate([w, np.ones(tr.size)])
            f = fit_regressor(cfg.transfer_regressor, Xi, yi, wi, rp, seed)
            scores[(i, j)] = _val_mse(f, train.samples[va], train.labels[va])
        best = min(scores, key=lambda ij: (scores[ij], ij))
    w = np.concatenate([weights[best[0]], np.ones(len(train))])
    if X.shape[0] != m + len(train) or w.shape[0] != X.shape[0]:
        raise AssertionError("combined training set must have m + n_train rows")
    fitted = fit_regressor(cfg.transfer_regressor, X, y, w, rgrid[best[1]], seed, names)
    fitted.params.update(wgrid[best[0]])
    fitted.params["n_train_rows"] = X.shape[0]
    return fitted


# -- results ------------------------------------------------------------------------


@dataclass
class ResultTable:
    """Per-repeat scores keyed by (model, variant, sensor_count)."""

    scores: dict = field(default_factory=dict)  # key -> list of (r2, rmse)
    cells: list = field(default_factory=list)  # per-cell diagnostics

    def add(self, model, variant, sensor_count, r2, err) -> None:
        self.scores.setdefault((model, variant, int(sensor_count)), []).append((float(r2), float(err)))

    def keys(self) -> list:
        return sorted(self.scores, key=lambda k: (k[2], MODELS.index(k[0]), VARIANTS.index(k[1])))

    def row(self, model, variant, sensor_count) -> dict:
        key = (model, variant, int(sensor_count))
        if key not in self.scores:
            raise KeyError(f"no results for {entry_label(model, variant)} at {sensor_count} sensors")
        s = np.array(self.scores[key])
        return {
            "model": model,
            "variant": variant,
            "sensor_count": int(sensor_count),
            "n_repeats": int(s.shape[0]),
            "r2_mean": float(s[:, 0].mean()),
            "r2_std": float(s[:, 0].std()),
            "rmse_mean": float(s[:, 1].mean()),
            "rmse_std": float(s[:, 1].std()),
        }

    def rows(self) -> list:
        rows = [self.row(*k) for k in self.keys()]
        # rank 1 = best mean R2 within a sensor count (2 = runner-up)
        for s in sorted({r["sensor_count"] for r in rows}):
            group = [r for r in rows if r["sensor_count"] == s]
            for rank, r in enumerate(sorted(group, key=lambda r: -r["r2_mean"]), start=1):
                r["r2_rank"] = rank
        index = {(r["model"], r["variant"], r["sensor_count"]): r for r in rows}
        for r in rows:
            plain = index.get((r["model"], "plain", r["sensor_count"]))
            if r["variant"] != "plain" and plain is not None and plain["r2_mean"] != 0:
                r["r2_rel_gain"] = (r["r2_mean"] - plain["r2_mean"]) / abs(plain["r2_mean"])
            else:
                r["r2_rel_gain"] = None
        return rows

    def mean_r2(self, model, variant, sensor_count) -> float:
        return self.row(model, variant, sensor_count)["r2_mean"]

    COLUMNS = ("model", "variant", "sensor_count", "n_repeats", "r2_mean", "r2_std",
               "rmse_mean", "rmse_std", "r2_rank", "r2_rel_gain")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows():
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in self.COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def format(self) -> str:
        lines = [f"{'model':<14}{'n':>4}{'R2':>9}{'±':>8}{'RMSE':>9}{'±':>8}{'rank':>6}"]
        for r in self.rows():
            lines.append(
                f"{entry_label(r['model'], r['variant']):<14}{r['sensor_count']:>4}"
                f"{r['r2_mean']:>9.3f}{r['r2_std']:>8.3f}{r['rmse_mean']:>9.3f}{r['rmse_std']:>8.3f}{r['r2_rank']:>6}"
            )
        return "\n".join(lines)

    def same_scores(self, other: "ResultTable") -> bool:
        return self.scores == other.scores


def prepare_split(source: Dataset, target: Dataset, sensor_count: int, cfg: ExperimentConfig, repeat: int):
    """Seeded sensor split plus normalization fitted on source and target-train."""
    seed = derive_seed(cfg.master_seed, _STREAMS["split"], repeat, sensor_count)
    train, test = split_by_sensor(target, sensor_count, cfg.samples_per_sensor, seed)
    if len(test) == 0:
        raise DataError(f"{sensor_count} training sensors leave no test sensors")
    check_leakage(test, target_train=train, normalizer_fit=np.concatenate([domain_keys(source), domain_keys(train)]))
    stats = fit_normalizer([source, train])
    return tuple(apply_normalizer(d, stats) for d in (source, train, test)) + (stats,)


def ldf_train_config(cfg: ExperimentConfig, seed: int) -> ae.TrainConfig:
    return ae.TrainConfig(
        epochs=cfg.ae_epochs, batch_size=cfg.ae_batch_size, learning_rate=cfg.ae_learning_rate,
        seed=seed, alternation=cfg.ae_alternation,
    )


def augment_cell(source, train, test, variant: str, cfg: ExperimentConfig, repeat: int, sensor_count: int):
    """Train the cell's autoencoder and return (featurizer, source, train, test) with LDF."""
    seed = derive_seed(cfg.master_seed, _STREAMS[variant], repeat, sensor_count)
    check_leakage(test, autoencoder_pool=np.concatenate([domain_keys(source), domain_keys(train)]))
    feat, (s_aug, t_aug) = fit_ldf(
        [source, train], cfg.k_neighbors, variant, seed, ldf_train_config(cfg, seed), cfg.day_window
    )
    return feat, s_aug, t_aug, feat.transform(test)


def _context(exc: Exception, what: str) -> Exception:
    cls = type(exc)
    if cls in (DataError, ae.DivergenceError, rw.ReweightError, LeakageError, ValueError):
        new = cls(f"{what}: {exc}")
        new.__cause__ = exc
        return new
    return exc


def run_experiment(cfg: ExperimentConfig, progress=None, domains=None) -> ResultTable:
    """Cross-validated evaluation of every roster entry at every sensor count."""
    source, target = domains if domains is not None else load_domains(cfg)
    table = ResultTable()
    for s in cfg.sensor_counts:
        for r in range(cfg.cv_repeats):
            t0 = time.perf_counter()
            cell = {"repeat": r, "sensor_count": s}
            try:
                S, T, E, _ = prepare_split(source, target, s, cfg, r)
            except Exception as exc:
                raise _context(exc, f"split (repeat {r}, sensor_count {s})") from exc
            cell["leakage_checked"] = True
            parts = {"plain": (S, T, E)}
            for variant in cfg.variants:
                if variant == "plain":
                    continue
                try:
                    feat, Sa, Ta, Ea = augment_cell(S, T, E, variant, cfg, r, s)
                except Exception as exc:
                    raise _context(exc, f"{variant} autoencoder (repeat {r}, sensor_count {s})") from exc
                parts[variant] = (Sa, Ta, Ea)
                cell[f"corr_{variant}_test"] = pearson(Ea.samples[:, -1], Ea.labels)
            for model, variant in cfg.roster:
                Sx, Tx, Ex = parts[variant]
                seed = derive_seed(cfg.master_seed, entry_label(model, variant), r, s)
                try:
                    fitted = fit_entry(model, Sx, Tx, cfg, seed)
                    pred = fitted.predict(Ex.samples)
                except Exception as exc:
                    raise _context(exc, f"{entry_label(model, variant)} (repeat {r}, sensor_count {s})") from exc
                table.add(model, variant, s, r_squared(Ex.labels, pred), rmse(Ex.labels, pred))
            cell["seconds"] = time.perf_counter() - t0
            table.cells.append(cell)
            if progress is not None:
                progress(cell)
    return table


def ablate_k(cfg: ExperimentConfig, k_values, entry=("NNW", "LDF"), progress=None, domains=None) -> dict:
    """One :func:`run_experiment` per neighborhood size, NNW[LDF] only."""
    domains = domains if domains is not None else load_domains(cfg)
    out = {}
    for k in k_values:
        sub = replace(cfg, roster=(parse_entry(entry),), k_neighbors=int(k))
        out[int(k)] = run_experiment(sub, progress, domains)
    return out


def ablation_csv(results: dict, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("k",) + ResultTable.COLUMNS[:-2])
    for k, table in results.items():
        for r in table.rows():
            w.writerow([k] + [repr(r[c]) if isinstance(r[c], float) else r[c] for c in ResultTable.COLUMNS[:-2]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def correlation_report(augmented: Dataset) -> list:
    """(feature, Pearson correlation with the label), largest magnitude first.

    A constant column reports 0.
    """
    pairs = [(name, pearson(augmented.samples[:, j], augmented.labels)) for j, name in enumerate(augmented.feature_names)]
    return sorted(pairs, key=lambda t: -abs(t[1]))


def grid_predict(model, grid: Dataset, out=None, coords=None) -> np.ndarray:
    """Predict every grid row and write ``x, y, prediction`` rows to ``out``."""
    names = getattr(model, "feature_names", None)
    inner = getattr(model, "model", model)
    n_feat = getattr(inner, "n_features", None)
    if n_feat is not None and grid.n_features != n_feat:
        raise DataError(f"model expects {n_feat} features, grid has {grid.n_features}")
    if names and tuple(names) != tuple(grid.feature_names):
        raise DataError(f"grid columns {grid.feature_names} differ from the model's {tuple(names)}")
    pred = model.predict(grid.samples) if hasattr(model, "predict") else trees.predict_ensemble(model, grid.samples)
    xy = grid.coords if coords is None else np.asarray(coords, dtype=np.float64)
    if out is not None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "prediction"])
            for (x, y), p in zip(xy, pred):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(p))])
    return pred


def write_manifest(path, cfg: ExperimentConfig, table: Optional[ResultTable] = None, extra: Optional[dict] = None) -> dict:
    from . import __version__

    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "master_seed": cfg.master_seed,
        "synth_seed": cfg.synth_seed,
        "config": cfg.to_dict(),
    }
    if table is not None:
        manifest["cells"] = table.cells
        manifest["total_seconds"] = float(sum(c.get("seconds", 0.0) for c in table.cells))
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, default=_json_default), encoding="utf-8")
    return manifest


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    raise TypeError(f"cannot serialize {type(o).__name__}")
