"""Command-line interface: ``spatial-ldf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autoencoder as ae
from . import pipeline as pl
from . import reweight as rw
from .data import (
    SOURCE,
    TARGET,
    DataError,
    NormStats,
    apply_normalizer,
    fit_normalizer,
    load_csv,
    r_squared,
    rmse,
    schema_from_csv,
    write_csv,
)
from .neighborhood import build_clouds, write_cloud_index
from .synthgen import SynthConfig, default_schema, generate
from .trees import Ensemble

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _depth(text: str):
    return None if text.lower() in ("none", "inf") else int(text)


def _load(path, args, domain=TARGET, label_optional=False, schema=None):
    schema = schema or schema_from_csv(path, args.label, args.aux, args.coords.split(",") if args.coords else None)
    return load_csv(path, schema, domain, label_optional=label_optional), schema


def _data_flags(p):
    p.add_argument("--label", default="pm25", help="label column (default pm25)")
    p.add_argument("--aux", default=None, help="auxiliary label column, e.g. aod")
    p.add_argument("--coords", default=None, help="coordinate columns as 'x,y' (default: first two features)")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _norm_dict(stats: NormStats) -> dict:
    return {"mean": stats.mean.tolist(), "std": stats.std.tolist()}


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = SynthConfig()
    if args.config:
        cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target, grid, truth = generate(cfg, args.seed)
    schema = default_schema(cfg.p_extra)
    for name, ds in (("source", source), ("target", target), ("grid", grid)):
        write_csv(out / f"{name}.csv", ds, schema.label_name, schema.aux_label_name)
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    (out / "truth.json").write_text(json.dumps(truth.to_dict()), encoding="utf-8")
    print(f"wrote {len(source)} source, {len(target)} target and {len(grid)} grid rows to {out}")
    return EXIT_OK


def cmd_cloud(args) -> int:
    pool, schema = _load(args.pool, args, SOURCE)
    stats = fit_normalizer([pool])
    pool_n = apply_normalizer(pool, stats)
    if args.objectives:
        obj, _ = _load(args.objectives, args, TARGET, label_optional=True, schema=schema)
        clouds = build_clouds(apply_normalizer(obj, stats), pool_n, args.k, args.day_window)
    else:
        keys = pl.domain_keys(pool_n)
        clouds = build_clouds(pool_n, pool_n, args.k, args.day_window, keys, keys)
    write_cloud_index(args.out, clouds)
    print(f"wrote {len(clouds)} clouds (k={args.k}) to {args.out}")
    return EXIT_OK


def _ldf_blob(feat: pl.LdfFeaturizer, stats: NormStats, schema, variant: str) -> dict:
    blob = feat.to_dict()
    blob.update(norm=_norm_dict(stats), feature_names=list(schema.feature_names), variant=variant)
    return blob


def _ldf_load(path):
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    feat = pl.LdfFeaturizer.from_dict(blob)
    stats = NormStats(np.asarray(blob["norm"]["mean"]), np.asarray(blob["norm"]["std"]))
    return feat, stats, tuple(blob["feature_names"])


def cmd_ldf_train(args) -> int:
    source, schema = _load(args.source, args, SOURCE)
    target, _ = _load(args.target, args, TARGET, schema=schema)
    stats = fit_normalizer([source, target])
    parts = [apply_normalizer(d, stats) for d in (source, target)]
    tcfg = ae.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                          seed=args.seed, alternation=args.alternation)
    feat, _ = pl.fit_ldf(parts, args.k, args.variant, args.seed, tcfg, args.day_window)
    Path(args.out).write_text(json.dumps(_ldf_blob(feat, stats, schema, args.variant)), encoding="utf-8")
    last = {s: feat.history.stage_losses(s)[-1] for s in (ae.RECON, ae.ESTIM)}
    print(f"trained {args.variant} autoencoder on {sum(map(len, parts))} objectives; final losses {last}")
    return EXIT_OK


def cmd_ldf_impute(args) -> int:
    feat, stats, names = _ldf_load(args.model)
    ds, schema = _load(args.data, args, TARGET, label_optional=True)
    if tuple(schema.feature_names) != names:
        raise DataError(f"{args.data}: columns {schema.feature_names} differ from the model's {names}")
    z = feat.transform(apply_normalizer(ds, stats)).samples[:, -1]
    out = ds.append_feature(z, feat.name)
    write_csv(args.out, out, schema.label_name, schema.aux_label_name)
    print(f"imputed '{feat.name}' for {len(ds)} rows into {args.out}")
    return EXIT_OK


def cmd_reweight(args) -> int:
    source, schema = _load(args.source, args, SOURCE)
    target, _ = _load(args.target, args, TARGET, label_optional=True, schema=schema)
    if not args.no_normalize:
        stats = fit_normalizer([source, target])
        source, target = apply_normalizer(source, stats), apply_normalizer(target, stats)
    if args.method == "nnw":
        wv = rw.nnw_weights(source, target, args.n_neighbors)
    else:
        kcfg = rw.KernelConfig(kind=args.kernel, gamma=args.gamma, degree=args.degree)
        if args.method == "kliep":
            wv = rw.kliep_weights(source, target, kcfg, n_centers=args.n_centers)
        else:
            wv = rw.kmm_weights(source, target, kcfg, B=args.B, eps=args.eps)
    _write_rows(args.out, ["source_row", "weight"], [(i, repr(float(w))) for i, w in enumerate(wv.weights)])
    print(f"{wv.method_tag}: {len(wv)} weights, mean {wv.weights.mean():.6f}, max {wv.weights.max():.4f}")
    return EXIT_OK


def _read_weights(path, n: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        idx = np.array([int(r["source_row"]) for r in rows])
        w = np.array([float(r["weight"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected columns source_row, weight ({exc})") from None
    if idx.shape[0] != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise DataError(f"{path}: need exactly one weight per source row ({n})")
    out = np.empty(n)
    out[idx] = w
    return out


def cmd_train(args) -> int:
    target, schema = _load(args.target, args, TARGET)
    X, y, w = target.samples, target.labels, np.ones(len(target))
    if args.source:
        source, _ = _load(args.source, args, SOURCE, schema=schema)
        ws = _read_weights(args.weights, len(source)) if args.weights else np.ones(len(source))
        X = np.vstack([source.samples, X])
        y = np.concatenate([source.labels, y])
        w = np.concatenate([ws, w])
    elif args.weights:
        raise UsageError("--weights applies to source rows and needs --source")
    params = {"n_estimators": args.n_estimators, "max_depth": args.max_depth,
              "max_leaf_nodes": args.max_leaf_nodes, "learning_rate": args.learning_rate}
    fitted = pl.fit_regressor(args.model, X, y, w, params, args.seed, schema.feature_names)
    fitted.model.save(args.out)
    print(f"trained {args.model} on {X.shape[0]} rows x {X.shape[1]} features -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = Ensemble.load(args.model)
    ds, schema = _load(args.data, args, TARGET, label_optional=True)
    pred = pl.grid_predict(model, ds)
    _write_rows(args.out, ["row", "prediction"], [(i, repr(float(p))) for i, p in enumerate(pred)])
    msg = f"wrote {len(pred)} predictions to {args.out}"
    if schema.label_name in _header(args.data):
        msg += f"; R2 {r_squared(ds.labels, pred):.4f}, RMSE {rmse(ds.labels, pred):.4f}"
    print(msg)
    return EXIT_OK


def _header(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh))]


def _experiment_config(args) -> pl.ExperimentConfig:
    cfg = pl.ExperimentConfig.load(args.config or pl.default_config_path())
    updates = {}
    if args.repeats is not None:
        updates["cv_repeats"] = args.repeats
    if args.sensor_counts:
        updates["sensor_counts"] = tuple(args.sensor_counts)
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if getattr(args, "roster", None):
        updates["roster"] = tuple(r.strip() for r in args.roster.split(","))
    return replace(cfg, **updates) if updates else cfg


def _progress(quiet):
    if quiet:
        return None

    def report(cell):
        print(f"  sensors {cell['sensor_count']:>3} repeat {cell['repeat']:>3}  {cell['seconds']:.1f}s", file=sys.stderr)

    return report


def cmd_bench(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    table = pl.run_experiment(cfg, _progress(args.quiet))
    table.to_csv(out / "results.csv")
    pl.write_manifest(out / "manifest.json", cfg, table, {"wall_seconds": time.perf_counter() - t0})
    print(table.format())
    return EXIT_OK


def cmd_ablate_k(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = pl.ablate_k(cfg, args.k, pl.parse_entry(args.entry), _progress(args.quiet))
    pl.ablation_csv(results, out / "ablation.csv")
    pl.write_manifest(out / "manifest.json", cfg, None,
                      {"k_values": list(args.k), "wall_seconds": time.perf_counter() - t0})
    for k, table in results.items():
        for r in table.rows():
            print(f"k={k:<3} sensors {r['sensor_count']:>3}  R2 {r['r2_mean']:.4f} ± {r['r2_std']:.4f}")
    return EXIT_OK


def cmd_corr(args) -> int:
    ds, _ = _load(args.data, args, TARGET)
    report = pl.correlation_report(ds)
    if args.out:
        _write_rows(args.out, ["feature", "pearson"], [(n, repr(c)) for n, c in report])
    for name, c in report:
        print(f"{name:<16}{c:+.4f}")
    return EXIT_OK


def cmd_grid_predict(args) -> int:
    model = Ensemble.load(args.model)
    if args.ldf:
        feat, stats, names = _ldf_load(args.ldf)
        schema = schema_from_csv(args.grid, args.label, args.aux, args.coords.split(",") if args.coords else None)
        grid, _ = _load(args.grid, args, TARGET, label_optional=True, schema=schema)
        if grid.feature_names != names:
            raise DataError(f"{args.grid}: columns {grid.feature_names} differ from the autoencoder's {names}")
        z = feat.transform(apply_normalizer(grid, stats)).samples[:, -1]
        grid = grid.append_feature(z, feat.name)
    else:
        grid, _ = _load(args.grid, args, TARGET, label_optional=True)
    pred = pl.grid_predict(model, grid, args.out)
    print(f"wrote {len(pred)} grid predictions to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spatial-ldf", description="Spatial transfer learning with a Latent Dependency Factor.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic source/target/grid world")
    p.add_argument("--config", help="SynthConfig JSON (default: built-in defaults)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cloud", help="write neighborhood-cloud indices")
    p.add_argument("--pool", required=True)
    p.add_argument("--objectives", help="objective CSV (default: the pool itself, own sensor excluded)")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--day-window", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_cloud)

    p = sub.add_parser("ldf", help="train the autoencoder or impute the LDF column")
    lsub = p.add_subparsers(dest="ldf_command", parser_class=_Parser)
    lsub.required = True
    q = lsub.add_parser("train")
    q.add_argument("--source", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--variant", choices=("LDF", "LDF-A"), default="LDF")
    q.add_argument("--k", type=int, default=12)
    q.add_argument("--day-window", type=int, default=0)
    q.add_argument("--epochs", type=int, default=40)
    q.add_argument("--batch-size", type=int, default=64)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--alternation", default="re")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help="featurizer JSON")
    _data_flags(q)
    q.set_defaults(func=cmd_ldf_train)
    q = lsub.add_parser("impute")
    q.add_argument("--model", required=True, help="featurizer JSON from 'ldf train'")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    _data_flags(q)
    q.set_defaults(func=cmd_ldf_impute)

    p = sub.add_parser("reweight", help="importance weights for source rows")
    p.add_argument("--method", choices=("nnw", "kliep", "kmm"), required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--n-neighbors", type=int, default=1)
    p.add_argument("--kernel", choices=("rbf", "poly"), default="rbf")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--n-centers", type=int, default=100)
    p.add_argument("--B", type=float, default=1000.0)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--no-normalize", action="store_true", help="use raw features")
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_reweight)

    p = sub.add_parser("train", help="fit a tree, GBR or RF model")
    p.add_argument("--target", required=True)
    p.add_argument("--source", help="source CSV to combine with the target rows")
    p.add_argument("--weights", help="weights CSV from 'reweight' (source rows)")
    p.add_argument("--model", choices=("tree", "gbr", "rf"), default="gbr")
    p.add_argument("--n-estimators", type=int, default=100)
    p.add_argument("--max-depth", type=_depth, default=4)
    p.add_argument("--max-leaf-nodes", type=_depth, default=None)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict rows of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_predict)

    for name, func, helptext in (
        ("bench", cmd_bench, "cross-validated benchmark"),
        ("ablate-k", cmd_ablate_k, "neighborhood-size ablation"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="ExperimentConfig JSON (default: packaged benchmark)")
        p.add_argument("--repeats", type=int)
        p.add_argument("--sensor-counts", type=_ints)
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--quiet", action="store_true")
        if name == "bench":
            p.add_argument("--roster", help="comma-separated entries, e.g. NNW,NNW[LDF]")
        else:
            p.add_argument("--k", type=_ints, default=[4, 8, 12, 16])
            p.add_argument("--entry", default="NNW[LDF]")
        p.set_defaults(func=func)

    p = sub.add_parser("corr", help="rank features by correlation with the label")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _data_flags(p)
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("grid-predict", help="predict a grid and write x, y, prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--ldf", help="featurizer JSON; imputes the LDF column first")
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_grid_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spatial-ldf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ae.DivergenceError, rw.ReweightError) as exc:
        print(f"spatial-ldf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, pl.LeakageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"spatial-ldf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"spatial-ldf: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
