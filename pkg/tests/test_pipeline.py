import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from spatial_ldf import pipeline as pl
from spatial_ldf import synthgen as sg
from spatial_ldf.data import DataError, pearson, r_squared

SMALL_SYNTH = sg.SynthConfig(n_source_sensors=20, n_target_sensors=12, n_days=4, p_extra=3, grid_resolution=10)
TINY_GRIDS = {
    "ml": {"n_estimators": [10], "max_depth": [3], "learning_rate": [0.1]},
    "transfer": {"max_depth": [3, None]},
    "nnw": {"n_neighbors": [2, 4]},
    "kernel": {"gamma": [0.5]},
}


def small_cfg(**kw):
    base = dict(roster=("NNW", "NNW[LDF]"), sensor_counts=(5,), cv_repeats=2, samples_per_sensor=4,
                k_neighbors=4, synth=SMALL_SYNTH, grids=TINY_GRIDS, ae_epochs=4, fnn_epochs=3)
    base.update(kw)
    return pl.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def domains():
    return pl.load_domains(small_cfg())


def test_parse_entry():
    assert pl.parse_entry("NNW[LDF]") == ("NNW", "LDF")
    assert pl.parse_entry("KMM") == ("KMM", "plain")
    assert pl.entry_label("FNN", "LDF-A") == "FNN[LDF-A]"
    for bad in ("GBR[LDF]", "XGB", "NNW[LDF-B]"):
        with pytest.raises(ValueError):
            pl.parse_entry(bad)


def test_config_round_trip_and_validation(tmp_path):
    cfg = small_cfg()
    back = pl.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ValueError):
        pl.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        small_cfg(cv_repeats=0)
    (tmp_path / "c.json").write_text(json.dumps({"source_path": "s.csv", "target_path": "t.csv"}))
    loaded = pl.ExperimentConfig.load(tmp_path / "c.json")
    assert loaded.source_path == str(tmp_path / "s.csv") and loaded.synth is None


def test_packaged_config_loads():
    cfg = pl.ExperimentConfig.load(pl.default_config_path())
    assert ("NNW", "LDF") in cfg.roster and 9 in cfg.sensor_counts and cfg.cv_repeats == 20


def test_derive_seed():
    assert pl.derive_seed(0, "NNW", 1) == pl.derive_seed(0, "NNW", 1)
    assert len({pl.derive_seed(0, "NNW", 1), pl.derive_seed(0, "NNW", 2), pl.derive_seed(1, "NNW", 1)}) == 3


def test_gbr_integration_identity(domains):
    cfg = small_cfg(roster=("GBR",), cv_repeats=1)
    table = pl.run_experiment(cfg, domains=domains)
    S, T, E, _ = pl.prepare_split(*domains, 5, cfg, 0)
    direct = pl.fit_regressor("gbr", T.samples, T.labels, None,
                              {"n_estimators": 10, "max_depth": 3, "learning_rate": 0.1})
    assert table.mean_r2("GBR", "plain", 5) == r_squared(E.labels, direct.predict(E.samples))


def test_run_twice_is_identical(domains):
    cfg = small_cfg(roster=("NNW", "NNW[LDF]", "KMM", "FNN"))
    a = pl.run_experiment(cfg, domains=domains)
    b = pl.run_experiment(cfg, domains=domains)
    assert a.same_scores(b) and a.to_csv() == b.to_csv()


def test_subset_roster_gives_same_numbers(domains):
    full = pl.run_experiment(small_cfg(roster=("NNW", "KLIEP")), domains=domains)
    alone = pl.run_experiment(small_cfg(roster=("KLIEP",)), domains=domains)
    assert full.scores[("KLIEP", "plain", 5)] == alone.scores[("KLIEP", "plain", 5)]


def test_table_completeness_and_cells(domains):
    cfg = small_cfg(roster=("RF", "NNW", "NNW[LDF-A]"), sensor_counts=(3, 5))
    table = pl.run_experiment(cfg, domains=domains)
    assert {(m, v, s) for m, v in cfg.roster for s in cfg.sensor_counts} == set(table.scores)
    assert all(len(v) == 2 for v in table.scores.values())
    assert len(table.cells) == 4 and all(c["leakage_checked"] for c in table.cells)
    rows = table.rows()
    assert {r["r2_rank"] for r in rows if r["sensor_count"] == 3} == {1, 2, 3}
    text = table.to_csv()
    assert text.splitlines()[0] == ",".join(pl.ResultTable.COLUMNS)


def test_leakage_detected(domains):
    _, target = domains
    with pytest.raises(pl.LeakageError):
        pl.check_leakage(target.subset([0, 1]), pool=target)
    pl.check_leakage(target.subset([0]), pool=domains[0])


def test_split_partitions_are_disjoint(domains):
    cfg = small_cfg()
    S, T, E, _ = pl.prepare_split(*domains, 5, cfg, 1)
    assert not set(pl.domain_keys(E)) & set(pl.domain_keys(T))
    assert not set(pl.domain_keys(E)) & set(pl.domain_keys(S))


def test_combined_set_has_m_plus_n_rows(domains):
    cfg = small_cfg()
    S, T, _, _ = pl.prepare_split(*domains, 5, cfg, 0)
    for model in ("NNW", "KLIEP", "KMM", "FNN"):
        fitted = pl.fit_entry(model, S, T, cfg, seed=0)
        assert fitted.params["n_train_rows"] == len(S) + len(T)


def test_fit_ldf_outputs(domains):
    cfg = small_cfg()
    S, T, E, _ = pl.prepare_split(*domains, 5, cfg, 0)
    feat, Sa, Ta, Ea = pl.augment_cell(S, T, E, "LDF", cfg, 0, 5)
    for before, after in ((S, Sa), (T, Ta), (E, Ea)):
        assert after.n_features == before.n_features + 1 and after.feature_names[-1] == "ldf"
        np.testing.assert_array_equal(after.samples[:, :-1], before.samples)
    z = np.concatenate([Sa.samples[:, -1], Ta.samples[:, -1]])
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
    back = pl.LdfFeaturizer.from_dict(json.loads(json.dumps(feat.to_dict())))
    np.testing.assert_array_equal(back.transform(E).samples, Ea.samples)


def test_correlation_report():
    from conftest import make_dataset

    y = np.array([1.0, 2.0, 4.0, 3.0])
    ds = make_dataset(np.column_stack([np.ones(4), -y, y + [0, 1, 0, 0]]), y=y)
    rep = pl.correlation_report(ds)
    assert rep[0] == ("x1", pytest.approx(-1.0)) and dict(rep)["x0"] == 0.0


def test_ldf_ranks_top_three_on_default_world():
    cfg = pl.ExperimentConfig.load(pl.default_config_path())
    S, T, E, _ = pl.prepare_split(*pl.load_domains(cfg), 9, cfg, 0)
    _, _, _, Ea = pl.augment_cell(S, T, E, "LDF", cfg, 0, 9)
    names = [n for n, _ in pl.correlation_report(Ea)[:3]]
    assert "ldf" in names


def test_grid_predict_full_gbr(tmp_path):
    _, target, grid, _ = sg.generate(sg.SynthConfig(), 0)
    f = pl.fit_regressor("gbr", target.samples, target.labels, None, {"n_estimators": 100, "max_depth": 4},
                         0, target.feature_names)
    pred = pl.grid_predict(f, grid, tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["x", "y", "prediction"] and len(rows) == 2501
    assert pearson(pred, grid.labels) > 0.6


def test_grid_predict_constant_and_schema_errors(tmp_path):
    _, target, grid, _ = sg.generate(SMALL_SYNTH, 0)
    const = pl.fit_regressor("tree", target.samples, np.full(len(target), 3.0), feature_names=target.feature_names)
    np.testing.assert_array_equal(pl.grid_predict(const, grid), 3.0)
    with pytest.raises(DataError):
        pl.grid_predict(const, grid.append_feature(np.zeros(len(grid)), "ldf"))
    renamed = grid.with_samples(grid.samples, ("a", "b", "c", "d", "e"))
    with pytest.raises(DataError):
        pl.grid_predict(const, renamed)


def test_ablate_k_sections_and_consistency(domains):
    cfg = small_cfg(cv_repeats=1)
    res = pl.ablate_k(cfg, [2, 4], domains=domains)
    assert sorted(res) == [2, 4]
    single = pl.run_experiment(replace(cfg, roster=(("NNW", "LDF"),), k_neighbors=4), domains=domains)
    assert res[4].same_scores(single)
    assert pl.ablation_csv(res).count("\n") == 3


def test_errors_carry_cell_context(domains):
    cfg = small_cfg(sensor_counts=(12,), cv_repeats=1)
    with pytest.raises(DataError, match=r"repeat 0, sensor_count 12"):
        pl.run_experiment(cfg, domains=domains)


def test_manifest(tmp_path, domains):
    cfg = small_cfg(cv_repeats=1, roster=("NNW",))
    table = pl.run_experiment(cfg, domains=domains)
    m = pl.write_manifest(tmp_path / "m.json", cfg, table, {"note": "x"})
    on_disk = json.loads((tmp_path / "m.json").read_text())
    assert on_disk["master_seed"] == 0 and on_disk["note"] == "x" and len(on_disk["cells"]) == 1
    assert m["config"]["roster"] == ["NNW"]
