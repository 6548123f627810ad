import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spatial_ldf import synthgen as sg
from spatial_ldf.data import SOURCE, TARGET


def small(**kw):
    base = dict(n_source_sensors=8, n_target_sensors=6, n_days=3, grid_resolution=5)
    base.update(kw)
    return sg.SynthConfig(**base)


def test_identity_label():
    cfg = small(p_extra=1, coefficients=(1.0,), noise_std=0.0, nonlinear_strength=0.0,
                field_strength=0.0, label_offset=0.0)
    src, tgt, grid, _ = sg.generate(cfg, seed=3)
    for ds in (src, tgt, grid):
        np.testing.assert_array_equal(ds.labels, ds.samples[:, 2])


def test_shapes_and_tags():
    cfg = small()
    src, tgt, grid, truth = sg.generate(cfg, seed=0)
    assert len(src) == 8 * 3 and len(tgt) == 6 * 3 and len(grid) == 25
    assert src.domain_tag == SOURCE and tgt.domain_tag == TARGET
    assert src.feature_names == sg.feature_names(6) == tgt.feature_names
    assert not set(src.sensor_ids) & set(tgt.sensor_ids)
    assert src.aux_labels is not None
    assert np.all((tgt.coords[:, 0] >= 2.2) & (tgt.coords[:, 0] <= 3.2))
    d = truth.to_dict()
    assert set(d) >= {"coefficient_vector", "latent_field_params", "nonlinear_terms"}


def test_grid_labels_are_noise_free_truth():
    src, tgt, grid, truth = sg.generate(small(), seed=0)
    np.testing.assert_allclose(grid.labels, truth.label_mean_fn(grid.samples[:, 2:], grid.coords))


def test_deterministic():
    a = sg.generate(small(), seed=11)
    b = sg.generate(small(), seed=11)
    c = sg.generate(small(), seed=12)
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_array_equal(x.samples, y.samples)
        np.testing.assert_array_equal(x.labels, y.labels)
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_no_shift_same_box_matches_means():
    box = (0.0, 0.0, 1.0, 1.0)
    cfg = sg.SynthConfig(n_source_sensors=2000, n_target_sensors=2000, n_days=1,
                         source_box=box, target_box=box, shift_vector=(0.0,) * 6,
                         grid_resolution=2)
    src, tgt, _, _ = sg.generate(cfg, seed=5)
    diff = np.abs(src.samples.mean(0) - tgt.samples.mean(0))
    se = np.sqrt(src.samples.var(0) / len(src) + tgt.samples.var(0) / len(tgt))
    assert np.all(diff < 3 * se)


def test_shift_moves_target_features():
    shift = (2.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    a = sg.generate(small(n_target_sensors=30), seed=1)[1]
    b = sg.generate(small(n_target_sensors=30, shift_vector=shift), seed=1)[1]
    np.testing.assert_allclose(b.samples[:, 2] - a.samples[:, 2], 2.0)


def moran_of_labels(length_scale, fn_seed):
    cfg = sg.SynthConfig(n_source_sensors=120, n_target_sensors=1, n_days=1, noise_std=0.0,
                         p_extra=0, nonlinear_strength=0.0, spatial_length_scale=length_scale,
                         label_fn_seed=fn_seed, grid_resolution=2)
    src = sg.generate(cfg, seed=fn_seed)[0]
    return sg.morans_i(*sg.sensor_means(src))


def test_length_scale_orders_morans_i():
    large = np.mean([moran_of_labels(2.0, s) for s in range(5)])
    short = np.mean([moran_of_labels(0.05, s) for s in range(5)])
    assert large > short


def test_default_source_is_autocorrelated():
    src = sg.generate(sg.SynthConfig(), seed=0)[0]
    assert sg.morans_i(*sg.sensor_means(src)) > 0.2


def test_aux_coupling_extremes():
    src, _, _, truth = sg.generate(small(aux_coupling=1.0), seed=2)
    z = (src.labels - truth.label_mean) / truth.label_std
    np.testing.assert_allclose(src.aux_labels, z)
    src0, _, _, truth0 = sg.generate(small(aux_coupling=0.0), seed=2)
    np.testing.assert_allclose(src0.aux_labels, truth0.aux_field(src0.coords))


@pytest.mark.parametrize(
    "kw",
    [dict(n_days=0), dict(source_box=(1, 0, 0, 1)), dict(spatial_length_scale=0.0),
     dict(aux_coupling=1.5), dict(shift_vector=(1.0,)), dict(noise_std=-1.0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        sg.SynthConfig(**kw)


def test_config_dict_round_trip():
    cfg = small(shift_vector=(1, 2, 3, 4, 5, 6))
    assert sg.SynthConfig.from_dict(cfg.to_dict()) == cfg


# -- Moran's I ----------------------------------------------------------------

LINE = np.column_stack([np.arange(5.0), np.zeros(5)])


def test_morans_i_trend_on_line():
    # equally spaced, inverse-distance weights: hand value 1/11
    assert sg.morans_i(LINE, LINE[:, 0]) == pytest.approx(1.0 / 11.0, abs=1e-12)
    # two tight clusters along a line carry most weight inside clusters
    clustered = np.column_stack([[0.0, 0.01, 0.02, 5.0, 5.01], np.zeros(5)])
    assert sg.morans_i(clustered, clustered[:, 0]) > 0.5


def test_morans_i_alternating():
    assert sg.morans_i(LINE, [1, -1, 1, -1, 1]) < 0


def test_morans_i_permutation_mean():
    rng = np.random.default_rng(0)
    coords = rng.uniform(size=(20, 2))
    values = rng.normal(size=20)
    stats = np.array([sg.morans_i(coords, rng.permutation(values)) for _ in range(1000)])
    expected = -1.0 / (20 - 1)
    assert abs(stats.mean() - expected) < 3 * stats.std()
    assert abs(stats.mean() - expected) < 0.01


def test_morans_i_errors():
    with pytest.raises(ValueError):
        sg.morans_i(LINE, np.ones(5))
    with pytest.raises(ValueError):
        sg.morans_i(LINE[:2], [1, 2])


@given(st.floats(0.1, 100), st.floats(-50, 50))
def test_morans_i_affine_invariant(scale, offset):
    rng = np.random.default_rng(1)
    coords = rng.uniform(size=(12, 2))
    v = rng.normal(size=12)
    assert sg.morans_i(coords, scale * v + offset) == pytest.approx(sg.morans_i(coords, v), abs=1e-9)
