import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spatial_ldf import autoencoder as ae
from spatial_ldf.data import DataError, r_squared
from spatial_ldf.neighborhood import LdfBatch, build_clouds

TINY = ae.ArchConfig(k=1, p=1, conv_channels=(1, 1, 1))


def hand_model(**overrides):
    m = ae.init_model(TINY, 0, zero=True)
    P = m.params
    P["enc1_w"][:] = [[1.0], [1.0]]
    P["enc2_w"][:] = [[2.0]]
    P["enc2_b"][:] = [-1.0]
    P["enc3_w"][:, 0, 0] = [1.0, 1.0, -1.0]
    P["encd_w"][:] = [1.0, 0.5]
    P["encd_b"][:] = [0.5]
    for k, v in overrides.items():
        P[k][:] = v
    return m


def test_encode_hand_computed():
    # a1 = (1, 5); a2 = (1, 9); a3 = (0+1-9, 1+9+0) = (-8, 10) -> (-0.08, 10)
    # z = -0.08 + 0.5 * 10 + 0.5
    x = np.array([[1.0, 0.0], [2.0, 3.0]])
    assert ae.encode(hand_model(), x) == pytest.approx(5.42, abs=1e-12)


def test_encode_bias_path_only():
    # zero input: h1 = 0.5, a2 = 0, h3 = (2, 2), z = 2 + 1 + 0.5
    m = hand_model(enc1_b=[0.5], enc3_b=[2.0])
    assert ae.encode(m, np.zeros((2, 2))) == pytest.approx(3.5, abs=1e-12)


def test_init_determinism():
    arch = ae.ArchConfig(k=4, p=3)
    a, b, c = ae.init_model(arch, 1), ae.init_model(arch, 1), ae.init_model(arch, 2)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    assert a.flat().size == a.n_params


def test_zero_model_outputs_zero(rng):
    arch = ae.ArchConfig(k=3, p=2)
    m = ae.init_model(arch, 0, zero=True)
    assert ae.encode(m, rng.normal(size=arch.input_shape)) == 0.0
    np.testing.assert_array_equal(ae.decode(m, 2.5), np.zeros(arch.input_shape))


def test_decode_shape():
    m = ae.init_model(ae.ArchConfig(k=12, p=27), 0)
    assert ae.decode(m, 0.3).shape == (13, 28)
    assert ae.decode(m, np.array([0.1, 0.2])).shape == (2, 13, 28)


def test_estimate_affine():
    m = ae.init_model(ae.ArchConfig(k=1, p=1), 0)
    m.params["est_w"][:] = [2.0]
    m.params["est_b"][:] = [1.0]
    np.testing.assert_array_equal(ae.estimate(m, 3.0), [7.0])
    np.testing.assert_array_equal(ae.estimate(m, 0.0), [1.0])
    m2 = ae.init_model(ae.ArchConfig(k=1, p=1, estimator_outputs=2), 0)
    assert ae.estimate(m2, 1.0).shape == (2,)


def test_shape_mismatch_rejected():
    m = ae.init_model(ae.ArchConfig(k=2, p=2), 0)
    with pytest.raises(DataError):
        ae.encode(m, np.zeros((4, 3)))


@pytest.mark.parametrize("kw", [dict(conv_kernel_sizes=(3, 3, 3)), dict(latent_dim=2),
                                dict(estimator_outputs=3), dict(conv_channels=(1, 1))])
def test_arch_validation(kw):
    with pytest.raises(ValueError):
        ae.ArchConfig(**kw)


def synthetic_batch(n, k, p, seed, aux=False):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(n, k + 1, p + 1))
    T[:, 0, p] = 0.0
    y = T[:, 1:, p].mean(axis=1) + 0.5 * T[:, 0, 0]
    return LdfBatch(T, y, 0.5 * y + 0.1 if aux else None)


def test_zero_learning_rate_is_a_no_op():
    m = ae.init_model(ae.ArchConfig(k=3, p=2), 0)
    batch = synthetic_batch(16, 3, 2, 0)
    out, hist = ae.train(m, batch, ae.TrainConfig(epochs=4, learning_rate=0.0))
    np.testing.assert_array_equal(out.flat(), m.flat())
    for stage in (ae.RECON, ae.ESTIM):
        assert set(hist.stage_losses(stage)) == {hist.initial[stage]}


def test_training_lowers_both_losses():
    m = ae.init_model(ae.ArchConfig(k=4, p=3), 3)
    batch = synthetic_batch(64, 4, 3, 1)
    _, hist = ae.train(m, batch, ae.TrainConfig(epochs=50, learning_rate=3e-3, batch_size=16))
    for stage in (ae.RECON, ae.ESTIM):
        assert hist.stage_losses(stage)[-1] < hist.initial[stage]


def test_overfits_single_sample():
    m = ae.init_model(ae.ArchConfig(k=4, p=3), 0)
    one = synthetic_batch(1, 4, 3, 2)
    batch = one.take(np.zeros(8, dtype=int))
    cfg = ae.TrainConfig(epochs=200, learning_rate=1e-2, alternation="eeer", batch_size=8)
    _, hist = ae.train(m, batch, cfg)
    assert hist.stage_losses(ae.ESTIM)[-1] < 1e-2


def test_two_output_estimator_needs_aux():
    m = ae.init_model(ae.ArchConfig(k=2, p=2, estimator_outputs=2), 0)
    with pytest.raises(DataError):
        ae.train(m, synthetic_batch(4, 2, 2, 0), ae.TrainConfig(epochs=2))
    out, _ = ae.train(m, synthetic_batch(4, 2, 2, 0, aux=True), ae.TrainConfig(epochs=2))
    assert out.params["est_w"].shape == (2,)


def test_train_config_validation():
    assert ae.TrainConfig(alternation="rre").stage(2) == ae.ESTIM
    with pytest.raises(ValueError):
        ae.TrainConfig(alternation="rx")
    with pytest.raises(ValueError):
        ae.train(ae.init_model(TINY, 0), synthetic_batch(2, 1, 1, 0), ae.TrainConfig(epochs=1))


def test_gradient_check_linear():
    arch = ae.ArchConfig(k=2, p=2, conv_channels=(3, 2, 2), leaky_slope=1.0)
    m = ae.init_model(arch, 4)
    batch = synthetic_batch(1, 2, 2, 3)
    assert ae.gradient_check(m, batch[0].tensor, batch[0].target_label) < 1e-6


def test_gradient_check_leaky():
    arch = ae.ArchConfig(k=2, p=2, conv_channels=(3, 2, 2))
    m = ae.init_model(arch, 5)
    for name in m.params:
        if name.endswith("_b"):
            m.params[name] += 0.05
    batch = synthetic_batch(2, 2, 2, 4)
    assert ae.gradient_check(m, batch.tensors, batch.target_labels) < 1e-3


def test_gradient_check_zero_model():
    m = ae.init_model(ae.ArchConfig(k=2, p=2, conv_channels=(2, 2, 2)), 0, zero=True)
    arch_shape = m.arch.input_shape
    assert ae.gradient_check(m, np.zeros(arch_shape), 0.0) == 0.0
    _, g = ae.stage_loss_and_grads(m, np.zeros((1,) + arch_shape), np.zeros((1, 1)), ae.RECON)
    assert all(np.all(v == 0) for v in g.values())


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_encode_batch_is_rowwise(seed, n):
    arch = ae.ArchConfig(k=2, p=2, conv_channels=(3, 2, 2))
    m = ae.init_model(arch, seed)
    X = np.random.default_rng(seed).normal(size=(n,) + arch.input_shape)
    z = ae.encode_batch(m, X)
    for i in range(n):
        assert z[i] == pytest.approx(ae.encode(m, X[i]), abs=1e-12)


def test_impute_appends_one_column(rng):
    from conftest import make_dataset

    X = rng.normal(size=(20, 27))
    ds = make_dataset(X, y=rng.normal(size=20))
    clouds = build_clouds(ds, ds, k=12, objective_keys=np.arange(20), pool_keys=np.arange(20))
    zero = ae.init_model(ae.ArchConfig(k=12, p=27), 0, zero=True)
    out = ae.impute_ldf(zero, ds, clouds, ds)
    assert out.n_features == 28 and out.feature_names[-1] == "ldf"
    np.testing.assert_array_equal(out.samples[:, -1], 0.0)
    np.testing.assert_array_equal(out.samples[:, :27], X)


def test_checkpoint_round_trip(tmp_path):
    m = ae.init_model(ae.ArchConfig(k=3, p=2), 9)
    ae.save_model(m, tmp_path / "m.json", extra={"note": 1})
    back, extra = ae.load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.flat(), m.flat())
    assert back.arch == m.arch and extra == {"note": 1}
    (tmp_path / "bad.json").write_text('{"format": "x"}')
    with pytest.raises(DataError):
        ae.load_model(tmp_path / "bad.json")


# -- FNN ------------------------------------------------------------------------


def test_fnn_fits_linear_target(rng):
    X = rng.normal(size=(200, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 3.0
    m = ae.train_fnn(X, y, cfg=ae.TrainConfig(epochs=500, learning_rate=1e-3, batch_size=64))
    assert r_squared(y, ae.predict_fnn(m, X)) > 0.9


def test_fnn_zero_epochs_is_initialisation(rng):
    X = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    m = ae.train_fnn(X, y, cfg=ae.TrainConfig(epochs=0))
    init = ae.init_fnn(2, 0)
    for k in init.params:
        np.testing.assert_array_equal(m.params[k], init.params[k])


def test_fnn_zero_weights_leave_parameters(rng):
    X = rng.normal(size=(10, 2))
    m = ae.train_fnn(X, rng.normal(size=10), np.zeros(10), ae.TrainConfig(epochs=5, seed=3))
    init = ae.init_fnn(2, 3)
    for k in init.params:
        np.testing.assert_array_equal(m.params[k], init.params[k])


def test_fnn_dict_round_trip(rng):
    X = rng.normal(size=(8, 2))
    m = ae.train_fnn(X, rng.normal(size=8), cfg=ae.TrainConfig(epochs=2))
    back = ae.fnn_from_dict(ae.fnn_to_dict(m))
    np.testing.assert_array_equal(ae.predict_fnn(back, X), ae.predict_fnn(m, X))


def test_gradient_check_flags_wrong_gradient(monkeypatch):
    arch = ae.ArchConfig(k=2, p=2, conv_channels=(2, 2, 2))
    m = ae.init_model(arch, 1)
    x = synthetic_batch(1, 2, 2, 0)[0]
    real = ae.stage_loss_and_grads

    def skewed(*args, **kw):
        loss, grads = real(*args, **kw)
        if grads is not None:
            grads["enc1_w"] = grads["enc1_w"] * 1.05
        return loss, grads

    monkeypatch.setattr(ae, "stage_loss_and_grads", skewed)
    assert ae.gradient_check(m, x.tensor, x.target_label) > 1e-2
