import math

import numpy as np
import pytest

from cowqkd import mlp
from cowqkd.data_pipeline import FeatureFrame

T0 = np.datetime64("2023-11-29T00:00:00", "us")


def make_frame(n=200, seed=0, noise=0.0, constant_target=None):
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.005, 0.03, n)
    v = rng.uniform(0.95, 1.0, n)
    lags = rng.uniform(500, 3000, (n, 3))
    skr = 4000 * v - 30000 * q + 0.3 * lags[:, 0] + noise * rng.standard_normal(n)
    if constant_target is not None:
        skr = np.full(n, float(constant_target))
    ts = T0 + np.arange(n) * np.timedelta64(600, "s")
    cols = {"qber": q, "visibility": v, "link_loss": np.full(n, 46.0), "skr": skr}
    cols.update({f"skr_lag{k}": lags[:, k - 1] for k in (1, 2, 3)})
    return FeatureFrame(ts, cols)


def toy_topology():
    return mlp.MlpTopology(
        (
            mlp.Branch("a", ("qber",)),
            mlp.Branch("b", ("visibility",)),
            mlp.Branch("c", ("link_loss",)),
            mlp.Branch("d", ("skr_lag1", "skr_lag2", "skr_lag3")),
        ),
        branch_hidden=(4, 2),
        trunk=(4, 2),
    )


def random_batch(rng, n=8):
    return (
        {"a": rng.uniform(size=(n, 1)), "b": rng.uniform(size=(n, 1)),
         "c": rng.uniform(size=(n, 1)), "d": rng.uniform(size=(n, 3))},
        rng.uniform(size=n),
    )


def central_difference(model, inputs, target, h=1e-5):
    fd = np.zeros_like(model.theta)
    for i in range(model.n_params):
        orig = model.theta[i]
        model.theta[i] = orig + h
        up = mlp.mse_loss(mlp.forward(model, inputs), target)
        model.theta[i] = orig - h
        down = mlp.mse_loss(mlp.forward(model, inputs), target)
        model.theta[i] = orig
        fd[i] = (up - down) / (2 * h)
    return fd


# -- topology and init ---------------------------------------------------------


def test_default_topology_shapes():
    shapes = dict((n, (i, o)) for n, i, o in mlp.MlpTopology().layer_shapes())
    assert shapes["qber.0"] == (1, 64)
    assert shapes["history.0"] == (3, 64)
    assert shapes["history.1"] == (64, 16)
    assert shapes["trunk.0"] == (64, 64)
    assert shapes["trunk.1"] == (64, 128)
    assert shapes["trunk.3"] == (32, 8)
    assert shapes["out"] == (8, 1)


def test_branch_order_is_fixed():
    names = [b.name for b in mlp.MlpTopology().branches]
    assert names == ["qber", "visibility", "link_loss", "history"]


@pytest.mark.parametrize("kw", [dict(branch_hidden=()), dict(trunk=(4, 0)), dict(branches=())])
def test_topology_rejects_invalid(kw):
    with pytest.raises(ValueError):
        mlp.MlpTopology(**kw)


def test_from_inputs_unknown_name():
    with pytest.raises(ValueError):
        mlp.MlpTopology.from_inputs(["qber", "weather"])


def test_init_deterministic_and_seed_sensitive():
    a, b = mlp.init(mlp.MlpTopology(), 5), mlp.init(mlp.MlpTopology(), 5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, mlp.init(mlp.MlpTopology(), 6).theta)


def test_glorot_limit_and_zero_bias():
    assert mlp.glorot_limit(64, 16) == math.sqrt(6 / 80)
    m = mlp.init(mlp.MlpTopology(), 1)
    W, b = m.layers()["qber.1"]
    assert W.shape == (64, 16)
    assert np.all(np.abs(W) <= math.sqrt(6 / 80))
    assert np.abs(W).max() > 0.9 * math.sqrt(6 / 80)
    assert np.all(b == 0)


def test_layers_are_views_into_theta():
    m = mlp.init(toy_topology(), 0)
    W, _ = m.layers()["out"]
    W[0, 0] = 123.0
    assert 123.0 in m.theta


# -- forward -------------------------------------------------------------------


def hand_model():
    topo = mlp.MlpTopology(
        (mlp.Branch("a", ("qber",)), mlp.Branch("b", ("visibility",))), branch_hidden=(1,), trunk=(1,)
    )
    # a.0: W=2 b=-1 | b.0: W=-3 b=0.5 | trunk.0: W=[1,2] b=0.25 | out: W=3 b=1
    return mlp.MlpModel(topo, np.array([2, -1, -3, 0.5, 1, 2, 0.25, 3, 1], dtype=float))


def test_forward_hand_computed():
    m = hand_model()
    # a: relu(2-1)=1, b: relu(-0.3+0.5)=0.2, trunk: relu(1+0.4+0.25)=1.65, out: 3*1.65+1
    assert mlp.forward(m, {"a": 1.0, "b": 0.1})[0] == pytest.approx(5.95, rel=1e-15)


def test_forward_negative_preactivation_is_cut():
    m = hand_model()
    # b branch: -3+0.5 < 0 contributes nothing; trunk relu(1+0.25)=1.25
    assert mlp.forward(m, {"a": 1.0, "b": 1.0})[0] == pytest.approx(4.75, rel=1e-15)
    assert mlp.forward(m, {"a": 1.0, "b": 1.0})[0] == mlp.forward(m, {"a": 1.0, "b": 50.0})[0]


def test_forward_zero_weights_give_zero():
    m = mlp.init(mlp.MlpTopology(), 0)
    m.theta[:] = 0
    rng = np.random.default_rng(1)
    X, _ = random_batch(rng)
    X = {"qber": X["a"], "visibility": X["b"], "link_loss": X["c"], "history": X["d"]}
    assert np.all(mlp.forward(m, X) == 0)


def test_forward_shape_mismatch():
    m = mlp.init(toy_topology(), 0)
    X, _ = random_batch(np.random.default_rng(0))
    X["d"] = X["d"][:, :2]
    with pytest.raises(ValueError):
        mlp.forward(m, X)
    del X["d"]
    with pytest.raises(ValueError):
        mlp.forward(m, X)


def test_batch_equals_per_row():
    m = mlp.init(toy_topology(), 2)
    X, _ = random_batch(np.random.default_rng(3), n=6)
    full = mlp.forward(m, X)
    rows = [mlp.forward(m, {k: v[i : i + 1] for k, v in X.items()})[0] for i in range(6)]
    assert np.array_equal(full, rows)


# -- loss and gradient ---------------------------------------------------------


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(10):
        m = mlp.init(toy_topology(), k)
        m.theta += rng.uniform(-0.1, 0.1, m.n_params)
        X, y = random_batch(rng)
        _, g = mlp.loss_and_gradient(m, X, y)
        fd = central_difference(m, X, y)
        scale = np.maximum(np.abs(g), np.abs(fd))
        rel = np.abs(g - fd) / np.where(scale > 0, scale, 1.0)
        worst = max(worst, rel.max())
    assert worst < 1e-4


def test_zero_residual_gives_zero_loss_and_output_gradient():
    m = mlp.init(toy_topology(), 0)
    X, _ = random_batch(np.random.default_rng(0))
    y = mlp.forward(m, X)
    loss, g = mlp.loss_and_gradient(m, X, y)
    assert loss == 0
    assert np.all(m.layers(g)["out"][1] == 0)


def test_doubling_residual_quadruples_loss():
    pred = np.array([0.1, 0.5, 0.9])
    target = np.array([0.3, 0.2, 1.0])
    assert mlp.mse_loss(pred, pred + 2 * (target - pred)) == pytest.approx(4 * mlp.mse_loss(pred, target))


def test_empty_batch_rejected():
    m = mlp.init(toy_topology(), 0)
    X = {"a": np.zeros((0, 1)), "b": np.zeros((0, 1)), "c": np.zeros((0, 1)), "d": np.zeros((0, 3))}
    with pytest.raises(ValueError):
        mlp.loss_and_gradient(m, X, np.zeros(0))


# -- schedule and training -----------------------------------------------------


def test_learning_rate_sequence():
    cfg = mlp.TrainConfig()
    lrs = [mlp.learning_rate(e, cfg) for e in range(1, 51)]
    assert lrs[:15] == [0.001] * 15
    for e in range(16, 51):
        assert lrs[e - 1] == 0.001 * 0.99 ** (e - 15)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(train_fraction=1.0), dict(initial_lr=0)])
def test_train_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        mlp.TrainConfig(**kw)


def test_chronological_split():
    f = make_frame(100)
    tr, te = mlp.split_frame(f, 0.8)
    assert len(tr) == 80 and len(te) == 20
    assert tr.timestamps[-1] < te.timestamps[0]


def test_insufficient_data():
    with pytest.raises(mlp.InsufficientDataError):
        mlp.train(mlp.init(mlp.MlpTopology(), 0), make_frame(10), mlp.TrainConfig(batch_size=8))


def test_missing_column_is_scaler_mismatch():
    f = make_frame(100).drop(["link_loss"])
    with pytest.raises(mlp.ScalerMismatchError):
        mlp.train(mlp.init(mlp.MlpTopology(), 0), f, mlp.TrainConfig(epochs=1))


def test_same_seed_same_weights():
    f = make_frame(120)
    cfg = mlp.TrainConfig(epochs=3, seed=11)
    a = mlp.train(mlp.init(mlp.MlpTopology(), 1), f, cfg)
    b = mlp.train(mlp.init(mlp.MlpTopology(), 1), f, cfg)
    assert np.array_equal(a.theta, b.theta)
    c = mlp.train(mlp.init(mlp.MlpTopology(), 1), f, mlp.TrainConfig(epochs=3, seed=12))
    assert not np.array_equal(a.theta, c.theta)


def test_train_leaves_input_model_untouched():
    m = mlp.init(toy_topology(), 0)
    before = m.theta.copy()
    f = make_frame(60)
    mlp.train(m, f, mlp.TrainConfig(epochs=1))
    assert np.array_equal(m.theta, before)


def test_constant_target_is_learned():
    f = make_frame(150, constant_target=1500.0)
    m = mlp.train(mlp.init(mlp.MlpTopology(), 0), f, mlp.TrainConfig(epochs=50))
    assert m.history[-1]["val_loss"] < 1e-6
    assert np.allclose(mlp.predict_frame(m, f).values, 1500.0, rtol=1e-3)


def test_restore_best_weights():
    f = make_frame(200, noise=300)
    m = mlp.train(mlp.init(mlp.MlpTopology(), 0), f, mlp.TrainConfig(epochs=25, early_stop_patience=3))
    hist = mlp.training_history(m)
    best = min(h["val_loss"] for h in hist)
    assert len(hist) <= 25
    _, val = mlp.split_frame(f)
    X, y = mlp.scaled_arrays(val, m.topology, m.scaler_state)
    assert mlp.mse_loss(mlp.forward(m, X), y) == best


def test_training_loss_non_increasing_on_noiseless_linear_data():
    f = make_frame(200)
    m = mlp.train(mlp.init(mlp.MlpTopology(), 0), f, mlp.TrainConfig(epochs=30, early_stop_patience=30))
    losses = [h["train_loss"] for h in mlp.training_history(m)]
    assert all(b <= a + 1e-6 for a, b in zip(losses[4:], losses[5:]))


def test_prediction_close_after_convergence():
    f = make_frame(200)
    m = mlp.train(mlp.init(mlp.MlpTopology(), 0), f, mlp.TrainConfig(epochs=50))
    tr, _ = mlp.split_frame(f)
    pred = mlp.predict_frame(m, tr.rows(slice(0, 20))).values
    assert np.all(np.abs(pred / tr["skr"][:20] - 1) < 0.05)


def test_scaler_fitted_on_train_split_only():
    f = make_frame(100)
    m = mlp.train(mlp.init(toy_topology(), 0), f, mlp.TrainConfig(epochs=1))
    tr, _ = mlp.split_frame(f)
    assert m.scaler_state["skr"] == (tr["skr"].min(), tr["skr"].max())


def test_inverse_scaling_of_zero_is_column_minimum():
    m = mlp.init(mlp.MlpTopology(), 0)
    m.scaler_state = {"skr": (900.0, 2500.0)}
    assert mlp.inverse_target(m, 0.0) == 900.0


def test_predict_frame_requires_scaler():
    m = mlp.init(mlp.MlpTopology(), 0)
    with pytest.raises(mlp.ScalerMismatchError):
        mlp.predict_frame(m, make_frame(10))


# -- persistence ---------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    return mlp.train(mlp.init(toy_topology(), 0), make_frame(80), mlp.TrainConfig(epochs=3))


def test_save_load_round_trip(tmp_path, trained):
    p = tmp_path / "m.bin"
    mlp.save(trained, p)
    back = mlp.load(p)
    assert back.topology == trained.topology
    assert back.scaler_state == trained.scaler_state
    assert back.history == trained.history
    assert np.array_equal(back.theta, trained.theta)
    assert np.array_equal(back.adam_v, trained.adam_v)
    f = make_frame(30, seed=4)
    assert np.array_equal(mlp.predict_frame(back, f).values, mlp.predict_frame(trained, f).values)


def test_truncated_file_is_corrupt(tmp_path, trained):
    p = tmp_path / "m.bin"
    mlp.save(trained, p)
    data = p.read_bytes()
    for cut in (4, 20, len(data) - 8):
        p.write_bytes(data[:cut])
        with pytest.raises(mlp.ModelFileError):
            mlp.load(p)


def test_flipped_byte_is_corrupt(tmp_path, trained):
    p = tmp_path / "m.bin"
    mlp.save(trained, p)
    data = bytearray(p.read_bytes())
    data[-3] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(mlp.ModelFileError, match="checksum"):
        mlp.load(p)


def test_unknown_version_rejected(tmp_path, trained):
    p = tmp_path / "m.bin"
    mlp.save(trained, p)
    p.write_bytes(p.read_bytes().replace(b'"format_version": 1', b'"format_version": 9'))
    with pytest.raises(mlp.ModelFileError, match="version"):
        mlp.load(p)


GOLDEN_PREDICTION = 1705.035753356402


def test_golden_model_prediction():
    from pathlib import Path

    from cowqkd.data_pipeline import read_frame_csv

    fixtures = Path(__file__).parent / "fixtures"
    model = mlp.load(fixtures / "golden_model.bin")
    row = read_frame_csv(fixtures / "golden_frame.csv").rows(slice(0, 1))
    assert mlp.predict_frame(model, row).values[0] == GOLDEN_PREDICTION
