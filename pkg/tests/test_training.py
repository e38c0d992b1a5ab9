import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanorm.backbones import BackboneConfig, Forecaster
from chanorm.datasets import WindowSet, gen_cid_toy, gen_linear_series, make_windows
from chanorm.normlayers import NormLayer
from chanorm.training import (
    NumericalAbort,
    OptimizerState,
    TrainConfig,
    adam_step,
    grad_check,
    mae,
    mse,
    train_model,
)
from conftest import random_params


def small_model(norm="ln", kind="channel_attention", lookback=16, horizon=4, channels=2, seed=7):
    cfg = BackboneConfig(kind=kind, depth=1, d_model=8, heads=2, norm_kind=norm)
    return Forecaster(cfg, lookback, horizon, channels, seed)


@pytest.fixture(scope="module")
def toy_windows():
    return make_windows(gen_cid_toy(16, 4, 1.0, 8, noise=0.01, seed=3), 16, 4, stride=2)


# -------------------------------------------------------------------- losses


def test_loss_examples():
    a = np.arange(6.0).reshape(1, 3, 2)
    assert mse(a, a) == 0.0 and mae(a, a) == 0.0
    assert mse(a + 2, a) == 4.0 and mae(a + 2, a) == 2.0
    with pytest.raises(ValueError):
        mse(a, a[:, :2])


def test_losses_match_loops(rng):
    p, t = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    sq = ab = 0.0
    for i in np.ndindex(p.shape):
        sq += (p[i] - t[i]) ** 2
        ab += abs(p[i] - t[i])
    assert mse(p, t) == pytest.approx(sq / p.size, abs=1e-12)
    assert mae(p, t) == pytest.approx(ab / p.size, abs=1e-12)


# ---------------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params(rng):
    p = {"w": rng.normal(size=(3, 2))}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros((3, 2))}, OptimizerState())
    np.testing.assert_array_equal(p["w"], before)


@pytest.mark.parametrize("g", [1.0, -3.0, 1e-3])
def test_adam_first_step_is_lr_sign(g):
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([g])}, OptimizerState(lr=0.01))
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    assert p["w"][0] == pytest.approx(0.5 - 0.01 * g / (abs(g) + 1e-8), abs=1e-15)


def test_adam_repeated_gradient_keeps_step_size():
    p, state = {"w": np.zeros(1)}, OptimizerState(lr=0.1)
    for _ in range(5):
        adam_step(p, {"w": np.ones(1)}, state)
    assert p["w"][0] == pytest.approx(-0.5, abs=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())


# ---------------------------------------------------------------------- loop


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")


def test_zero_epochs_returns_init(toy_windows):
    m = small_model("cn")
    before = {k: v.copy() for k, v in m.named_params().items()}
    m, log = train_model(m, toy_windows, TrainConfig(epochs=0))
    assert len(log) == 1 and log[0]["epoch"] == 0
    for k, v in m.named_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_identity_init_makes_epoch_zero_equal(toy_windows):
    logs = {n: train_model(small_model(n), toy_windows, TrainConfig(epochs=0), toy_windows)[1][0]
            for n in ("ln", "cn", "acn", "pcn")}
    for rec in logs.values():
        assert rec["train_mse"] == pytest.approx(logs["ln"]["train_mse"], abs=1e-12)
        assert rec["val_mse"] == pytest.approx(logs["ln"]["val_mse"], abs=1e-12)


def test_training_is_deterministic(toy_windows, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=3e-3)
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        train_model(small_model("acn"), toy_windows, cfg, toy_windows, log_path=p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    recs = [json.loads(line) for line in paths[0].read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1, 2, 3]
    assert set(recs[0]) == {"epoch", "train_mse", "train_mae", "val_mse", "val_mae", "wall_ms"}
    assert recs[0]["wall_ms"] is None


def test_training_reduces_loss_and_keeps_best(toy_windows):
    m, log = train_model(small_model("cn"), toy_windows,
                         TrainConfig(epochs=6, batch_size=8, learning_rate=3e-3), toy_windows)
    assert log[-1]["train_mse"] < log[0]["train_mse"]
    from chanorm.training import evaluate
    assert evaluate(m, toy_windows)["mse"] == pytest.approx(min(r["val_mse"] for r in log), rel=1e-12)


def test_early_stopping(toy_windows):
    _, log = train_model(small_model("ln"), toy_windows,
                         TrainConfig(epochs=200, learning_rate=0.3, early_stop_patience=2), toy_windows)
    assert len(log) < 201


def test_linear_backbone_fits_linear_data():
    w = make_windows(gen_linear_series(3, 400, seed=7), 16, 4)
    m = small_model("none", "linear", 16, 4, 3)
    m, log = train_model(m, w, TrainConfig(epochs=300, learning_rate=3e-3, early_stop_patience=1000))
    assert min(r["train_mse"] for r in log) < 1e-6


def test_nan_aborts_with_step(toy_windows):
    bad = WindowSet(toy_windows.inputs.copy(), toy_windows.targets.copy(), 1, toy_windows.starts)
    bad.targets[:] = np.nan
    with pytest.raises(NumericalAbort) as info:
        train_model(small_model(), bad, TrainConfig(epochs=1, batch_size=4))
    assert info.value.step == 1


def test_empty_training_set():
    empty = WindowSet(np.zeros((0, 16, 2)), np.zeros((0, 4, 2)), 1, np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        train_model(small_model(), empty, TrainConfig(epochs=1))


# ---------------------------------------------------------------- grad check


@pytest.mark.parametrize("kind", ["ln", "acn", "pcn"])
def test_grad_check_examples(kind, rng):
    layer = random_params(NormLayer.build(kind, 3, 4, 5, rng=rng, k=3), rng)
    rep = grad_check(layer, (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 3))))
    assert rep.passed and rep.max_rel_err <= 1e-4
    assert rep.checked == sum(a.size for a in layer.named_params().values())


def test_grad_check_catches_a_wrong_gradient(rng):
    layer = random_params(NormLayer.build("cn", 3, 4, 5, rng=rng), rng)
    z = rng.normal(size=(2, 3, 4))
    original = layer.backward

    def broken(g):
        gz = original(g)
        layer.grads["beta"] = layer.grads["beta"] * 1.01
        return gz

    layer.backward = broken
    rep = grad_check(layer, (z, None))
    assert not rep.passed
    assert {f[0] for f in rep.failures} == {"beta"}


def test_grad_check_samples_large_banks(rng):
    m = small_model()
    rep = grad_check(m, (rng.normal(size=(2, 16, 2)), rng.normal(size=(2, 4, 2))), max_per_bank=5)
    assert rep.checked == sum(min(5, a.size) for a in m.named_params().values())


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-3, 10.0), st.floats(-5, 5))
def test_adam_step_magnitude_bounded(lr, g):
    p = {"w": np.zeros(1)}
    adam_step(p, {"w": np.array([g])}, OptimizerState(lr=lr))
    assert abs(p["w"][0]) <= lr * (1 + 1e-12)
    if g != 0:
        assert math.copysign(1, -p["w"][0]) == math.copysign(1, g)
