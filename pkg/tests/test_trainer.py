import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TINY
from sleepshot import DivergenceError, ValidationError
from sleepshot.codec import Assembly
from sleepshot.model import ModelConfig, init_params
from sleepshot.trainer import (
    EarlyStopping,
    TrainConfig,
    evaluate,
    fit,
    loss,
    loss_and_grad,
    sgd_step,
)


def random_pred(rng, n, assembly="SAR"):
    """Valid post-activation outputs: softmax blocks, sigmoids, free coordinates."""
    lay = Assembly(assembly).layout
    v = rng.uniform(0.02, 0.98, size=(n, lay.size))
    for block in lay.softmax_blocks:
        idx = list(block)
        v[:, idx] /= v[:, idx].sum(axis=1, keepdims=True)
    v[:, lay.linear_indices] = rng.normal(0.4, 0.5, size=(n, len(lay.linear_indices)))
    return v


def random_target(rng, n, assembly="SAR"):
    lay = Assembly(assembly).layout
    t = np.zeros((n, lay.size))
    t[np.arange(n), rng.integers(0, 5, n)] = 1
    if lay.arousal_presence is not None:
        on = rng.random(n) < 0.5
        t[on, lay.arousal_presence] = 1
        t[np.ix_(on, list(lay.arousal_coords))] = rng.uniform(0, 1, (on.sum(), 2))
    if lay.resp_presence is not None:
        on = rng.random(n) < 0.5
        t[on, lay.resp_presence] = 1
        cls = rng.integers(0, 2, on.sum())
        t[np.flatnonzero(on), np.array(lay.resp_class)[cls]] = 1
        t[np.ix_(on, list(lay.resp_coords))] = rng.uniform(0, 2, (on.sum(), 2))
    return t


def test_exact_prediction_is_near_zero():
    t = random_target(np.random.default_rng(0), 8)
    rep = loss(t, t, "SAR")
    assert rep.categorical_ce < 2e-6 and rep.binary_ce < 1e-6 and rep.mse == 0
    assert loss(t, t, "SAR", "single").total == 0


def test_uniform_stage_prediction_costs_ln5():
    t = np.zeros(5)
    t[2] = 1
    rep = loss(np.full(5, 0.2), t, "S")
    assert rep.categorical_ce == pytest.approx(math.log(5), abs=1e-12)
    assert rep.total == pytest.approx(1.6094379124341003, abs=1e-12)


def test_bce_and_mse_hand_values():
    pred = np.array([1, 0, 0, 0, 0, 0.8, 0.5, 0.25])
    tgt = np.array([1, 0, 0, 0, 0, 1.0, 0.5, 0.5])
    rep = loss(pred, tgt, "SA")
    assert rep.binary_ce == pytest.approx(-math.log(0.8), abs=1e-12)
    assert rep.mse == pytest.approx(0.25 ** 2 / 2, abs=1e-12)


def test_loss_rejects_bad_input():
    with pytest.raises(ValidationError):
        loss(np.zeros(5), np.zeros(8), "SA")
    with pytest.raises(DivergenceError):
        loss(np.full(5, np.nan), np.zeros(5), "S")
    with pytest.raises(ValidationError, match="loss_mode"):
        TrainConfig(loss_mode="weighted")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(list(Assembly)))
def test_total_is_sum_of_components(seed, assembly):
    rng = np.random.default_rng(seed)
    rep = loss(random_pred(rng, 7, assembly), random_target(rng, 7, assembly), assembly)
    assert abs(rep.total - sum(rep.components)) < 1e-9
    assert abs(rep.total - sum(rep.families.values())) < 1e-9


@pytest.mark.parametrize("mode", ["multi", "single"])
@pytest.mark.parametrize("assembly", ["S", "SAR"])
def test_loss_gradient_matches_finite_differences(mode, assembly):
    rng = np.random.default_rng(4)
    pred, tgt = random_pred(rng, 3, assembly), random_target(rng, 3, assembly)
    _, g = loss_and_grad(pred, tgt, assembly, mode)
    h = 1e-6
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            up, dn = pred.copy(), pred.copy()
            up[i, j] += h
            dn[i, j] -= h
            num = (loss(up, tgt, assembly, mode).total - loss(dn, tgt, assembly, mode).total) / (2 * h)
            assert num == pytest.approx(g[i, j], rel=1e-5, abs=1e-8)


def test_sgd_examples():
    p = {"w": np.zeros(1)}
    v = {"w": np.zeros(1)}
    sgd_step(p, {"w": np.ones(1)}, v, 0.001, 0.0)
    assert p["w"][0] == pytest.approx(-0.001, abs=1e-15)

    p, v = {"w": np.zeros(1)}, {"w": np.zeros(1)}
    sgd_step(p, {"w": np.ones(1)}, v, 0.001, 0.9)
    sgd_step(p, {"w": np.ones(1)}, v, 0.001, 0.9)
    assert p["w"][0] == pytest.approx(-0.0029, abs=1e-15)

    p, v = {"w": np.arange(3.0)}, {"w": np.zeros(3)}
    sgd_step(p, {"w": np.zeros(3)}, v, 0.001, 0.9)
    np.testing.assert_array_equal(p["w"], [0, 1, 2])


def test_sgd_rejects_non_finite_without_mutating():
    p, v = {"a": np.zeros(2), "b": np.zeros(2)}, {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(DivergenceError, match="b"):
        sgd_step(p, {"a": np.ones(2), "b": np.array([1.0, np.inf])}, v, 0.1, 0.9)
    assert not p["a"].any() and not v["a"].any()


def test_early_stopping_walk():
    stopper = EarlyStopping(5)
    stops = [stopper.update(v) for v in [5, 4, 3, 3.1, 3.2, 3.3, 3.4, 3.5]]
    assert stops == [False] * 7 + [True]
    assert stopper.best_epoch == 3
    never = EarlyStopping(None)
    assert not any(never.update(v) for v in [1, 2, 3, 4, 5, 6, 7])


def _tiny_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2, 600)).astype(np.float32)
    y = random_target(rng, n, "SA")
    return x, y


def test_fit_single_epoch_cap_and_log():
    cfg = ModelConfig(assembly="SA", **TINY)
    x, y = _tiny_data()
    best, log = fit(init_params(cfg), x, y, range(8), range(8, 12), TrainConfig(batch_size=4, max_epochs=1))
    assert log.epochs_run == 1 and not log.stopped_early and log.best_epoch == 1
    row = log.epochs[0]
    assert set(row) >= {"epoch", "train_loss", "val_loss", "train_components", "val_components"}


def test_fit_is_deterministic_and_returns_best_params():
    cfg = ModelConfig(assembly="SA", **TINY)
    x, y = _tiny_data()
    tcfg = TrainConfig(batch_size=3, max_epochs=6, learning_rate=0.05, shuffle_seed=2)
    b1, l1 = fit(init_params(cfg), x, y, range(8), range(8, 12), tcfg)
    b2, l2 = fit(init_params(cfg), x, y, range(8), range(8, 12), tcfg)
    assert l1.to_json() == l2.to_json()
    for k in b1:
        assert b1[k].tobytes() == b2[k].tobytes()
    assert l1.best_val_loss == min(e["val_loss"] for e in l1.epochs)
    again = evaluate(b1, x, y, "multi", np.arange(8, 12))
    assert again.total == l1.best_val_loss


def test_fit_reports_divergence_with_location():
    cfg = ModelConfig(assembly="SA", **TINY)
    x, y = _tiny_data()
    with pytest.raises(DivergenceError, match="epoch 1"):
        fit(init_params(cfg), x, y, range(8), range(8, 12),
            TrainConfig(batch_size=4, max_epochs=3, learning_rate=1e12))


def test_fit_rejects_empty_split():
    cfg = ModelConfig(assembly="SA", **TINY)
    x, y = _tiny_data()
    with pytest.raises(ValidationError, match="non-empty"):
        fit(init_params(cfg), x, y, [], range(4), TrainConfig())
