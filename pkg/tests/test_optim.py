import numpy as np
import pytest

from synnet.layers import UsageError
from synnet.model import Topology, build_model
from synnet.optim import (OptimState, TrainConfig, TrainingDivergedError,
                          sgd_step, train)
from synnet.loss import LossWeights, SsimConfig
from synnet.tensor import RngStream, ParameterError


def test_sgd_two_steps_hand_computed():
    params = {"w": np.array([1.0])}
    state = OptimState(lr=0.01, momentum=0.9)
    sgd_step(params, {"w": np.array([0.1])}, state)
    assert state.velocity["w"][0] == pytest.approx(0.001, abs=1e-15)
    assert params["w"][0] == pytest.approx(0.999, abs=1e-15)
    sgd_step(params, {"w": np.array([0.1])}, state)
    assert state.velocity["w"][0] == pytest.approx(0.0019, abs=1e-15)
    assert params["w"][0] == pytest.approx(0.9971, abs=1e-15)
    assert state.iteration == 2


def test_sgd_zero_momentum_is_plain_gradient_descent():
    rng = RngStream(1)
    params = {"w": rng.uniform((2, 2, 3, 3), -1, 1, dtype="double")}
    grads = {"w": rng.uniform((2, 2, 3, 3), -1, 1, dtype="double")}
    expect = params["w"] - 0.05 * grads["w"]
    sgd_step(params, grads, OptimState(lr=0.05, momentum=0.0))
    assert np.allclose(params["w"], expect, atol=1e-15)


def test_sgd_constant_gradient_velocity_geometric_series():
    # with a constant gradient g, velocity after k steps is
    # lr * g * (1 - rho^k) / (1 - rho)
    lr, rho, g = 0.01, 0.9, 0.3
    params = {"w": np.array([0.0])}
    state = OptimState(lr=lr, momentum=rho)
    for k in range(1, 11):
        sgd_step(params, {"w": np.array([g])}, state)
        expect = lr * g * (1 - rho ** k) / (1 - rho)
        assert state.velocity["w"][0] == pytest.approx(expect, rel=1e-12)


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(UsageError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimState())


def test_sgd_converges_on_quadratic():
    # minimize 0.5 * ||w - 3||^2 by feeding grad = w - 3
    params = {"w": np.array([0.0])}
    state = OptimState(lr=0.1, momentum=0.9)
    for _ in range(500):
        sgd_step(params, {"w": params["w"] - 3.0}, state)
    assert params["w"][0] == pytest.approx(3.0, abs=1e-9)


def _toy_dataset(n=6, size=8, seed=0):
    rng = RngStream(seed)
    out = []
    for i in range(n):
        x = rng.uniform((1, 1, size, size), 0.0, 1.0, dtype="double")
        out.append(([x], [1.0 - x]))
    return out


def _toy_model(seed=0):
    topo = Topology(kind="siso", depth=1, channels=(4,), final_width=4)
    return build_model(topo, RngStream(seed).child("init"), dtype="double")


def test_train_history_row_per_iteration():
    model, params, state = _toy_model()
    cfg = TrainConfig(batch_size=2, epochs=3, seed=7, loss="l2")
    params, opt, history = train(model, params, state, _toy_dataset(), cfg)
    assert len(history) == 3 * 3                     # 6 samples / batch 2 * 3 epochs
    assert [row["iter"] for row in history] == list(range(1, 10))
    assert opt.iteration == 9 and opt.epoch == 3
    assert all(np.isfinite(row["total"]) for row in history)


def test_train_loss_decreases_on_toy_problem():
    model, params, state = _toy_model()
    cfg = TrainConfig(batch_size=6, epochs=40, seed=7, loss="l2",
                      loss_weights=LossWeights(10, 5, 0.5, 0.0))
    opt = OptimState(lr=0.1, momentum=0.9)
    params, opt, history = train(model, params, state, _toy_dataset(), cfg, opt)
    assert history[-1]["total"] < 0.25 * history[0]["total"]


def test_train_is_deterministic():
    runs = []
    for _ in range(2):
        model, params, state = _toy_model()
        cfg = TrainConfig(batch_size=2, epochs=2, seed=11, loss="weighted_l2")
        opt = OptimState(lr=0.05, momentum=0.9)
        params, opt, history = train(model, params, state, _toy_dataset(), cfg, opt)
        runs.append((params, [row["total"] for row in history]))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0]:
        assert np.array_equal(runs[0][0][name], runs[1][0][name])


def test_train_resume_matches_uninterrupted():
    dataset = _toy_dataset()

    def run(epochs, carry=None):
        model, params, state = _toy_model()
        if carry is not None:
            params, state, opt = carry
        else:
            opt = OptimState(lr=0.05, momentum=0.9)
        cfg = TrainConfig(batch_size=2, epochs=epochs, seed=13, loss="l2")
        params, opt, _ = train(model, params, state, dataset, cfg, opt)
        return params, state, opt

    full = run(4)
    half = run(2)
    resumed = run(4, carry=half)
    for name in full[0]:
        assert np.array_equal(full[0][name], resumed[0][name])
    for name in full[1]:
        assert np.array_equal(full[1][name], resumed[1][name])


def test_train_shuffle_flag_changes_visit_order():
    # with shuffle off the loss sequence must be identical across seeds
    def run(seed, shuffle):
        model, params, state = _toy_model()
        cfg = TrainConfig(batch_size=1, epochs=1, seed=seed, loss="l2",
                          shuffle=shuffle)
        _, _, history = train(model, params, state, _toy_dataset(), cfg)
        return [row["total"] for row in history]

    assert run(1, False) == run(2, False)
    assert run(1, True) != run(2, True)


def test_train_joint_loss_populates_all_terms():
    model, params, state = _toy_model()
    cfg = TrainConfig(batch_size=6, epochs=1, seed=3, loss="joint",
                      ssim=SsimConfig(mode="global"))
    _, _, history = train(model, params, state, _toy_dataset(), cfg)
    row = history[0]
    assert row["l2"] > 0 and row["ssim"] > 0 and row["tv"] > 0 and row["wd"] > 0


def test_train_divergence_guard():
    model, params, state = _toy_model()
    for name in params:                             # blow up the starting point
        params[name] = params[name] + 1e100
    cfg = TrainConfig(batch_size=6, epochs=5, seed=3, loss="l2")
    with pytest.raises((TrainingDivergedError, ParameterError)):
        train(model, params, state, _toy_dataset(), cfg)


def test_train_rejects_empty_dataset_and_bad_config():
    model, params, state = _toy_model()
    with pytest.raises(ParameterError):
        train(model, params, state, [], TrainConfig())
    with pytest.raises(ParameterError):
        TrainConfig(loss="l1")
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
