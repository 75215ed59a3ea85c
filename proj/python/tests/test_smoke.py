import math

import numpy as np
import pytest

import setcon


def test_gridworld_shapes_and_range():
    seq = setcon.gridworld_sequence(0)
    assert seq["frames"].shape == (8, 5, 5, 3)
    assert seq["masks"].shape == (8, 5, 5)
    assert seq["frames"].min() >= -1.0 and seq["frames"].max() <= 1.0
    assert set(np.unique(seq["masks"])) <= {0, 1, 2, 3}
    again = setcon.gridworld_sequence(0)
    assert np.array_equal(seq["frames"], again["frames"])


def test_balls_shapes():
    seq = setcon.bouncing_balls_sequence(3)
    assert seq["frames"].shape == (12, 32, 32, 3)
    assert len(seq["palette"]) == 3


def test_palette_and_state_count():
    assert setcon.palette(3, 0.0)[0] == (255, 0, 0)
    assert setcon.gridworld_state_count(3) == 970200


def test_setcon_identical_embeddings_give_log_m():
    zs = np.full((6, 4), 0.3)
    zp = np.full((2, 4), 0.3)
    assert setcon.setcon_loss(zs, zp, 2, 3) == pytest.approx(math.log(8), abs=1e-9)


def test_slotwise_runs_and_rejects_bad_shapes():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(2 * 3 * 2, 4))
    p = rng.normal(size=(2 * 1 * 2, 4))
    assert setcon.slotwise_loss(s, p, 2, 3, 2) >= 0.0
    with pytest.raises(setcon.DimensionError):
        setcon.slotwise_loss(s, p, 2, 3, 3)


def test_ari():
    assert setcon.adjusted_rand_index([1, 1, 2, 2], [3, 3, 0, 0]) == pytest.approx(1.0)
    assert setcon.adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) < 0.0


def test_resolve_lr():
    assert setcon.resolve_lr(3e-4, 64) == pytest.approx(7.5e-5)
    with pytest.raises(setcon.ArgumentError):
        setcon.resolve_lr(0.0, 64)


def test_train_evaluate_rollout(tmp_path):
    cfg = {
        "precision": "f64",
        "model": {"hidden": 16},
        "train": {"batch_size": 2, "steps": 3, "eval_batches": 2, "log_every": 1, "checkpoint_every": 3},
        "data": {"eval_sequences": 4},
    }
    r = setcon.train(cfg, str(tmp_path))
    assert r["steps_completed"] == 3
    assert not r["diverged"]
    assert [m["head"] for m in r["training_metrics"]] == ["slots", "predictions"]
    metrics = setcon.evaluate(r["checkpoint"], 4)
    assert metrics[0]["n"] == 4
    assert len(setcon.rollout_mse(r["checkpoint"], 5, 4)) == 5


def test_bad_config_names_key(tmp_path):
    with pytest.raises(setcon.ConfigError, match="model.bogus"):
        setcon.train({"model": {"bogus": 1}}, str(tmp_path))


def test_gradient_gate_primitives():
    cases = setcon.gradient_gate(1, False)
    assert cases
    assert all(passed for _, _, passed in cases)
