import numpy as np
import pytest

from dynskip.errors import ConfigError
from dynskip.model import (
    PolicyConfig,
    build_policy,
    block_forward,
    expected_n_params,
    forward_recorded,
    load_policy,
    save_policy,
    task_loss_and_grads,
)
from dynskip.numerics import grad_check


def tiny_config(**kw):
    base = dict(obs_dim=3, instr_dim=2, hidden_dim=8, depth=4, action_dim=2, seed=7)
    base.update(kw)
    return PolicyConfig(**base)


class TestBuildPolicy:
    def test_deterministic_per_seed(self):
        a = build_policy(tiny_config())
        b = build_policy(tiny_config())
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_seed_changes_weights(self):
        a = build_policy(tiny_config(seed=1))
        b = build_policy(tiny_config(seed=2))
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_param_count_formula(self):
        cfg = PolicyConfig(obs_dim=7, instr_dim=5, hidden_dim=64, depth=12,
                           action_dim=3, seed=0)
        model = build_policy(cfg)
        assert model.n_params() == expected_n_params(cfg)
        assert model.n_params() == (7 + 5 + 1) * 64 + 12 * (2 * 64 * 64 + 2 * 64) + 65 * 3

    def test_invalid_dims(self):
        with pytest.raises(ConfigError):
            tiny_config(depth=3)
        with pytest.raises(ConfigError):
            tiny_config(hidden_dim=0)


class TestForwardRecorded:
    def test_zero_blocks_are_identity(self):
        model = build_policy(tiny_config())
        for i in range(model.config.depth):
            for part in ("W1", "b1", "W2", "b2"):
                model.params[f"block{i}.{part}"][:] = 0.0
        obs = np.array([0.1, -0.2, 0.3])
        instr = np.array([1.0, 0.0])
        _, trace = forward_recorded(model, obs, instr)
        for x in trace[1:]:
            assert np.array_equal(x, trace[0])

    def test_purity(self):
        model = build_policy(tiny_config())
        obs = np.array([0.1, -0.2, 0.3])
        instr = np.array([0.0, 1.0])
        a1, _ = forward_recorded(model, obs, instr)
        a2, _ = forward_recorded(model, obs, instr)
        assert np.array_equal(a1, a2)

    def test_action_is_head_of_last_trace_entry(self):
        model = build_policy(tiny_config(seed=3))
        rng = np.random.default_rng(0)
        obs = rng.normal(size=3)
        instr = rng.normal(size=2)
        action, trace = forward_recorded(model, obs, instr)
        head = model.params["head.W"] @ trace[-1] + model.params["head.b"]
        assert np.array_equal(action, head)

    def test_trace_consistency_with_standalone_blocks(self):
        model = build_policy(tiny_config(seed=11))
        rng = np.random.default_rng(1)
        _, trace = forward_recorded(model, rng.normal(size=3), rng.normal(size=2))
        for i in range(model.config.depth):
            redo = block_forward(model, i, trace[i])
            assert np.max(np.abs(redo - trace[i + 1])) < 1e-12

    def test_batched_matches_single(self):
        model = build_policy(tiny_config(seed=5))
        rng = np.random.default_rng(2)
        obs = rng.normal(size=(4, 3))
        instr = rng.normal(size=(4, 2))
        batch_act, batch_trace = forward_recorded(model, obs, instr)
        for i in range(4):
            act, trace = forward_recorded(model, obs[i], instr[i])
            assert np.allclose(batch_act[i], act, rtol=1e-12, atol=1e-14)
            for a, b in zip(batch_trace, trace):
                assert np.allclose(a[i], b, rtol=1e-12, atol=1e-14)


class TestTaskLoss:
    def _batch(self, model, n=3, seed=0):
        rng = np.random.default_rng(seed)
        obs = rng.normal(size=(n, model.config.obs_dim))
        instr = rng.normal(size=(n, model.config.instr_dim))
        return obs, instr

    def test_perfect_targets_zero_loss(self):
        model = build_policy(tiny_config())
        obs, instr = self._batch(model)
        pred, _ = forward_recorded(model, obs, instr)
        loss, grads = task_loss_and_grads(model, obs, instr, pred)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_duplicating_batch_keeps_loss(self):
        model = build_policy(tiny_config(seed=9))
        obs, instr = self._batch(model, n=4, seed=3)
        targets = np.random.default_rng(4).normal(size=(4, model.config.action_dim))
        loss1, _ = task_loss_and_grads(model, obs, instr, targets)
        loss2, _ = task_loss_and_grads(
            model,
            np.concatenate([obs, obs]),
            np.concatenate([instr, instr]),
            np.concatenate([targets, targets]),
        )
        assert abs(loss1 - loss2) < 1e-12

    def test_empty_batch_rejected(self):
        model = build_policy(tiny_config())
        with pytest.raises(ValueError):
            task_loss_and_grads(model, np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)))

    def test_gradients_match_finite_differences(self):
        cfg = PolicyConfig(obs_dim=2, instr_dim=2, hidden_dim=4, depth=4,
                           action_dim=2, seed=13)
        model = build_policy(cfg)
        rng = np.random.default_rng(5)
        obs = rng.normal(size=(3, 2))
        instr = rng.normal(size=(3, 2))
        targets = rng.normal(size=(3, 2))

        def f(params):
            return task_loss_and_grads(model, obs, instr, targets)

        err = grad_check(f, model.params, step=1e-5)
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_policy(tiny_config(seed=21))
        path = tmp_path / "model.npz"
        save_policy(path, model)
        loaded = load_policy(path)
        assert loaded.config == model.config
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])

    def test_save_is_byte_deterministic(self, tmp_path):
        model = build_policy(tiny_config(seed=22))
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        save_policy(p1, model)
        save_policy(p2, model)
        assert p1.read_bytes() == p2.read_bytes()
