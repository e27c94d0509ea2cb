"""Residual MLP policy: an input embedding, depth-N residual tanh blocks, and
a linear action head, with full activation tracing and hand-derived task-loss
gradients. Forward functions accept a single sample or a (batch, dim) matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import containers
from .errors import ConfigError, ShapeError
from .numerics import Params, affine_forward, affine_vjp, as_f64, tanh_vjp


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int = 7
    instr_dim: int = 5
    hidden_dim: int = 64
    depth: int = 12
    action_dim: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("obs_dim", "instr_dim", "hidden_dim", "action_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.depth < 4:
            raise ConfigError("depth must be >= 4")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.instr_dim


class PolicyModel:
    """Weight container; the math lives in module-level functions."""

    def __init__(self, config: PolicyConfig, params: Params):
        self.config = config
        self.params = params

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.config, {k: v.copy() for k, v in self.params.items()})


def scaled_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_policy(config: PolicyConfig) -> PolicyModel:
    """Deterministically initialize a policy from its config seed."""
    rng = np.random.default_rng(config.seed)
    d = config.hidden_dim
    params: Params = {}
    params["embed.W"] = scaled_uniform(rng, config.input_dim, (d, config.input_dim))
    params["embed.b"] = np.zeros(d)
    for i in range(config.depth):
        params[f"block{i}.W1"] = scaled_uniform(rng, d, (d, d))
        params[f"block{i}.b1"] = np.zeros(d)
        params[f"block{i}.W2"] = scaled_uniform(rng, d, (d, d))
        params[f"block{i}.b2"] = np.zeros(d)
    params["head.W"] = scaled_uniform(rng, d, (config.action_dim, d))
    params["head.b"] = np.zeros(config.action_dim)
    return PolicyModel(config, params)


def expected_n_params(config: PolicyConfig) -> int:
    d = config.hidden_dim
    return (
        (config.input_dim + 1) * d
        + config.depth * (2 * d * d + 2 * d)
        + (d + 1) * config.action_dim
    )


def embed_forward(model: PolicyModel, obs, instr) -> np.ndarray:
    cfg = model.config
    obs = np.asarray(obs, dtype=np.float64)
    instr = np.asarray(instr, dtype=np.float64)
    if obs.shape[-1] != cfg.obs_dim:
        raise ShapeError(f"obs has size {obs.shape[-1]}, expected {cfg.obs_dim}")
    if instr.shape[-1] != cfg.instr_dim:
        raise ShapeError(f"instr has size {instr.shape[-1]}, expected {cfg.instr_dim}")
    u = np.concatenate([obs, instr], axis=-1)
    return affine_forward(model.params["embed.W"], model.params["embed.b"], u)


def block_forward(model: PolicyModel, i: int, x: np.ndarray, cache: bool = False):
    """y = x + W2 @ tanh(W1 @ x + b1) + b2 for block i."""
    p = model.params
    z = affine_forward(p[f"block{i}.W1"], p[f"block{i}.b1"], x)
    h = np.tanh(z)
    y = x + affine_forward(p[f"block{i}.W2"], p[f"block{i}.b2"], h)
    return (y, h) if cache else y


def block_vjp(model: PolicyModel, i: int, x, h, dy, param_grads: Params | None = None):
    """VJP through block i; accumulates parameter grads into param_grads when given."""
    p = model.params
    dh = dy @ p[f"block{i}.W2"]
    dz = tanh_vjp(h, dh)
    dx = dy + dz @ p[f"block{i}.W1"]
    if param_grads is not None:
        dy2 = np.atleast_2d(dy)
        dz2 = np.atleast_2d(dz)
        param_grads[f"block{i}.W2"] += dy2.T @ np.atleast_2d(h)
        param_grads[f"block{i}.b2"] += dy2.sum(axis=0)
        param_grads[f"block{i}.W1"] += dz2.T @ np.atleast_2d(x)
        param_grads[f"block{i}.b1"] += dz2.sum(axis=0)
    return dx


def head_forward(model: PolicyModel, x: np.ndarray) -> np.ndarray:
    return affine_forward(model.params["head.W"], model.params["head.b"], x)


def forward_recorded(model: PolicyModel, obs, instr):
    """Run the full stack and record every hidden state.

    Returns (action, trace) where trace[0] is the embedded input and
    trace[i + 1] the output of block i; len(trace) == depth + 1.
    """
    x = embed_forward(model, obs, instr)
    trace = [x]
    for i in range(model.config.depth):
        x = block_forward(model, i, x)
        trace.append(x)
    return head_forward(model, x), trace


def mse_and_grad(pred: np.ndarray, targets: np.ndarray):
    """Mean squared error over all entries and its gradient w.r.t. pred."""
    if pred.shape != targets.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {targets.shape}")
    err = pred - targets
    loss = float(np.mean(err * err))
    return loss, (2.0 / err.size) * err


def task_loss_and_grads(model: PolicyModel, obs, instr, targets):
    """Batch MSE between predicted and target actions, with gradients for
    every model parameter. The batch must be nonempty."""
    obs = as_f64(obs, "obs")
    instr = as_f64(instr, "instr")
    targets = as_f64(targets, "targets")
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ValueError("task loss needs a nonempty 2-D batch")
    cfg = model.config
    u = np.concatenate([obs, instr], axis=-1)
    x = affine_forward(model.params["embed.W"], model.params["embed.b"], u)
    xs = [x]
    hs = []
    for i in range(cfg.depth):
        x, h = block_forward(model, i, x, cache=True)
        xs.append(x)
        hs.append(h)
    pred = head_forward(model, x)
    loss, dpred = mse_and_grad(pred, targets)

    grads: Params = {k: np.zeros_like(v) for k, v in model.params.items()}
    dW, db, dx = affine_vjp(model.params["head.W"], xs[-1], dpred)
    grads["head.W"] += dW
    grads["head.b"] += db
    for i in reversed(range(cfg.depth)):
        dx = block_vjp(model, i, xs[i], hs[i], dx, grads)
    dW, db, _ = affine_vjp(model.params["embed.W"], u, dx)
    grads["embed.W"] += dW
    grads["embed.b"] += db
    return loss, grads


_SCHEMA_VERSION = 1


def save_policy(path, model: PolicyModel) -> None:
    header = {"kind": "policy", "schema_version": _SCHEMA_VERSION,
              "config": asdict(model.config)}
    containers.save_arrays(path, header, model.params)


def load_policy(path) -> PolicyModel:
    header, arrays = containers.load_arrays(path)
    if header.get("kind") != "policy":
        raise ConfigError(f"{path} is not a policy checkpoint")
    return PolicyModel(PolicyConfig(**header["config"]), arrays)
