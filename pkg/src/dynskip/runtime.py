"""Skipping inference runtime.

Per-dynamic-layer gate controllers decide, from the current hidden state,
whether to jump straight to the segment's closing static layer through a
small adapter. Gate activity is gated in turn by per-segment allow points
that move with the trajectory-continuity signal (hysteresis: fast forward
on continuity drops, single-step retreat on recovery), and a verification
pass re-predicts the first post-drop action at full depth.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers, flops, sim
from .errors import ConfigError, DegenerateInputError, ShapeError
from .model import PolicyModel, block_forward, embed_forward, forward_recorded, head_forward, scaled_uniform
from .numerics import Params, affine_forward, affine_vjp, sigmoid, tanh_vjp
from .profiler import StaticSet

MODES = ("full", "dysl", "controllers-only", "random-skip")


# --- skip modules ---------------------------------------------------------------

@dataclass
class SkipModules:
    """One gate controller and one suffix adapter per dynamic layer."""

    static_set: StaticSet
    hidden_dim: int
    tau: float
    params: Params

    @property
    def adapter_dim(self) -> int:
        return flops.adapter_hidden_dim(self.hidden_dim)

    @property
    def controller_dim(self) -> int:
        return flops.controller_hidden_dim(self.hidden_dim)

    def adapter_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("adapter")]

    def controller_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("controller")]

    def copy(self) -> "SkipModules":
        return SkipModules(self.static_set, self.hidden_dim, self.tau,
                           {k: v.copy() for k, v in self.params.items()})


def init_skip_modules(model: PolicyModel, static_set: StaticSet,
                      tau: float = 0.5, seed: int = 0) -> SkipModules:
    """Scaled-uniform initialization of adapters/controllers, deterministic
    per seed. tau is the gate threshold for skipping."""
    if static_set.depth != model.config.depth:
        raise ConfigError("static set depth does not match the model")
    if not 0.0 < tau < 1.0:
        raise ConfigError("tau must be in (0, 1)")
    d = model.config.hidden_dim
    da = flops.adapter_hidden_dim(d)
    dc = flops.controller_hidden_dim(d)
    rng = np.random.default_rng(seed)
    params: Params = {}
    for j in static_set.dynamic_layers:
        params[f"adapter{j}.W1"] = scaled_uniform(rng, d, (da, d))
        params[f"adapter{j}.b1"] = np.zeros(da)
        params[f"adapter{j}.W2"] = scaled_uniform(rng, da, (d, da))
        params[f"adapter{j}.b2"] = np.zeros(d)
        params[f"controller{j}.W1"] = scaled_uniform(rng, d, (dc, d))
        params[f"controller{j}.b1"] = np.zeros(dc)
        params[f"controller{j}.W2"] = scaled_uniform(rng, dc, (1, dc))
        params[f"controller{j}.b2"] = np.zeros(1)
    return SkipModules(static_set=static_set, hidden_dim=d, tau=tau, params=params)


def adapter_forward(mods: SkipModules, j: int, x, cache: bool = False):
    p = mods.params
    z = affine_forward(p[f"adapter{j}.W1"], p[f"adapter{j}.b1"], x)
    h = np.tanh(z)
    y = affine_forward(p[f"adapter{j}.W2"], p[f"adapter{j}.b2"], h)
    return (y, h) if cache else y


def adapter_vjp(mods: SkipModules, j: int, x, h, dy, param_grads: Params):
    p = mods.params
    dW2, db2, dh = affine_vjp(p[f"adapter{j}.W2"], h, dy)
    dz = tanh_vjp(h, dh)
    dW1, db1, dx = affine_vjp(p[f"adapter{j}.W1"], x, dz)
    param_grads[f"adapter{j}.W2"] += dW2
    param_grads[f"adapter{j}.b2"] += db2
    param_grads[f"adapter{j}.W1"] += dW1
    param_grads[f"adapter{j}.b1"] += db1
    return dx


def controller_forward(mods: SkipModules, j: int, x, cache: bool = False):
    """Gate value in (0, 1); scalar for a vector input, (B,) for a batch."""
    p = mods.params
    z = affine_forward(p[f"controller{j}.W1"], p[f"controller{j}.b1"], x)
    h = np.tanh(z)
    g = sigmoid(affine_forward(p[f"controller{j}.W2"], p[f"controller{j}.b2"], h))
    g = g[..., 0] if g.ndim > 1 else float(g[0])
    return (g, h) if cache else g


def controller_vjp(mods: SkipModules, j: int, x, h, g, dg, param_grads: Params):
    p = mods.params
    dz2 = np.asarray(dg) * g * (1.0 - g)
    dz2 = dz2[..., None] if np.ndim(dz2) else np.array([dz2])
    dW2, db2, dh = affine_vjp(p[f"controller{j}.W2"], h, dz2)
    dz = tanh_vjp(h, dh)
    dW1, db1, dx = affine_vjp(p[f"controller{j}.W1"], x, dz)
    param_grads[f"controller{j}.W2"] += dW2
    param_grads[f"controller{j}.b2"] += db2
    param_grads[f"controller{j}.W1"] += dW1
    param_grads[f"controller{j}.b1"] += db1
    return dx


_SKIPMODS_SCHEMA_VERSION = 1


def save_skip_modules(path, mods: SkipModules) -> None:
    header = {
        "kind": "skip_modules",
        "schema_version": _SKIPMODS_SCHEMA_VERSION,
        "static_indices": list(mods.static_set.indices),
        "depth": mods.static_set.depth,
        "hidden_dim": mods.hidden_dim,
        "tau": mods.tau,
    }
    containers.save_arrays(path, header, mods.params)


def load_skip_modules(path) -> SkipModules:
    header, arrays = containers.load_arrays(path)
    if header.get("kind") != "skip_modules":
        raise ConfigError(f"{path} is not a skip-modules checkpoint")
    static_set = StaticSet(indices=tuple(header["static_indices"]),
                           depth=header["depth"])
    return SkipModules(static_set=static_set, hidden_dim=header["hidden_dim"],
                       tau=header["tau"], params=arrays)


# --- continuity and allow points -------------------------------------------------

def continuity(window, k: int) -> float:
    """Negative mean L2 difference of consecutive actions over the trailing
    window of up to k+1 actions. Short windows (episode warm-up) use however
    many pairs are available, keeping the mean normalization."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    acts = [np.asarray(a, dtype=np.float64) for a in list(window)[-(k + 1):]]
    if len(acts) < 2:
        raise DegenerateInputError("continuity needs at least two actions")
    total = 0.0
    for prev, cur in zip(acts[:-1], acts[1:]):
        total += float(np.linalg.norm(cur - prev))
    return -total / (len(acts) - 1)


@dataclass
class AllowPointState:
    """Per-segment skipping-allow points plus the continuity bookkeeping that
    drives them. Point l for segment (front, back) means: controllers are
    disabled (layers forced) strictly below l; confined to front < l <= back."""

    static_set: StaticSet
    k: int
    points: list[int]
    window: deque = field(default_factory=deque)
    c_history: deque = field(default_factory=lambda: deque(maxlen=3))
    armed: bool = True

    @property
    def warm(self) -> bool:
        """True until a full window of k+1 actions has been observed."""
        return len(self.window) < self.k + 1


def init_allow_state(static_set: StaticSet, k: int) -> AllowPointState:
    if k < 1:
        raise ConfigError("k must be >= 1")
    points = [front + 1 for front, _ in static_set.segments]
    return AllowPointState(static_set=static_set, k=k, points=points,
                           window=deque(maxlen=k + 1))


def observe_action(state: AllowPointState, action) -> None:
    state.window.append(np.asarray(action, dtype=np.float64).copy())
    if len(state.window) >= 2:
        state.c_history.append(continuity(state.window, state.k))


def replace_last_action(state: AllowPointState, action) -> None:
    """Swap the newest window action (verification re-prediction) and
    recompute the newest continuity value from it."""
    state.window[-1] = np.asarray(action, dtype=np.float64).copy()
    if state.c_history:
        state.c_history[-1] = continuity(state.window, state.k)


def update_allow_points(state: AllowPointState, c_t: float, c_prev: float,
                        eta: float, stride: int | None = None) -> AllowPointState:
    """Hysteresis move of every allow point from the continuity change.

    A drop (c_t - c_prev < -eta) advances points by ceil(|dC| / eta)
    (or the constant `stride` when given), clamped at the closing static
    layer; a rise (> eta) retreats by exactly one, clamped just after the
    opening static layer; the dead band leaves points unchanged.
    """
    if eta <= 0:
        raise ConfigError("eta must be positive")
    dc = c_t - c_prev
    segments = state.static_set.segments
    if dc < -eta:
        dl = int(stride) if stride is not None else math.ceil(abs(dc) / eta)
        if dl < 1:
            raise ConfigError("stride must be >= 1")
        state.points = [min(back, l + dl)
                        for (front, back), l in zip(segments, state.points)]
    elif dc > eta:
        state.points = [max(front + 1, l - 1)
                        for (front, back), l in zip(segments, state.points)]
    return state


def should_verify(armed: bool, delta_c: float, eta: float) -> bool:
    """Verification trigger: fire only on the first continuity drop after
    (re-)arming; re-arming happens when delta_c returns above -eta."""
    return armed and delta_c < -eta


# --- skipping forward passes ------------------------------------------------------

@dataclass
class ExecTrace:
    """Per-inference execution record; the latency proxy.

    executed_layers is the path that produced the returned action (all
    layers for a verified re-run, with the discarded first pass preserved in
    skip_run_layers so its cost stays accounted)."""

    executed_layers: list[int]
    controllers_evaluated: list[int] = field(default_factory=list)
    adapters_invoked: list[int] = field(default_factory=list)
    skipped_segments: list[int] = field(default_factory=list)
    verified: bool = False
    skip_run_layers: list[int] | None = None
    flops: int = 0

    @property
    def block_executions(self) -> int:
        first = len(self.skip_run_layers) if self.verified else 0
        return first + len(self.executed_layers)


def _full_trace(costs: flops.ArchCosts) -> ExecTrace:
    executed = list(range(costs.depth))
    return ExecTrace(executed_layers=executed,
                     flops=flops.forward_flops(costs, costs.depth))


def forward_full(model: PolicyModel, costs: flops.ArchCosts, obs, instr):
    action, _ = forward_recorded(model, obs, instr)
    return action, _full_trace(costs)


def forward_skipped(model: PolicyModel, mods: SkipModules, points, obs, instr,
                    costs: flops.ArchCosts | None = None):
    """Skipping forward pass under the given allow points.

    Per segment: layers below the segment's point execute unconditionally
    with controllers disabled; from the point on, each dynamic layer's
    controller is evaluated first, and a gate above tau routes the hidden
    state through that layer's adapter straight to the closing static layer.
    Static layers always execute.
    """
    static_set = mods.static_set
    segments = static_set.segments
    if len(points) != len(segments):
        raise ShapeError(f"{len(points)} allow points for {len(segments)} segments")
    if costs is None:
        costs = flops.arch_costs(model.config)
    x = embed_forward(model, obs, instr)
    trace = ExecTrace(executed_layers=[])
    static = set(static_set.indices)
    seg_idx = {seg: i for i, seg in enumerate(segments)}

    layer = 0
    for seg in segments:
        front, back = seg
        point = points[seg_idx[seg]]
        if not front < point <= back:
            raise ConfigError(f"allow point {point} outside segment {seg}")
        # statics (and any empty-segment gap) before this segment
        while layer <= front:
            if layer in static:
                x = block_forward(model, layer, x)
                trace.executed_layers.append(layer)
            layer += 1
        jumped = False
        for j in range(front + 1, back):
            if jumped:
                continue
            if j >= point:
                g = controller_forward(mods, j, x)
                trace.controllers_evaluated.append(j)
                if g > mods.tau:
                    x = adapter_forward(mods, j, x)
                    trace.adapters_invoked.append(j)
                    trace.skipped_segments.append(seg_idx[seg])
                    jumped = True
                    continue
            x = block_forward(model, j, x)
            trace.executed_layers.append(j)
        layer = back
    # trailing statics (includes the final block)
    while layer < static_set.depth:
        if layer in static:
            x = block_forward(model, layer, x)
            trace.executed_layers.append(layer)
        layer += 1
    action = head_forward(model, x)
    trace.flops = flops.flop_estimate(costs, trace.executed_layers,
                                      trace.controllers_evaluated,
                                      trace.adapters_invoked)
    return action, trace


def forward_random(model: PolicyModel, mods: SkipModules, p: float,
                   rng: np.random.Generator, obs, instr,
                   costs: flops.ArchCosts | None = None):
    """Random-skip baseline: every dynamic layer skips i.i.d. with
    probability p (through its adapter, jumping to the closing static
    layer); controllers are never consulted."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("skip probability must be in [0, 1]")
    static_set = mods.static_set
    if costs is None:
        costs = flops.arch_costs(model.config)
    x = embed_forward(model, obs, instr)
    trace = ExecTrace(executed_layers=[])
    static = set(static_set.indices)
    seg_of = {}
    for i, seg in enumerate(static_set.segments):
        for j in static_set.segment_layers(seg):
            seg_of[j] = i
    jump_target: int | None = None
    for layer in range(static_set.depth):
        if layer in static:
            x = block_forward(model, layer, x)
            trace.executed_layers.append(layer)
            jump_target = None
            continue
        if jump_target is not None:
            continue
        if rng.random() < p:
            x = adapter_forward(mods, layer, x)
            trace.adapters_invoked.append(layer)
            trace.skipped_segments.append(seg_of[layer])
            jump_target = layer
        else:
            x = block_forward(model, layer, x)
            trace.executed_layers.append(layer)
    action = head_forward(model, x)
    trace.flops = flops.flop_estimate(costs, trace.executed_layers,
                                      trace.controllers_evaluated,
                                      trace.adapters_invoked)
    return action, trace


# --- episode rollout --------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    k: int = 5
    eta: float = 0.004
    stride: int | None = None   # None = adaptive ceil(|dC| / eta)
    verification: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")


@dataclass
class StepRecord:
    step: int
    trace: ExecTrace
    continuity: float | None
    allow_points: list[int] | None


@dataclass
class Episode:
    mode: str
    task_seed: int
    steps: list = field(default_factory=list)     # StepRecord
    actions: list = field(default_factory=list)
    events: list = field(default_factory=list)
    success_length: int = 0
    success: bool = False
    diverged: bool = False
    diagnostic: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def total_flops(self) -> int:
        return sum(rec.trace.flops for rec in self.steps)

    def mean_executed_layers(self) -> float:
        return float(np.mean([rec.trace.block_executions for rec in self.steps]))

    def controller_evals_per_step(self) -> float:
        return float(np.mean([len(rec.trace.controllers_evaluated) for rec in self.steps]))

    def verify_rate(self) -> float:
        return float(np.mean([rec.trace.verified for rec in self.steps]))


def post_skip_verify(model: PolicyModel, costs, allow_state: AllowPointState,
                     trace: ExecTrace, obs, instr, eta: float):
    """On the first armed continuity drop, re-predict the current action at
    full depth, merge the compute of both passes into one trace, and
    recompute the newest continuity value from the replacement.

    Returns (action, trace, fired) with fired False when the trigger did not
    fire; a drop on a step that skipped nothing disarms without a re-run
    because the re-prediction would be identical.
    """
    hist = allow_state.c_history
    if len(hist) < 2:
        return None, trace, False
    dc = hist[-1] - hist[-2]
    if not should_verify(allow_state.armed, dc, eta):
        return None, trace, False
    allow_state.armed = False
    if not trace.skipped_segments:
        return None, trace, False
    action, _ = forward_recorded(model, obs, instr)
    merged = ExecTrace(
        executed_layers=list(range(costs.depth)),
        controllers_evaluated=trace.controllers_evaluated,
        adapters_invoked=trace.adapters_invoked,
        skipped_segments=trace.skipped_segments,
        verified=True,
        skip_run_layers=trace.executed_layers,
        flops=trace.flops + flops.forward_flops(costs, costs.depth),
    )
    replace_last_action(allow_state, action)
    return action, merged, True


def rollout_episode(task: sim.Task, model: PolicyModel, mods: SkipModules | None,
                    mode: str, guidance: GuidanceConfig,
                    rng: np.random.Generator | None = None,
                    random_skip_prob: float = 0.0) -> Episode:
    """Closed-loop rollout in one of the benchmark modes.

    full: every step at full depth. dysl: skipping with allow-point guidance
    and verification, with skipping disabled for the first k+1 warm-up
    steps. controllers-only: allow points pinned at the segment starts, no
    continuity machinery. random-skip: i.i.d. skipping at random_skip_prob.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "full" and mods is None:
        raise ConfigError(f"mode {mode!r} requires skip modules")
    if mode == "random-skip" and rng is None:
        raise ConfigError("random-skip mode needs an rng")
    cfg = task.config
    costs = flops.arch_costs(model.config)
    n_instr = model.config.instr_dim
    allow = None
    pinned = None
    if mode == "dysl":
        allow = init_allow_state(mods.static_set, guidance.k)
    elif mode == "controllers-only":
        pinned = [front + 1 for front, _ in mods.static_set.segments]

    episode = Episode(mode=mode, task_seed=task.seed)
    state = sim.reset_state(task)
    while state.subtask < cfg.subtasks and state.steps_in_subtask < cfg.step_cap:
        obs, instr_id = sim.observe(task, state)
        instr = sim.instr_onehot(instr_id, n_instr)
        c_t = None
        points_log = None
        if mode == "full":
            action, trace = forward_full(model, costs, obs, instr)
        elif mode == "controllers-only":
            action, trace = forward_skipped(model, mods, pinned, obs, instr, costs)
        elif mode == "random-skip":
            action, trace = forward_random(model, mods, random_skip_prob, rng,
                                           obs, instr, costs)
        else:  # dysl
            if allow.warm:
                action, trace = forward_full(model, costs, obs, instr)
            else:
                action, trace = forward_skipped(model, mods, allow.points, obs,
                                                instr, costs)
            observe_action(allow, action)
            if not allow.warm and len(allow.c_history) >= 2:
                if guidance.verification:
                    redo, trace, fired = post_skip_verify(
                        model, costs, allow, trace, obs, instr, guidance.eta)
                    if fired:
                        action = redo
                c_t, c_prev = allow.c_history[-1], allow.c_history[-2]
                if c_t - c_prev >= -guidance.eta:
                    allow.armed = True
                update_allow_points(allow, c_t, c_prev, guidance.eta,
                                    guidance.stride)
            points_log = list(allow.points)

        if not np.all(np.isfinite(action)):
            episode.diverged = True
            episode.diagnostic = "policy produced a non-finite action"
            break
        episode.steps.append(StepRecord(step=state.total_steps, trace=trace,
                                        continuity=c_t, allow_points=points_log))
        episode.actions.append(np.asarray(action, dtype=np.float64))
        state, events = sim.env_step(task, state, action)
        for ev in events:
            episode.events.append((state.total_steps - 1, ev))
    episode.success_length, episode.success = sim.score_rollout(task, episode.events)
    if episode.diverged:
        episode.success_length, episode.success = 0, False
    return episode


# --- trace dump --------------------------------------------------------------------

TRACE_SCHEMA_VERSION = 1


def episode_trace_lines(episode: Episode) -> list[str]:
    """JSON-lines serialization: a header record then one record per step."""
    header = {
        "kind": "episode_trace",
        "schema_version": TRACE_SCHEMA_VERSION,
        "mode": episode.mode,
        "task_seed": episode.task_seed,
        "success_length": episode.success_length,
        "success": episode.success,
        "diverged": episode.diverged,
        "n_steps": episode.n_steps,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for rec in episode.steps:
        row = {
            "step": rec.step,
            "executed_layers": rec.trace.executed_layers,
            "controllers_evaluated": rec.trace.controllers_evaluated,
            "skipped_segments": rec.trace.skipped_segments,
            "adapters_invoked": rec.trace.adapters_invoked,
            "C_t": rec.continuity,
            "allow_points": rec.allow_points,
            "verified": rec.trace.verified,
            "flops": rec.trace.flops,
        }
        if rec.trace.verified:
            row["skip_run_layers"] = rec.trace.skip_run_layers
        lines.append(json.dumps(row, sort_keys=True))
    return lines


def write_episode_trace(path, episode: Episode) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(episode_trace_lines(episode)) + "\n", encoding="utf-8")


def read_episode_trace(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh]
    return header, records
