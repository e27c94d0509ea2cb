"""Two-stage gate/adapter training against a frozen backbone.

Stage 1 regresses every adapter onto the output its segment's remaining
dynamic layers would have produced, so each adapter learns to summarize a
layer suffix. Stage 2 trains controllers and adapters jointly through a
differentiable soft blend of the adapter path and the full path at one
sampled layer per segment, plus a normalization loss paying for every layer
a closed gate keeps executing. Backbone parameters never receive gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import PolicyModel, block_forward, block_vjp, forward_recorded, head_forward, mse_and_grad
from .numerics import Adam, Params, affine_forward, affine_vjp
from .runtime import (
    SkipModules,
    adapter_forward,
    adapter_vjp,
    controller_forward,
    controller_vjp,
    forward_skipped,
    init_skip_modules,
)
from .sim import Dataset


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.05              # normalization-loss weight
    stage1_steps: int = 1200
    stage2_steps: int = 1500
    stage1_lr: float = 3e-3
    stage2_lr: float = 1e-3
    batch_size: int = 64
    selection: str = "harmonic"    # harmonic or linear decay over offsets
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigError("stage steps must be >= 1")
        if self.selection not in ("harmonic", "linear"):
            raise ConfigError("selection must be 'harmonic' or 'linear'")


@dataclass
class StageReport:
    name: str
    losses: list = field(default_factory=list)
    task_losses: list = field(default_factory=list)
    norm_losses: list = field(default_factory=list)
    mean_gates: list = field(default_factory=list)
    final_adapter_residual: dict = field(default_factory=dict)
    controller_mean_gate: dict = field(default_factory=dict)
    skip_rate: float = 0.0
    diverged: bool = False


# --- stage 1: adapter suffix regression ---------------------------------------

def stage1_loss_and_grads(model: PolicyModel, mods: SkipModules, obs, instr):
    """Squared-residual loss between each adapter's output and its segment
    suffix target, summed over dynamic layers and averaged over the batch.
    Only adapter parameters receive gradients; the trace targets are frozen.
    """
    _, trace = forward_recorded(model, obs, instr)
    batch = np.atleast_2d(obs).shape[0]
    grads: Params = {k: np.zeros_like(mods.params[k]) for k in mods.adapter_keys()}
    loss = 0.0
    for front, back in mods.static_set.segments:
        target = trace[back]
        for j in range(front + 1, back):
            x = trace[j]
            out, h = adapter_forward(mods, j, x, cache=True)
            resid = out - target
            loss += float(np.sum(resid * resid)) / batch
            adapter_vjp(mods, j, x, h, (2.0 / batch) * resid, grads)
    return loss, grads


def stage1_step(model: PolicyModel, mods: SkipModules, opt: Adam, obs, instr) -> float:
    loss, grads = stage1_loss_and_grads(model, mods, obs, instr)
    adapters = {k: mods.params[k] for k in mods.adapter_keys()}
    opt.step(adapters, grads)
    return loss


# --- stage 2: soft-gate blended training ---------------------------------------

def segment_offset_probs(m: int, selection: str = "harmonic") -> np.ndarray:
    """Probability of picking offset r in {1..m} from the segment start:
    (1/r)/H_m for harmonic decay, or proportional to m-r+1 for linear."""
    if m < 1:
        raise ConfigError("segment must hold at least one dynamic layer")
    r = np.arange(1, m + 1, dtype=np.float64)
    w = 1.0 / r if selection == "harmonic" else (m - r + 1)
    return w / w.sum()


def sample_segment_layer(segment, rng: np.random.Generator,
                         selection: str = "harmonic") -> int:
    """Draw one dynamic layer id from a (front, back) segment; early layers
    are favoured because their adapters summarize longer suffixes."""
    front, back = segment
    m = back - front - 1
    probs = segment_offset_probs(m, selection)
    return front + 1 + int(rng.choice(m, p=probs))


def draw_selections(mods: SkipModules, batch: int, rng: np.random.Generator,
                    selection: str = "harmonic") -> list[np.ndarray]:
    """Fresh per-sample draw for every segment: list of (batch,) layer ids."""
    out = []
    for front, back in mods.static_set.segments:
        m = back - front - 1
        probs = segment_offset_probs(m, selection)
        out.append(front + 1 + rng.choice(m, p=probs, size=batch))
    return out


def stage2_blend_forward(model: PolicyModel, mods: SkipModules, selections,
                         obs, instr, caches: list | None = None):
    """Soft-gate blended forward pass.

    Per segment, the full chain of dynamic blocks runs for every sample
    (its prefix up to the selected layer doubles as the forced execution,
    its suffix as the no-skip path); at each sample's selected layer i the
    segment output becomes g * adapter_i(x_i) + (1 - g) * full_path, with
    g the controller_i gate. Statics always execute.

    Returns (actions, gates) with gates shaped (batch, n_segments); when
    `caches` is a list it is filled with the intermediates needed by
    stage2_backward.
    """
    obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    instr2 = np.atleast_2d(np.asarray(instr, dtype=np.float64))
    batch = obs2.shape[0]
    segments = mods.static_set.segments
    if len(selections) != len(segments):
        raise ConfigError("one selection array per segment required")
    static = set(mods.static_set.indices)

    u = np.concatenate([obs2, instr2], axis=-1)
    x = affine_forward(model.params["embed.W"], model.params["embed.b"], u)
    gates = np.zeros((batch, len(segments)))

    layer = 0
    for si, (front, back) in enumerate(segments):
        sel = np.asarray(selections[si])
        if sel.shape != (batch,):
            raise ConfigError("selection shape must match the batch")
        while layer <= front:
            if layer in static:
                x, h = block_forward(model, layer, x, cache=True)
                if caches is not None:
                    caches.append(("static", layer, h))
            layer += 1
        chain = [x]
        hs = []
        for j in range(front + 1, back):
            x, h = block_forward(model, j, x, cache=True)
            chain.append(x)
            hs.append(h)
        full = chain[-1]
        blend = np.empty_like(full)
        seg_cache = []
        for off, j in enumerate(range(front + 1, back)):
            idx = np.flatnonzero(sel == j)
            if idx.size == 0:
                seg_cache.append(None)
                continue
            xj = chain[off][idx]
            g, hc = controller_forward(mods, j, xj, cache=True)
            a, ha = adapter_forward(mods, j, xj, cache=True)
            blend[idx] = g[:, None] * a + (1.0 - g)[:, None] * full[idx]
            gates[idx, si] = g
            seg_cache.append((idx, xj, g, hc, a, ha))
        if caches is not None:
            caches.append(("segment", si, (front, back), chain, hs, seg_cache, sel))
        x = blend
        layer = back
    while layer < mods.static_set.depth:
        if layer in static:
            x, h = block_forward(model, layer, x, cache=True)
            if caches is not None:
                caches.append(("static", layer, h))
        layer += 1
    actions = head_forward(model, x)
    if caches is not None:
        caches.append(("head", x, u))
    return actions, gates


def stage2_loss_and_grads(model: PolicyModel, mods: SkipModules, selections,
                          obs, instr, targets, lam: float):
    """Blended task MSE plus lam * mean_batch sum_segments (1-g)*(back-sel).

    Gradients flow to controller and adapter parameters only; frozen
    backbone blocks only propagate upstream gradients.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    caches: list = []
    actions, gates = stage2_blend_forward(model, mods, selections, obs, instr, caches)
    batch = actions.shape[0]
    task_loss, dpred = mse_and_grad(actions, targets)
    segments = mods.static_set.segments
    norm_loss = 0.0
    for si, (front, back) in enumerate(segments):
        norm_loss += float(np.sum((1.0 - gates[:, si]) * (back - selections[si]))) / batch
    loss = task_loss + lam * norm_loss

    grads: Params = {k: np.zeros_like(v) for k, v in mods.params.items()}
    kind = caches[-1]
    assert kind[0] == "head"
    _, _, dx = affine_vjp(model.params["head.W"], kind[1], dpred)
    for entry in reversed(caches[:-1]):
        if entry[0] == "static":
            _, layer, h = entry
            dx = _static_block_vjp(model, layer, h, dx)
        else:
            _, si, (front, back), chain, hs, seg_cache, sel = entry
            dx = _segment_vjp(model, mods, si, front, back, chain, hs,
                              seg_cache, sel, dx, lam, batch, grads)
    return loss, task_loss, norm_loss, gates, grads


def _static_block_vjp(model: PolicyModel, layer: int, h, dy):
    """Input gradient of a residual block given only its cached tanh output
    (weights are frozen, so no parameter gradients are needed)."""
    p = model.params
    dh = dy @ p[f"block{layer}.W2"]
    dz = dh * (1.0 - h * h)
    return dy + dz @ p[f"block{layer}.W1"]


def _segment_vjp(model, mods, si, front, back, chain, hs, seg_cache, sel,
                 d_blend, lam, batch, grads):
    """Backward through one segment's blend: splits the upstream gradient
    over the gate, adapter, and full paths, then walks the block chain in
    reverse, injecting each sample's adapter/controller input gradients at
    its selected layer."""
    full = chain[-1]
    d_chain = np.zeros_like(full)
    inj = {}
    for off, j in enumerate(range(front + 1, back)):
        entry = seg_cache[off]
        if entry is None:
            continue
        idx, xj, g, hc, a, ha = entry
        du = d_blend[idx]
        dg = np.sum(du * (a - full[idx]), axis=1)
        dg += -lam * (back - sel[idx]) / batch
        d_chain[idx] = (1.0 - g)[:, None] * du
        da = g[:, None] * du
        dxa = adapter_vjp(mods, j, xj, ha, da, grads)
        dxc = controller_vjp(mods, j, xj, hc, g, dg, grads)
        inj[off] = (idx, dxa + dxc)
    d = d_chain
    for off in reversed(range(len(hs))):
        d = block_vjp(model, front + 1 + off, chain[off], hs[off], d)
        if off in inj:
            idx, dxi = inj[off]
            d[idx] += dxi
    return d


def stage2_step(model: PolicyModel, mods: SkipModules, opt: Adam, obs, instr,
                targets, lam: float, rng: np.random.Generator,
                selection: str = "harmonic"):
    batch = np.atleast_2d(obs).shape[0]
    selections = draw_selections(mods, batch, rng, selection)
    loss, task_loss, norm_loss, gates, grads = stage2_loss_and_grads(
        model, mods, selections, obs, instr, targets, lam)
    opt.step(mods.params, grads)
    return loss, task_loss, norm_loss, float(gates.mean())


# --- orchestration --------------------------------------------------------------

def estimate_skip_rate(model: PolicyModel, mods: SkipModules, obs, instr,
                       limit: int = 256) -> float:
    """Fraction of dynamic layers skipped by the pure controller policy
    (allow points pinned at the segment starts) on probe inputs."""
    points = [front + 1 for front, _ in mods.static_set.segments]
    n_dyn = len(mods.static_set.dynamic_layers)
    if n_dyn == 0:
        return 0.0
    executed = 0
    n = min(limit, np.atleast_2d(obs).shape[0])
    for i in range(n):
        _, trace = forward_skipped(model, mods, points, obs[i], instr[i])
        executed += sum(1 for j in trace.executed_layers
                        if j in mods.static_set.dynamic_layers)
    return 1.0 - executed / (n * n_dyn)


def _probe_diagnostics(model, mods, report: StageReport, obs, instr) -> None:
    _, trace = forward_recorded(model, obs, instr)
    batch = np.atleast_2d(obs).shape[0]
    for front, back in mods.static_set.segments:
        target = trace[back]
        for j in range(front + 1, back):
            out = adapter_forward(mods, j, trace[j])
            resid = out - target
            report.final_adapter_residual[j] = float(np.sum(resid * resid)) / batch
            g = controller_forward(mods, j, trace[j])
            report.controller_mean_gate[j] = float(np.mean(g))
    report.skip_rate = estimate_skip_rate(model, mods, obs, instr)


def _write_stage_log(path, report: StageReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "task_loss", "norm_loss", "mean_gate"])
        for i, loss in enumerate(report.losses):
            task = report.task_losses[i] if report.task_losses else ""
            norm = report.norm_losses[i] if report.norm_losses else ""
            gate = report.mean_gates[i] if report.mean_gates else ""
            w.writerow([i, repr(loss),
                        repr(task) if task != "" else "",
                        repr(norm) if norm != "" else "",
                        repr(gate) if gate != "" else ""])


def run_two_stage(model: PolicyModel, mods: SkipModules, dataset: Dataset,
                  config: DistillConfig, log_dir=None,
                  joint_from_scratch: bool = False):
    """Stage-1 adapter regression then stage-2 joint blend training.

    With joint_from_scratch=True (the ablation), stage 1 is skipped and the
    randomly initialized controllers and adapters train jointly on the
    stage-2 loss for the combined step budget. Divergence (non-finite loss)
    aborts the stage and marks its report. The backbone is never modified.
    """
    rng = np.random.default_rng(config.seed)
    obs = dataset.obs
    instr = dataset.instr_onehot()
    actions = dataset.actions
    n_rows = len(dataset)
    if n_rows < 1:
        raise ConfigError("empty distillation dataset")
    probe = slice(0, min(256, n_rows))
    reports: dict[str, StageReport] = {}

    def batches(steps):
        for _ in range(steps):
            yield rng.integers(0, n_rows, size=min(config.batch_size, n_rows))

    if not joint_from_scratch:
        report = StageReport(name="stage1")
        opt = Adam(lr=config.stage1_lr)
        for idx in batches(config.stage1_steps):
            loss = stage1_step(model, mods, opt, obs[idx], instr[idx])
            report.losses.append(loss)
            if not np.isfinite(loss):
                report.diverged = True
                break
        _probe_diagnostics(model, mods, report, obs[probe], instr[probe])
        reports["stage1"] = report
        if log_dir is not None:
            _write_stage_log(Path(log_dir) / "stage1_log.csv", report)
        if report.diverged:
            return mods, reports

    stage2_steps = config.stage2_steps
    name = "stage2"
    if joint_from_scratch:
        stage2_steps = config.stage1_steps + config.stage2_steps
        name = "joint"
    report = StageReport(name=name)
    opt = Adam(lr=config.stage2_lr)
    for idx in batches(stage2_steps):
        loss, task_loss, norm_loss, mean_gate = stage2_step(
            model, mods, opt, obs[idx], instr[idx], actions[idx],
            config.lam, rng, config.selection)
        report.losses.append(loss)
        report.task_losses.append(task_loss)
        report.norm_losses.append(norm_loss)
        report.mean_gates.append(mean_gate)
        if not np.isfinite(loss):
            report.diverged = True
            break
    _probe_diagnostics(model, mods, report, obs[probe], instr[probe])
    reports[name] = report
    if log_dir is not None:
        _write_stage_log(Path(log_dir) / f"{name}_log.csv", report)
    return mods, reports


def distill_pipeline(model: PolicyModel, static_set, dataset: Dataset,
                     config: DistillConfig, tau: float = 0.5, log_dir=None,
                     joint_from_scratch: bool = False):
    """Fresh modules + two-stage training; returns (mods, reports)."""
    mods = init_skip_modules(model, static_set, tau=tau, seed=config.seed)
    return run_two_stage(model, mods, dataset, config, log_dir, joint_from_scratch)
