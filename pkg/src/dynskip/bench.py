"""Benchmark harness: base-policy behaviour cloning, mode evaluation with
compute accounting, the random-skip compute-matching baseline, ablation
sweeps, and report assembly with a trace-level consistency cross-check.

Latency is reported as executed-layer counts and FLOP estimates, never
wall-clock time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flops, runtime as rt, sim
from .errors import ConfigError, TraceIntegrityError
from .model import PolicyConfig, PolicyModel, build_policy, forward_recorded, mse_and_grad, task_loss_and_grads
from .numerics import Adam
from .profiler import LayerProfile, select_static
from .runtime import Episode, GuidanceConfig, SkipModules

REPORT_HEADER_COMMENT = (
    "# compute is reported as executed-layer counts and FLOP estimates; "
    "wall-clock latency is out of scope at desk scale"
)

# task-seed namespaces per pipeline stage, relative to the master seed
TRAIN_SEED_OFFSET = 100_000
VAL_SEED_OFFSET = 200_000
EVAL_SEED_OFFSET = 300_000
NOISE_SEED_OFFSET = 400_000


# --- base-policy training --------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 3e-3
    lr_floor_frac: float = 0.1   # cosine decay floor as a fraction of lr
    val_every: int = 500
    seed: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("training steps must be >= 1")
        if not 0.0 < self.lr_floor_frac <= 1.0:
            raise ConfigError("lr_floor_frac must be in (0, 1]")


def validation_mse(model: PolicyModel, dataset: sim.Dataset) -> float:
    pred, _ = forward_recorded(model, dataset.obs, dataset.instr_onehot())
    return mse_and_grad(pred, dataset.actions)[0]


def train_base_policy(model_config: PolicyConfig, train_config: TrainConfig,
                      train_set: sim.Dataset, val_set: sim.Dataset):
    """Behaviour-clone the policy on expert rows with Adam and cosine decay.

    Returns (model, log rows); each log row is (step, train_loss, val_mse)
    with a step-0 row recording the pre-training validation MSE.
    """
    model = build_policy(model_config)
    obs, instr, actions = train_set.obs, train_set.instr_onehot(), train_set.actions
    opt = Adam(lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    log = [(0, float("nan"), validation_mse(model, val_set))]
    floor = train_config.lr_floor_frac
    for step in range(1, train_config.steps + 1):
        opt.lr = train_config.lr * (
            0.5 * (1 + np.cos(np.pi * step / train_config.steps)) * (1 - floor) + floor)
        idx = rng.integers(0, len(train_set), train_config.batch_size)
        loss, grads = task_loss_and_grads(model, obs[idx], instr[idx], actions[idx])
        opt.step(model.params, grads)
        if step % train_config.val_every == 0 or step == train_config.steps:
            log.append((step, loss, validation_mse(model, val_set)))
    return model, log


def write_train_log(path, log) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_mse"])
        for step, loss, val in log:
            w.writerow([step, "" if np.isnan(loss) else repr(loss), repr(val)])


# --- mode evaluation ---------------------------------------------------------------

@dataclass
class ModeStats:
    mode: str
    episodes: int
    avg_successful_length: float
    success_rate: float
    avg_executed_layers: float
    avg_flops: float
    controller_evals_per_step: float
    verify_rate: float
    random_skip_prob: float | None = None


def summarize_episodes(mode: str, episodes: list[Episode],
                       random_skip_prob: float | None = None) -> ModeStats:
    layers, flop_counts, ctrl, verify = [], [], [], []
    for ep in episodes:
        for rec in ep.steps:
            layers.append(rec.trace.block_executions)
            flop_counts.append(rec.trace.flops)
            ctrl.append(len(rec.trace.controllers_evaluated))
            verify.append(rec.trace.verified)
    return ModeStats(
        mode=mode,
        episodes=len(episodes),
        avg_successful_length=float(np.mean([ep.success_length for ep in episodes])),
        success_rate=float(np.mean([ep.success for ep in episodes])),
        avg_executed_layers=float(np.mean(layers)),
        avg_flops=float(np.mean(flop_counts)),
        controller_evals_per_step=float(np.mean(ctrl)),
        verify_rate=float(np.mean(verify)),
        random_skip_prob=random_skip_prob,
    )


def expected_random_flops(costs: flops.ArchCosts, static_set, p: float) -> float:
    """Closed-form expected per-step FLOPs of the random-skip walk with
    i.i.d. skip probability p (skipping jumps over the segment remainder)."""
    total = costs.embed + costs.head + len(static_set.indices) * costs.block
    for front, back in static_set.segments:
        m = back - front - 1
        survive = 1.0
        expected_exec = 0.0
        for _ in range(m):
            survive *= (1.0 - p)
            expected_exec += survive
        total += expected_exec * costs.block
        total += (1.0 - survive) * costs.adapter
    return total


def match_random_skip_prob(costs: flops.ArchCosts, static_set,
                           target_flops: float) -> float:
    """Bisection for the skip probability whose expected per-step cost
    matches the target (e.g. the measured dysl average)."""
    lo, hi = 0.0, 1.0
    if expected_random_flops(costs, static_set, 0.0) <= target_flops:
        return 0.0
    if expected_random_flops(costs, static_set, 1.0) >= target_flops:
        return 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_random_flops(costs, static_set, mid) > target_flops:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def evaluate_modes(model: PolicyModel, mods: SkipModules | None, sim_config,
                   guidance: GuidanceConfig, modes, n_episodes: int,
                   base_seed: int, out_dir=None):
    """Run n_episodes per mode on shared task seeds.

    Returns (stats rows in requested order, episodes per mode). The
    random-skip probability is calibrated to match the dysl mode's measured
    average FLOPs, so dysl episodes are computed first when needed.
    """
    for mode in modes:
        if mode not in rt.MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    costs = flops.arch_costs(model.config)
    tasks = [sim.sample_task_sequence(base_seed + i, sim_config)
             for i in range(n_episodes)]
    episodes: dict[str, list[Episode]] = {}
    skip_prob = None

    def run_mode(mode: str) -> list[Episode]:
        out = []
        for i, task in enumerate(tasks):
            rng = np.random.default_rng([base_seed, i]) if mode == "random-skip" else None
            out.append(rt.rollout_episode(
                task, model, mods, mode, guidance, rng=rng,
                random_skip_prob=skip_prob or 0.0))
        return out

    ordered = list(modes)
    needs_dysl = "random-skip" in ordered
    if needs_dysl or "dysl" in ordered:
        episodes["dysl"] = run_mode("dysl")
        dysl_flops = summarize_episodes("dysl", episodes["dysl"]).avg_flops
        skip_prob = match_random_skip_prob(costs, mods.static_set, dysl_flops)
    for mode in ordered:
        if mode not in episodes:
            episodes[mode] = run_mode(mode)

    stats = [summarize_episodes(m, episodes[m],
                                skip_prob if m == "random-skip" else None)
             for m in ordered]
    if out_dir is not None:
        out_dir = Path(out_dir)
        for mode in ordered:
            for i, ep in enumerate(episodes[mode]):
                rt.write_episode_trace(out_dir / "traces" / mode / f"ep_{i:04d}.jsonl", ep)
    return stats, episodes


REPORT_FIELDS = ["mode", "avg_successful_length", "success_rate",
                 "avg_executed_layers", "avg_flops", "controller_evals_per_step",
                 "verify_rate", "episodes", "random_skip_prob"]


def write_report_csv(path, stats: list[ModeStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER_COMMENT + "\n")
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for s in stats:
            w.writerow([s.mode, repr(s.avg_successful_length), repr(s.success_rate),
                        repr(s.avg_executed_layers), repr(s.avg_flops),
                        repr(s.controller_evals_per_step), repr(s.verify_rate),
                        s.episodes,
                        "" if s.random_skip_prob is None else repr(s.random_skip_prob)])


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cross_check_report(out_dir, report_path, model_config: PolicyConfig) -> None:
    """Verify that every reported avg_flops equals the mean of per-step
    costs re-derived from the dumped traces; raises on any mismatch."""
    costs = flops.arch_costs(model_config)
    out_dir = Path(out_dir)
    for row in read_report_csv(report_path):
        mode = row["mode"]
        trace_dir = out_dir / "traces" / mode
        files = sorted(trace_dir.glob("ep_*.jsonl"))
        if not files:
            raise TraceIntegrityError(f"no trace dumps for mode {mode!r}")
        step_costs = []
        for f in files:
            _, records = rt.read_episode_trace(f)
            for rec in records:
                recomputed = flops.flop_estimate_record(costs, rec)
                if recomputed != rec["flops"]:
                    raise TraceIntegrityError(
                        f"{f.name}: stored flops {rec['flops']} != recomputed {recomputed}")
                step_costs.append(recomputed)
        mean = float(np.mean(step_costs))
        reported = float(row["avg_flops"])
        if abs(mean - reported) > 1e-6 * max(1.0, abs(reported)):
            raise TraceIntegrityError(
                f"mode {mode!r}: reported avg_flops {reported} != trace mean {mean}")


# --- paired significance test -------------------------------------------------------

def paired_one_sided_pvalue(better, worse, n_resamples: int = 10_000,
                            seed: int = 0) -> float:
    """Sign-flip permutation p-value for H1: mean(better - worse) > 0."""
    d = np.asarray(better, dtype=np.float64) - np.asarray(worse, dtype=np.float64)
    if d.size == 0:
        raise ConfigError("paired test needs at least one pair")
    observed = d.mean()
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_resamples, d.size))
    null = (signs * d).mean(axis=1)
    exceed = int(np.sum(null >= observed))
    return (exceed + 1) / (n_resamples + 1)


# --- ablation sweeps -----------------------------------------------------------------

ABLATION_AXES = ("static_ratio", "k", "delta_l_mode", "eta", "lambda")


def parse_axis_values(axis: str, raw: list[str]):
    if axis == "static_ratio":
        return [float(v) for v in raw]
    if axis == "k":
        return [int(v) for v in raw]
    if axis == "eta":
        return [float(v) for v in raw]
    if axis == "lambda":
        return [float(v) for v in raw]
    if axis == "delta_l_mode":
        values = []
        for v in raw:
            if v == "adaptive":
                values.append(None)
            elif v.startswith("const:"):
                values.append(int(v.split(":", 1)[1]))
            else:
                raise ConfigError(f"delta_l_mode value {v!r}; use adaptive or const:N")
        return values
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def format_axis_value(axis: str, value) -> str:
    if axis == "delta_l_mode":
        return "adaptive" if value is None else f"const:{value}"
    return repr(value)


@dataclass
class AblationRow:
    axis: str
    value: str
    avg_successful_length: float
    success_rate: float
    avg_executed_layers: float
    avg_flops: float


def run_ablation(axis: str, values, model: PolicyModel, profile: LayerProfile,
                 dataset: sim.Dataset, sim_config, guidance: GuidanceConfig,
                 distill_config, static_ratio: float, tau: float,
                 n_episodes: int, base_seed: int,
                 baseline_mods: SkipModules | None = None) -> list[AblationRow]:
    """Re-evaluate the dysl mode along one config axis on shared seeds.

    Guidance axes (k, eta, delta_l_mode) reuse the trained modules; the
    static_ratio and lambda axes re-run distillation per value.
    """
    from .distill import distill_pipeline  # local import to avoid a cycle

    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    rows = []
    for value in values:
        guid = guidance
        mods = baseline_mods
        if axis == "k":
            guid = GuidanceConfig(k=value, eta=guidance.eta,
                                  stride=guidance.stride,
                                  verification=guidance.verification)
        elif axis == "eta":
            guid = GuidanceConfig(k=guidance.k, eta=value,
                                  stride=guidance.stride,
                                  verification=guidance.verification)
        elif axis == "delta_l_mode":
            guid = GuidanceConfig(k=guidance.k, eta=guidance.eta,
                                  stride=value,
                                  verification=guidance.verification)
        elif axis == "static_ratio":
            static_set = select_static(profile, value)
            mods, _ = distill_pipeline(model, static_set, dataset,
                                       distill_config, tau=tau)
        elif axis == "lambda":
            from dataclasses import replace as dc_replace
            static_set = select_static(profile, static_ratio)
            cfg_l = dc_replace(distill_config, lam=value)
            mods, _ = distill_pipeline(model, static_set, dataset, cfg_l, tau=tau)
        if mods is None:
            raise ConfigError("ablation over guidance axes needs trained modules")
        stats, _ = evaluate_modes(model, mods, sim_config, guid, ["dysl"],
                                  n_episodes, base_seed)
        s = stats[0]
        rows.append(AblationRow(axis=axis, value=format_axis_value(axis, value),
                                avg_successful_length=s.avg_successful_length,
                                success_rate=s.success_rate,
                                avg_executed_layers=s.avg_executed_layers,
                                avg_flops=s.avg_flops))
    return rows


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER_COMMENT + "\n")
        w = csv.writer(fh)
        w.writerow(["axis", "value", "avg_successful_length", "success_rate",
                    "avg_executed_layers", "avg_flops"])
        for r in rows:
            w.writerow([r.axis, r.value, repr(r.avg_successful_length),
                        repr(r.success_rate), repr(r.avg_executed_layers),
                        repr(r.avg_flops)])
