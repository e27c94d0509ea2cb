"""Planar pick-and-place chain environment with a scripted stop-and-go expert.

One object is carried through a chain of goal waypoints by a 2-D point
end-effector with a scalar gripper. The expert moves at constant speed in
free space and switches to jerky pause/micro-step behaviour near grasp and
release targets, so its action stream carries the smooth/jerky split that
the continuity signal relies on. Gripper transitions happen only in the
fine phase.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EnvError

FREE = "free"
FINE = "fine"

OBS_DIM = 7  # ee (2) + gripper fraction (1) + object (2) + active goal (2)
GRIP_CLOSED = 0.5  # holding requires open fraction strictly below this


@dataclass(frozen=True)
class SimConfig:
    low: float = 0.0
    high: float = 1.3
    margin: float = 0.15            # placement margin from the walls
    grasp_radius: float = 0.065     # r: grasp reach, also the fine-phase radius
    success_tol: float = 0.03       # object-to-goal tolerance at release
    commit_dist: float = 0.018      # expert closes/opens the gripper inside this
    step_len: float = 0.05          # free-phase speed
    fine_frac: float = 0.25         # fine step = step_len * fine_frac
    p_pause: float = 0.35           # fraction of each distance band spent crawling
    pause_band: float = 0.02        # crawl/step alternation period (distance)
    crawl_frac: float = 0.1         # crawl speed relative to the fine step
    noise_sigma: float = 0.0015     # free-phase smooth-drift innovation
    noise_rho: float = 0.9          # free-phase drift persistence
    d_max: float = 0.1              # per-axis displacement bound
    grip_max: float = 0.5           # gripper delta bound
    subtasks: int = 5               # chain length M
    step_cap: int = 400             # per-subtask step budget
    separation_factor: float = 6.0  # min placement distance, in grasp radii

    def __post_init__(self):
        if self.high <= self.low:
            raise ConfigError("workspace bounds must satisfy low < high")
        for name in ("grasp_radius", "success_tol", "step_len", "d_max", "grip_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.subtasks < 1:
            raise ConfigError("subtasks must be >= 1")
        if not 0.0 <= self.p_pause < 1.0:
            raise ConfigError("p_pause must be in [0, 1)")
        if self.high - self.low <= 2 * self.margin:
            raise ConfigError("margin leaves no interior to place objects in")


@dataclass(frozen=True)
class Task:
    seed: int
    start: np.ndarray   # end-effector spawn, shape (2,)
    obj: np.ndarray     # object spawn, shape (2,)
    goals: np.ndarray   # goal chain, shape (M, 2)
    config: SimConfig


@dataclass
class EnvState:
    ee: np.ndarray
    obj: np.ndarray
    grip: float = 1.0
    holding: bool = False
    subtask: int = 0
    steps_in_subtask: int = 0
    total_steps: int = 0


def sample_task_sequence(seed: int, config: SimConfig) -> Task:
    """Draw a pick-place chain with all placements pairwise separated by at
    least separation_factor grasp radii. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    lo = config.low + config.margin
    hi = config.high - config.margin
    min_sep = config.separation_factor * config.grasp_radius

    for _ in range(200):
        points = [rng.uniform(lo, hi, size=2)]
        placed = True
        for _ in range(config.subtasks):
            for _ in range(500):
                cand = rng.uniform(lo, hi, size=2)
                if all(np.linalg.norm(cand - p) >= min_sep for p in points):
                    points.append(cand)
                    break
            else:
                placed = False
                break
        if placed:
            start = rng.uniform(lo, hi, size=2)
            return Task(seed=seed, start=start, obj=points[0],
                        goals=np.array(points[1:]), config=config)
    raise ConfigError(
        "could not place objects with the required separation; "
        "enlarge the workspace or reduce grasp_radius/subtasks"
    )


def reset_state(task: Task) -> EnvState:
    return EnvState(ee=task.start.copy(), obj=task.obj.copy())


def current_goal(task: Task, state: EnvState) -> np.ndarray:
    idx = min(state.subtask, task.config.subtasks - 1)
    return task.goals[idx]


def current_target(task: Task, state: EnvState) -> np.ndarray:
    return current_goal(task, state) if state.holding else state.obj


def phase_of(task: Task, state: EnvState) -> str:
    dist = float(np.linalg.norm(state.ee - current_target(task, state)))
    return FINE if dist <= task.config.grasp_radius else FREE


def observe(task: Task, state: EnvState) -> tuple[np.ndarray, int]:
    """Observation vector plus the instruction id (the active subtask index).

    Object and goal coordinates are egocentric (relative to the effector),
    which keeps the policy's steering function well-conditioned; the absolute
    effector position is included, so the state stays fully observed.
    """
    goal = current_goal(task, state)
    obs = np.concatenate([state.ee, [state.grip], state.obj - state.ee,
                          goal - state.ee])
    return obs, min(state.subtask, task.config.subtasks - 1)


def instr_onehot(instr_id: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[instr_id] = 1.0
    return v


class ScriptedExpert:
    """Stop-and-go scripted controller; one instance per episode.

    Free phase: a constant-speed straight-line step toward the target plus a
    small smooth drift. Fine phase (inside the grasp radius): micro-steps
    alternating between crawls and full steps in distance bands, which makes
    the action stream jerky step-to-step. The grip delta always steers
    toward the desired open fraction (open in transit, closed while
    carrying, flipped inside commit_dist), which is zero along clean
    trajectories outside the fine phase and self-correcting everywhere else.
    """

    def __init__(self, task: Task, rng: np.random.Generator):
        self.task = task
        self.rng = rng
        self._drift = np.zeros(2)

    def _grip_delta(self, state: EnvState, dist: float) -> float:
        cfg = self.task.config
        if state.holding:
            desired = 1.0 if dist <= cfg.commit_dist else 0.0
        else:
            desired = 0.0 if dist <= cfg.commit_dist else 1.0
        return desired - state.grip

    def action(self, state: EnvState) -> np.ndarray:
        cfg = self.task.config
        target = current_target(self.task, state)
        delta = target - state.ee
        dist = float(np.linalg.norm(delta))
        dg = self._grip_delta(state, dist)

        if dist > cfg.grasp_radius:  # free motion
            self._drift = (cfg.noise_rho * self._drift
                           + cfg.noise_sigma * self.rng.standard_normal(2))
            step = cfg.step_len * delta / dist + self._drift
            return np.array([step[0], step[1], dg])

        # stop-and-go micro-steps: distance-banded crawl/step alternation.
        # The speed profile is a deterministic function of the observable
        # state (no conditional noise), so a regression fit tracks it instead
        # of averaging it away, and its only zero is the target itself.
        step = np.zeros(2)
        if dist > 0.0:
            fine_len = cfg.step_len * cfg.fine_frac
            in_crawl_band = (dist / cfg.pause_band) % 1.0 < cfg.p_pause
            scale = cfg.crawl_frac if in_crawl_band else 1.0
            step = min(0.6 * dist, scale * fine_len) * delta / dist
        return np.array([step[0], step[1], dg])


def env_step(task: Task, state: EnvState, action) -> tuple[EnvState, list]:
    """Kinematic integration with clamping; emits grasp/release/subtask events.

    Grasping is level-based: an effector whose gripper fraction is below the
    closed threshold within grasp_radius of the object picks it up. While
    held, the object is co-located with the effector; a released object
    stays where it was last carried to.
    """
    cfg = task.config
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise EnvError(f"invalid action {a!r}")
    dx = float(np.clip(a[0], -cfg.d_max, cfg.d_max))
    dy = float(np.clip(a[1], -cfg.d_max, cfg.d_max))
    dg = float(np.clip(a[2], -cfg.grip_max, cfg.grip_max))

    ee = np.clip(state.ee + [dx, dy], cfg.low, cfg.high)
    grip = float(np.clip(state.grip + dg, 0.0, 1.0))
    obj = state.obj
    holding = state.holding
    subtask = state.subtask
    steps_in_subtask = state.steps_in_subtask + 1
    events: list = []

    if holding:
        if grip >= GRIP_CLOSED:
            holding = False
            events.append(("release",))
            if (subtask < cfg.subtasks
                    and np.linalg.norm(obj - task.goals[subtask]) <= cfg.success_tol):
                events.append(("subtask_complete", subtask))
                subtask += 1
                steps_in_subtask = 0
        else:
            obj = ee.copy()
    elif grip < GRIP_CLOSED and np.linalg.norm(ee - state.obj) <= cfg.grasp_radius:
        holding = True
        obj = ee.copy()
        events.append(("grasp",))

    return EnvState(ee=ee, obj=obj, grip=grip, holding=holding, subtask=subtask,
                    steps_in_subtask=steps_in_subtask,
                    total_steps=state.total_steps + 1), events


@dataclass
class SimEpisode:
    task_seed: int
    observations: list = field(default_factory=list)
    instr_ids: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    events: list = field(default_factory=list)   # (step, event tuple)
    success_length: int = 0
    success: bool = False
    diverged: bool = False
    diagnostic: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.actions)


def run_episode(task: Task, policy_fn, max_total_steps: int | None = None) -> SimEpisode:
    """Closed-loop rollout of policy_fn(obs, instr_id, state) -> action.

    The state argument exists for scripted controllers and instrumentation;
    learned policies must act on (obs, instr_id) alone. Ends on chain
    completion, on exhausting the per-subtask step budget, on
    max_total_steps if given, or on a divergent action (non-finite), which
    marks the episode failed with a diagnostic.
    """
    cfg = task.config
    state = reset_state(task)
    ep = SimEpisode(task_seed=task.seed)
    while state.subtask < cfg.subtasks and state.steps_in_subtask < cfg.step_cap:
        if max_total_steps is not None and state.total_steps >= max_total_steps:
            break
        obs, instr_id = observe(task, state)
        ep.observations.append(obs)
        ep.instr_ids.append(instr_id)
        ep.phases.append(phase_of(task, state))
        try:
            action = policy_fn(obs, instr_id, state)
            state, events = env_step(task, state, action)
        except EnvError as exc:
            ep.diverged = True
            ep.diagnostic = str(exc)
            ep.actions.append(np.zeros(3))
            break
        ep.actions.append(np.asarray(action, dtype=np.float64))
        for ev in events:
            ep.events.append((state.total_steps - 1, ev))
    ep.success_length, ep.success = score_rollout(task, ep.events)
    if ep.diverged:
        ep.success_length, ep.success = 0, False
    return ep


def score_rollout(task: Task, events) -> tuple[int, bool]:
    """Consecutive completed subtasks from the start of the chain.

    Completions must arrive in order 0, 1, 2, ...; anything out of order
    stops the count (completing subtask 1 but never 0 scores 0).
    """
    expected = 0
    for _, ev in events:
        if ev[0] == "subtask_complete":
            if ev[1] == expected:
                expected += 1
            else:
                break
    return expected, expected == task.config.subtasks


# --- expert dataset -----------------------------------------------------------

DATASET_SCHEMA_VERSION = 1


@dataclass
class Dataset:
    config: SimConfig
    seed: int
    n_episodes: int
    obs: np.ndarray       # (S, OBS_DIM)
    instr: np.ndarray     # (S,) int subtask ids
    actions: np.ndarray   # (S, 3)
    phases: list          # analysis only, never fed to a model
    episode_ids: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def instr_onehot(self) -> np.ndarray:
        return np.eye(self.config.subtasks)[self.instr]


def run_expert_episode(task: Task, rng: np.random.Generator) -> SimEpisode:
    expert = ScriptedExpert(task, rng)
    return run_episode(task, lambda obs, iid, state: expert.action(state))


def generate_dataset(config: SimConfig, n_episodes: int, seed: int) -> Dataset:
    """Expert rollouts flattened into (obs, instr, action) rows with phase labels."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    obs_rows, instr_rows, act_rows, phase_rows, ep_rows = [], [], [], [], []
    for i in range(n_episodes):
        task = sample_task_sequence(seed + i, config)
        ep = run_expert_episode(task, np.random.default_rng([seed, i]))
        obs_rows.extend(ep.observations)
        instr_rows.extend(ep.instr_ids)
        act_rows.extend(ep.actions)
        phase_rows.extend(ep.phases)
        ep_rows.extend([i] * ep.n_steps)
    return Dataset(config, seed, n_episodes, np.array(obs_rows),
                   np.array(instr_rows, dtype=np.int64), np.array(act_rows),
                   phase_rows, np.array(ep_rows, dtype=np.int64))


def save_dataset(path, dataset: Dataset) -> None:
    """JSON-lines container: one header record, then one record per step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "dataset",
        "schema_version": DATASET_SCHEMA_VERSION,
        "seed": dataset.seed,
        "n_episodes": dataset.n_episodes,
        "sim_config": asdict(dataset.config),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(dataset)):
            row = {
                "obs": dataset.obs[i].tolist(),
                "instr_id": int(dataset.instr[i]),
                "action": dataset.actions[i].tolist(),
                "phase": dataset.phases[i],
                "episode": int(dataset.episode_ids[i]),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "dataset":
            raise ConfigError(f"{path} is not a dataset file")
        obs, instr, actions, phases, ep_ids = [], [], [], [], []
        for line in fh:
            row = json.loads(line)
            obs.append(row["obs"])
            instr.append(row["instr_id"])
            actions.append(row["action"])
            phases.append(row["phase"])
            ep_ids.append(row["episode"])
    return Dataset(SimConfig(**header["sim_config"]), header["seed"],
                   header["n_episodes"], np.array(obs),
                   np.array(instr, dtype=np.int64), np.array(actions),
                   phases, np.array(ep_ids, dtype=np.int64))
