"""Stage 1: expert behavior per (task, layout).

Two expert sources: a scripted waypoint controller whose action stream is
recorded as a replayable ``DemoTape`` (the kinesthetic-teaching analog), and
a natural-policy-gradient learner on flattened simulator state, gated by a
success-rate filter.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .kitchen2d import (ACTION_DIM, V_MAX, Kitchen, Layout, SimState, TaskSpec,
                        Trajectory, VisualTheme, rollout_actions)

log = logging.getLogger(__name__)


class ExpertError(RuntimeError):
    pass


@dataclass
class DemoTape:
    actions: np.ndarray  # (horizon, 3)
    task_id: int
    layout_id: int
    seed: int

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise ValueError(f"tape actions must be (T, {ACTION_DIM}), got {self.actions.shape}")
        if np.any(np.abs(self.actions) > 1):
            raise ValueError("tape actions must lie in [-1, 1]")

    @property
    def tape_id(self) -> str:
        return f"t{self.task_id}-l{self.layout_id}-s{self.seed}"


# ------------------------------------------------------------------ scripted
def _toward(robot: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(target, np.float64) - robot) / V_MAX, -1.0, 1.0)


def waypoint_action(kitchen: Kitchen, state: SimState, task: TaskSpec, goal: np.ndarray,
                    done: bool) -> tuple[np.ndarray, bool]:
    """Approach -> grasp -> transport (or arc-follow) -> release.

    ``done`` latches once the goal is reached; after that the robot holds
    still with the gripper open. Returns the action and the updated latch.
    """
    i = kitchen.target_index(task)
    robot = state.robot.astype(np.float64)
    still = np.zeros(2)
    if done:
        return np.array([*still, 1.0]), True
    if i < 0:
        d = _toward(robot, goal[:2])
        return np.array([*d, 1.0]), False
    if state.held != i:
        tgt = kitchen.target_position(state, task)
        if np.hypot(*(tgt - robot)) > 1e-3:
            return np.array([*_toward(robot, tgt), 1.0]), False
        return np.array([*still, -1.0]), False
    spec = kitchen.roster[i]
    if spec.kind == "articulated":
        err = float(goal[2] - state.angles[i])
        if abs(err) < 0.02:
            return np.array([*still, 1.0]), True
        max_dtheta = 0.8 * V_MAX / spec.arm_length
        nxt = float(state.angles[i]) + float(np.clip(err, -max_dtheta, max_dtheta))
        ang = float(state.poses[i, 2]) + nxt
        tgt = state.poses[i, :2].astype(np.float64) + spec.arm_length * np.array(
            [math.cos(ang), math.sin(ang)])
        return np.array([*_toward(robot, tgt), -1.0]), False
    if np.hypot(*(goal[:2] - robot)) < 1e-4:
        return np.array([*still, 1.0]), True
    return np.array([*_toward(robot, goal[:2]), -1.0]), False


def run_script(kitchen: Kitchen, task: TaskSpec, layout: Layout, seed: int,
               horizon: int | None = None) -> Trajectory:
    """Closed-loop execution of the waypoint controller (no rendering)."""
    horizon = horizon or task.horizon
    goal = kitchen.goal(task, layout)
    s = kitchen.reset(layout, task, seed)
    states, actions, done = [s], [], False
    for _ in range(horizon):
        a, done = waypoint_action(kitchen, s, task, goal, done)
        a = a.astype(np.float32)
        s = kitchen.step(s, a)
        states.append(s)
        actions.append(a)
    ok = kitchen.check_success(states, task, goal)
    return Trajectory(states, actions, [], {"task_id": task.task_id, "layout_id": layout.layout_id,
                                            "seed": seed}, ok)


def script_expert(kitchen: Kitchen, task: TaskSpec, layout: Layout, seed: int = 0) -> DemoTape:
    traj = run_script(kitchen, task, layout, seed)
    if not traj.success:
        raise ExpertError(f"scripted expert failed task {task.name} on layout {layout.layout_id} "
                          f"(seed {seed}); task/layout misconfigured")
    return DemoTape(np.stack(traj.actions), task.task_id, layout.layout_id, seed)


def replay_tape(kitchen: Kitchen, tape: DemoTape, task: TaskSpec, layout: Layout,
                theme: VisualTheme | None = None, render: bool = True) -> Trajectory:
    traj = rollout_actions(kitchen, layout, task, tape.seed, tape.actions, theme, render)
    traj.provenance = {"task_id": tape.task_id, "layout_id": tape.layout_id, "tape": tape.tape_id,
                       "seed": tape.seed}
    return traj


# ---------------------------------------------------------------------- NPG
def state_features(kitchen: Kitchen, state: SimState, goal: np.ndarray, horizon: int) -> np.ndarray:
    """Flattened s_t: robot pos/vel/grip, object poses/velocities, goal, time."""
    v = [state.robot, state.robot_vel / 0.05, [state.grip, state.grip_rate / 0.2]]
    v.append(state.poses[:, :2].ravel())
    v.append(state.angles)
    v.append(state.vels.ravel() / 0.05)
    v.append(goal)
    v.append([state.t / horizon])
    return np.concatenate([np.asarray(x, np.float32).ravel() for x in v])


def feature_dim(kitchen: Kitchen) -> int:
    return 2 + 2 + 2 + 3 * kitchen.n_objects + 3 * kitchen.n_objects + 3 + 1


@dataclass
class ExpertPolicy:
    mlp: nc.MlpParams
    log_std: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays() + [self.log_std]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ExpertPolicy":
        return ExpertPolicy(nc.MlpParams.from_arrays(arrays[:-1], self.mlp.activation),
                            arrays[-1])

    def mean(self, feats: np.ndarray) -> np.ndarray:
        return nc.mlp_forward(self.mlp, feats)


def init_expert(in_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                init_log_std: float = -0.5, dtype=np.float32) -> ExpertPolicy:
    mlp = nc.init_mlp([in_dim, *hidden, ACTION_DIM], "tanh", rng, dtype)
    mlp.weights[-1] *= 0.01
    return ExpertPolicy(mlp, np.full(ACTION_DIM, init_log_std, dtype=dtype))


def gaussian_log_prob(policy: ExpertPolicy, feats: np.ndarray, actions: np.ndarray) -> np.ndarray:
    mu = policy.mean(feats)
    ls = policy.log_std
    z = (actions - mu) / np.exp(ls)
    return (-0.5 * z * z - ls - 0.5 * math.log(2 * math.pi)).sum(axis=-1)


def log_prob_grads(policy: ExpertPolicy, feats: np.ndarray, actions: np.ndarray,
                   per_example: bool = False) -> list[np.ndarray]:
    """Gradient of sum (or each) log pi(a|s) wrt [mlp arrays..., log_std]."""
    mu, cache = nc.mlp_forward(policy.mlp, feats, return_cache=True)
    var = np.exp(2 * policy.log_std)
    grads, _ = nc.mlp_backward(policy.mlp, feats, (actions - mu) / var, cache, per_example)
    g_ls = (actions - mu) ** 2 / var - 1.0
    if not per_example:
        g_ls = g_ls.sum(axis=0)
    return grads + [g_ls.astype(mu.dtype)]


def mean_kl(old: ExpertPolicy, new: ExpertPolicy, feats: np.ndarray) -> float:
    """Mean KL(old || new) of diagonal Gaussians over the given states."""
    m0, m1 = old.mean(feats).astype(np.float64), new.mean(feats).astype(np.float64)
    l0, l1 = old.log_std.astype(np.float64), new.log_std.astype(np.float64)
    kl = l1 - l0 + (np.exp(2 * l0) + (m0 - m1) ** 2) / (2 * np.exp(2 * l1)) - 0.5
    return float(kl.sum(axis=-1).mean())


def conjugate_gradient(fvp, b: np.ndarray, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ap = fvp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        new_rr = r @ r
        p = r + (new_rr / rr) * p
        rr = new_rr
    return x


@dataclass
class NpgBudget:
    iterations: int = 60
    episodes: int = 40
    delta: float = 0.01
    cg_iters: int = 10
    gamma: float = 0.99
    hidden: tuple[int, ...] = (32, 32)
    fisher_damping: float = 1e-4
    init_log_std: float = -0.5

    def __post_init__(self):
        if self.iterations <= 0 or self.episodes <= 0:
            raise ValueError("NPG budget must be positive")


@dataclass
class TrainLog:
    mean_return: list[float] = field(default_factory=list)
    success_rate: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    final_success: float = 0.0
    final_episodes: int = 0


def sample_episodes(kitchen: Kitchen, policy: ExpertPolicy, task: TaskSpec, layout: Layout,
                    n: int, rng: np.random.Generator, deterministic: bool = False):
    """Roll out ``n`` episodes in lockstep. Returns feats, actions, rewards, successes."""
    goal = kitchen.goal(task, layout)
    H = task.horizon
    seeds = rng.integers(0, 2 ** 31, size=n)
    states = [kitchen.reset(layout, task, int(sd)) for sd in seeds]
    histories = [[s] for s in states]
    fd = feature_dim(kitchen)
    feats = np.zeros((n, H, fd), np.float32)
    acts = np.zeros((n, H, ACTION_DIM), np.float32)
    rews = np.zeros((n, H), np.float64)
    std = np.exp(policy.log_std)
    for t in range(H):
        f = np.stack([state_features(kitchen, s, goal, H) for s in states])
        mu = policy.mean(f)
        a = mu if deterministic else mu + std * rng.standard_normal(mu.shape).astype(np.float32)
        feats[:, t], acts[:, t] = f, a
        for k in range(n):
            states[k] = kitchen.step(states[k], a[k])
            histories[k].append(states[k])
            rews[k, t] = kitchen.reward(states[k], task, goal)
    succ = np.array([kitchen.check_success(h, task, goal) for h in histories])
    return feats, acts, rews, succ


def reward_to_go(rews: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rews)
    run = np.zeros(rews.shape[0])
    for t in range(rews.shape[1] - 1, -1, -1):
        run = rews[:, t] + gamma * run
        out[:, t] = run
    return out


def npg_update(policy: ExpertPolicy, feats: np.ndarray, acts: np.ndarray, adv: np.ndarray,
               delta: float, cg_iters: int = 10, damping: float = 1e-4,
               fisher: str = "empirical") -> tuple[ExpertPolicy, np.ndarray, float]:
    """One natural-gradient step; returns (new policy, step direction, mean KL).

    ``fisher="identity"`` yields the vanilla policy-gradient direction,
    rescaled to the same trust region.
    """
    like = policy.arrays()
    per = log_prob_grads(policy, feats, acts, per_example=True)
    G = np.concatenate([g.reshape(len(feats), -1) for g in per], axis=1).astype(np.float64)
    g = (G * adv[:, None]).mean(axis=0)
    if fisher == "identity":
        direction = g.copy()
        fvp = lambda v: v  # noqa: E731
    else:
        N = len(G)
        fvp = lambda v: G.T @ (G @ v) / N + damping * v  # noqa: E731
        direction = conjugate_gradient(fvp, g, cg_iters)
    shs = float(direction @ fvp(direction))
    alpha = math.sqrt(2 * delta / shs) if shs > 1e-12 else 0.0
    step = alpha * direction
    new_flat = nc.flatten(like).astype(np.float64) + step
    new = policy.with_arrays(nc.unflatten(new_flat, like))
    kl = mean_kl(policy, new, feats)
    # backtrack if the quadratic model understated the KL
    for _ in range(10):
        if kl <= 1.5 * delta:
            break
        step *= 0.5
        new = policy.with_arrays(nc.unflatten(nc.flatten(like).astype(np.float64) + step, like))
        kl = mean_kl(policy, new, feats)
    return new, step, kl


def npg_train(kitchen: Kitchen, task: TaskSpec, layout: Layout, budget: NpgBudget | None = None,
              seed: int = 0) -> tuple[ExpertPolicy, TrainLog]:
    budget = budget or NpgBudget()
    rng = np.random.default_rng(seed)
    policy = init_expert(feature_dim(kitchen), budget.hidden, rng, budget.init_log_std)
    tlog = TrainLog()
    for it in range(budget.iterations):
        feats, acts, rews, succ = sample_episodes(kitchen, policy, task, layout, budget.episodes, rng)
        ret = reward_to_go(rews, budget.gamma)
        adv = ret - ret.mean(axis=0, keepdims=True)
        adv = adv / (adv.std() + 1e-8)
        F = feats.reshape(-1, feats.shape[-1])
        A = acts.reshape(-1, ACTION_DIM)
        policy, _, kl = npg_update(policy, F, A, adv.ravel(), budget.delta, budget.cg_iters,
                                   budget.fisher_damping)
        if not all(np.all(np.isfinite(a)) for a in policy.arrays()):
            raise nc.NonFiniteError(f"NPG produced non-finite parameters at iteration {it}")
        tlog.mean_return.append(float(rews.sum(axis=1).mean()))
        tlog.success_rate.append(float(succ.mean()))
        tlog.kl.append(kl)
        log.debug("npg %s it=%d ret=%.2f succ=%.2f kl=%.4f", task.name, it,
                  tlog.mean_return[-1], tlog.success_rate[-1], kl)
    return policy, tlog


def evaluate_expert(kitchen: Kitchen, policy: ExpertPolicy, task: TaskSpec, layout: Layout,
                    n_eval: int, seed: int) -> np.ndarray:
    """Per-episode success flags of the deterministic (mean-action) policy."""
    _, _, _, succ = sample_episodes(kitchen, policy, task, layout, n_eval,
                                    np.random.default_rng(seed), deterministic=True)
    return succ


@dataclass
class FilterDecision:
    key: tuple
    successes: int
    episodes: int
    accepted: bool

    @property
    def rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


def filter_experts(outcomes: dict, threshold: float = 0.9) -> list[FilterDecision]:
    """Accept exactly the experts whose measured success rate is >= threshold.

    ``outcomes`` maps a key (e.g. (task, layout)) to per-episode success flags.
    """
    out = []
    for key, flags in outcomes.items():
        flags = np.asarray(flags, bool)
        k = int(flags.sum())
        out.append(FilterDecision(key, k, len(flags), len(flags) > 0 and k / len(flags) >= threshold))
    return out


# ---------------------------------------------------------------- recording
def rollout_record(kitchen: Kitchen, source, task: TaskSpec, layout: Layout, n_episodes: int,
                   seed: int, theme: VisualTheme | None = None):
    """Record episodes from a DemoTape or ExpertPolicy into a ShardFile."""
    from .harness.formats import Episode, ShardFile

    rng = np.random.default_rng(seed)
    theme = theme or kitchen.default_theme()
    episodes, meta = [], []
    goal = kitchen.goal(task, layout)
    for e in range(n_episodes):
        if isinstance(source, DemoTape):
            traj = replay_tape(kitchen, source, task, layout, theme)
            meta.append({"source": "tape", "tape": source.tape_id, "seed": source.seed,
                         "theme_seed": None, "episode": e})
        else:
            reset_seed = int(rng.integers(0, 2 ** 31))
            traj = _policy_rollout(kitchen, source, task, layout, reset_seed, theme, goal)
            meta.append({"source": "npg", "seed": reset_seed, "episode": e})
        episodes.append(Episode.from_trajectory(traj))
    prov = {"stage": "collect", "task": task.name, "task_id": task.task_id,
            "layout_id": layout.layout_id, "episodes": meta}
    return ShardFile(task.task_id, layout.layout_id, kitchen.image_size, kitchen.image_size, 3,
                     6, ACTION_DIM, kitchen.state_dim, json.dumps(prov, sort_keys=True), episodes)


def record_tapes(kitchen: Kitchen, tapes: Sequence[DemoTape], task: TaskSpec, layout: Layout,
                 theme: VisualTheme | None = None):
    """One episode per tape, default theme; the raw dataset for a (task, layout) cell."""
    from .harness.formats import Episode, ShardFile

    episodes, meta = [], []
    for k, tape in enumerate(tapes):
        traj = replay_tape(kitchen, tape, task, layout, theme)
        episodes.append(Episode.from_trajectory(traj))
        meta.append({"source": "tape", "tape": tape.tape_id, "seed": tape.seed, "episode": k})
    prov = {"stage": "collect", "task": task.name, "task_id": task.task_id,
            "layout_id": layout.layout_id, "episodes": meta}
    return ShardFile(task.task_id, layout.layout_id, kitchen.image_size, kitchen.image_size, 3,
                     6, ACTION_DIM, kitchen.state_dim, json.dumps(prov, sort_keys=True), episodes)


def _policy_rollout(kitchen, policy, task, layout, reset_seed, theme, goal) -> Trajectory:
    s = kitchen.reset(layout, task, reset_seed)
    states, acts, imgs = [s], [], []
    for _ in range(task.horizon):
        imgs.append(kitchen.render(s, theme))
        a = np.clip(policy.mean(state_features(kitchen, s, goal, task.horizon)[None])[0], -1, 1)
        s = kitchen.step(s, a)
        states.append(s)
        acts.append(a.astype(np.float32))
    return Trajectory(states, acts, imgs, {}, kitchen.check_success(states, task, goal))


def tape_from_episode(ep, task_id: int, layout_id: int, seed: int) -> DemoTape:
    return DemoTape(ep.actions, task_id, layout_id, seed)

