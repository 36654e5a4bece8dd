"""Closed-loop evaluation of trained policies and report assembly."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numcore as nc
from ..augment import shuffle_distractors
from ..collect import run_script, state_features
from ..compress import EncoderParams, encode_images
from ..kitchen2d import Kitchen, Layout, SimState, TaskSpec, VisualTheme
from ..policy import BcPolicyParams, act_embedded, context_embedding, hashed_name_embedding
from .config import PipelineConfig, loads


class EncoderMissing(RuntimeError):
    pass


@dataclass
class PolicyBundle:
    """Everything needed to deploy a trained policy."""

    params: BcPolicyParams
    encoder: EncoderParams | None
    encoder_fingerprint: bytes
    task_embedding: str
    input_kind: str
    train_layouts: list[int]
    config_text: str
    master_seed: int
    curves: list[float] = field(default_factory=list)

    @property
    def config(self) -> PipelineConfig:
        return loads(self.config_text)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"pi_{i}": a for i, a in enumerate(self.params.mlp.arrays())}
        arrays.update(log_sigma=self.params.log_sigma, in_mean=self.params.in_mean,
                      in_std=self.params.in_std)
        meta = {"encoder_fingerprint": self.encoder_fingerprint.hex(),
                "task_embedding": self.task_embedding, "input_kind": self.input_kind,
                "train_layouts": self.train_layouts, "master_seed": self.master_seed,
                "obs_dim": self.params.obs_dim, "goal_dim": self.params.goal_dim,
                "n_pi": len(self.params.mlp.arrays()), "curves": self.curves,
                "activation": self.params.mlp.activation}
        if self.encoder is not None:
            meta.update(encoder_tag=self.encoder.tag, encoder_normalize=self.encoder.normalize,
                        n_enc=len(self.encoder.arrays()))
            arrays.update({f"enc_{i}": a for i, a in enumerate(self.encoder.arrays())})
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), np.uint8)
        arrays["config"] = np.frombuffer(self.config_text.encode(), np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "PolicyBundle":
        z = np.load(Path(path))
        meta = json.loads(z["meta"].tobytes().decode())
        pi = nc.MlpParams.from_arrays([z[f"pi_{i}"] for i in range(meta["n_pi"])],
                                  meta.get("activation", "tanh"))
        params = BcPolicyParams(pi, z["log_sigma"], meta["obs_dim"], meta["goal_dim"],
                                z["in_mean"], z["in_std"])
        fp = bytes.fromhex(meta["encoder_fingerprint"])
        enc = None
        if "n_enc" in meta:
            body = nc.MlpParams.from_arrays([z[f"enc_{i}"] for i in range(meta["n_enc"])], "relu")
            enc = EncoderParams(body, meta["encoder_tag"], meta["encoder_normalize"])
            if enc.fingerprint != fp:
                raise EncoderMissing(f"{path}: stored encoder does not match fingerprint {fp.hex()[:16]}")
        return cls(params, enc, fp, meta["task_embedding"], meta["input_kind"],
                   meta["train_layouts"], z["config"].tobytes().decode(), meta["master_seed"],
                   meta.get("curves", []))


# ------------------------------------------------------------ embeddings
def target_pose(kitchen: Kitchen, task: TaskSpec, s0: SimState) -> np.ndarray:
    """Where the robot must go first: grasp point of the target, or the reach goal."""
    i = kitchen.target_index(task)
    if i < 0:
        g = kitchen.goal(task, Layout(0, -1, s0.poses))
        return np.array([g[0], g[1], 0.0], np.float32)
    p = kitchen.target_position(s0, task)
    return np.array([p[0], p[1], s0.poses[i, 2]], np.float32)


def goal_embedding(mode: str, kitchen: Kitchen, tasks: Sequence[TaskSpec], task: TaskSpec,
                   s0: SimState, goal: np.ndarray, hashed_dim: int = 16, encoder=None,
                   goal_image: np.ndarray | None = None) -> np.ndarray:
    if mode == "context":
        ti = [t.task_id for t in tasks].index(task.task_id)
        return context_embedding(ti, len(tasks), goal, target_pose(kitchen, task, s0),
                                 s0.poses[:, :2])
    if mode == "hashed_name":
        return hashed_name_embedding(task.name, hashed_dim)
    if mode == "goal_image":
        if encoder is None or goal_image is None:
            raise ValueError("goal_image conditioning needs an encoder and a goal frame")
        return encode_images(encoder, goal_image[None])[0]
    raise ValueError(f"unknown task embedding mode {mode!r}")


# -------------------------------------------------------------- reports
@dataclass
class CellResult:
    task: str
    task_id: int
    layout_id: int
    split: str
    outcomes: list[bool]

    @property
    def successes(self) -> int:
        return int(sum(self.outcomes))

    @property
    def episodes(self) -> int:
        return len(self.outcomes)

    @property
    def rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


@dataclass
class EvalReport:
    cells: list[CellResult] = field(default_factory=list)

    def by_task(self, split: str | None = None) -> dict[str, tuple[float, float]]:
        out = {}
        for name in dict.fromkeys(c.task for c in self.cells):
            out[name] = mean_stderr([c.rate for c in self.cells
                                     if c.task == name and (split is None or c.split == split)])
        return out

    def overall(self, split: str | None = None) -> tuple[float, float]:
        return mean_stderr([c.rate for c in self.cells if split is None or c.split == split])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "split", "task", "layout_id", "successes", "episodes", "rate", "stderr"])
        for c in self.cells:
            w.writerow(["cell", c.split, c.task, c.layout_id, c.successes, c.episodes,
                        f"{c.rate:.6f}", ""])
        for split in dict.fromkeys(c.split for c in self.cells):
            for name, (m, se) in self.by_task(split).items():
                cs = [c for c in self.cells if c.split == split and c.task == name]
                w.writerow(["task", split, name, "", sum(c.successes for c in cs),
                            sum(c.episodes for c in cs), f"{m:.6f}", f"{se:.6f}"])
            m, se = self.overall(split)
            cs = [c for c in self.cells if c.split == split]
            w.writerow(["overall", split, "", "", sum(c.successes for c in cs),
                        sum(c.episodes for c in cs), f"{m:.6f}", f"{se:.6f}"])
        return buf.getvalue()


def report_from_csv(text: str) -> EvalReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    cells = []
    for r in rows:
        if r["kind"] == "cell":
            k, n = int(r["successes"]), int(r["episodes"])
            cells.append(CellResult(r["task"], -1, int(r["layout_id"]), r["split"],
                                    [True] * k + [False] * (n - k)))
    return EvalReport(cells)


# ------------------------------------------------------------- evaluate
def run_episodes(kitchen: Kitchen, bundle: PolicyBundle, task: TaskSpec, layouts: Sequence[Layout], themes: Sequence[VisualTheme],
                 reset_seeds: Sequence[int], horizon: int, deterministic: bool = True,
                 rng: np.random.Generator | None = None, controller=None) -> list[bool]:
    """Roll out one episode per (layout, theme, seed) triple, batched in lockstep.

    ``controller(states, goals) -> actions`` replaces the learned policy, e.g.
    to run the scripted expert through the same loop.
    """
    n = len(layouts)
    states = [kitchen.reset(layouts[i], task, int(reset_seeds[i])) for i in range(n)]
    goals = [kitchen.goal(task, lay) for lay in layouts]
    if controller is not None:
        hist = [[s] for s in states]
        for _ in range(horizon):
            acts = controller(states, goals)
            states = [kitchen.step(s, a) for s, a in zip(states, acts)]
            for h, s in zip(hist, states):
                h.append(s)
        return [kitchen.check_success(h, task, g) for h, g in zip(hist, goals)]
    cfg = bundle.config
    goal_imgs = [None] * n
    if bundle.task_embedding == "goal_image":
        for i in range(n):
            final = run_script(kitchen, task, layouts[i], int(reset_seeds[i]), horizon).states[-1]
            goal_imgs[i] = kitchen.render(final, themes[i])
    zg = np.stack([goal_embedding(bundle.task_embedding, kitchen, cfg.tasks, task, states[i],
                                  goals[i], cfg.train.hashed_dim, bundle.encoder, goal_imgs[i])
                   for i in range(n)])
    hist = [[s] for s in states]
    for _ in range(horizon):
        if bundle.input_kind == "state":
            obs = np.stack([state_features(kitchen, s, g, horizon) for s, g in zip(states, goals)])
        else:
            imgs = np.stack([kitchen.render(s, th) for s, th in zip(states, themes)])
            obs = encode_images(bundle.encoder, imgs)
        prop = np.stack([s.proprio() for s in states])
        acts = act_embedded(bundle.params, obs, zg, prop, deterministic, rng)
        states = [kitchen.step(s, a) for s, a in zip(states, acts)]
        for h, s in zip(hist, states):
            h.append(s)
    return [kitchen.check_success(h, task, g) for h, g in zip(hist, goals)]


def evaluate_layouts(kitchen: Kitchen, bundle: PolicyBundle, tasks: Sequence[TaskSpec],
                     layouts: Sequence[Layout], split: str, episodes_per_cell: int,
                     horizon: int, seed: int, resample_themes: bool, shuffle: bool = False,
                     theme_sampler=None, deterministic: bool = True,
                     controller_factory=None) -> EvalReport:
    """``controller_factory(task)`` swaps the policy for a controller (see ``run_episodes``)."""
    if controller_factory is None:
        if bundle.input_kind == "visual" and bundle.encoder is None:
            raise EncoderMissing("policy bundle has no encoder to embed observations")
        if bundle.encoder is not None and bundle.encoder.fingerprint != bundle.encoder_fingerprint:
            raise EncoderMissing("encoder fingerprint does not match the policy's training provenance")
    report = EvalReport()
    for task in tasks:
        for lay in layouts:
            rng = nc.make_rng(seed, split, task.task_id, lay.layout_id)
            lays, themes, seeds = [], [], []
            for _ in range(episodes_per_cell):
                lays.append(shuffle_distractors(kitchen, lay, task, rng) if shuffle else lay)
                if resample_themes:
                    themes.append(theme_sampler(rng) if theme_sampler else kitchen.sample_theme(rng))
                else:
                    themes.append(kitchen.default_theme())
                seeds.append(int(rng.integers(0, 2 ** 31)))
            ctrl = controller_factory(task) if controller_factory else None
            outcomes = run_episodes(kitchen, bundle, task, lays, themes, seeds, horizon,
                                    deterministic, rng, ctrl)
            report.cells.append(CellResult(task.name, task.task_id, lay.layout_id, split, outcomes))
    return report
