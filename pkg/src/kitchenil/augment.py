"""Stage 2: multiply recorded episodes into a diverse training set.

Each source episode is replayed under sampled visual themes, with
distractor objects re-arranged, per-step action noise, and (for a fixed
fraction of replays) a prompt-conditioned sprite in-painted inside a binary
mask that avoids the task target and the robot.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .collect import DemoTape
from .kitchen2d import (ROBOT_RADIUS, Kitchen, Layout, TaskSpec, Trajectory, VisualTheme,
                        rollout_actions, with_poses)
from .numcore import ConfigError, make_rng

log = logging.getLogger(__name__)

REFERENCE_SCALE = {"tasks": 18, "layouts": 100, "episodes_per_cell": 50, "reported_episodes": 45_000}


@dataclass
class AugmentPlan:
    replays_per_source: int = 20
    action_noise: float = 0.02
    shuffle: bool = True
    inpaint_fraction: float = 0.5
    inpaint_count: int = 1
    prompts: tuple[str, ...] = ("mug", "plate", "glass", "fruit", "bowl")
    color_jitter: int = 40
    lighting: tuple[float, float] = (0.7, 1.3)
    textures: tuple[str, ...] = ("plain", "stripes", "checker", "dots")
    background_jitter: int = 30
    themes: bool = True
    pixel_only: bool = False
    master_seed: int = 0

    def __post_init__(self):
        if self.replays_per_source < 1:
            raise ConfigError("replays_per_source must be >= 1")
        if self.action_noise < 0:
            raise ConfigError("action noise std must be >= 0")
        unknown = set(self.prompts) - set(SPRITES)
        if unknown:
            raise ConfigError(f"unknown in-paint prompts {sorted(unknown)}; pool is {sorted(SPRITES)}")

    @classmethod
    def identity(cls, master_seed: int = 0) -> "AugmentPlan":
        return cls(1, 0.0, False, 0.0, themes=False, master_seed=master_seed)

    @classmethod
    def from_config(cls, sec, master_seed: int) -> "AugmentPlan":
        return cls(sec.replays_per_source, sec.action_noise, sec.shuffle, sec.inpaint_fraction,
                   sec.inpaint_count, tuple(sec.inpaint_prompts), sec.color_jitter,
                   (sec.lighting_min, sec.lighting_max), tuple(sec.textures),
                   sec.background_jitter, True, sec.pixel_only, master_seed)

    def inpainted(self, r: int) -> bool:
        """Replay r carries in-painting; exactly floor(R * fraction) replays do."""
        f = self.inpaint_fraction
        return math.floor((r + 1) * f) > math.floor(r * f)

    def sample_theme(self, kitchen: Kitchen, rng: np.random.Generator) -> VisualTheme:
        if not self.themes or self.pixel_only:
            return kitchen.default_theme()
        return kitchen.sample_theme(rng, self.color_jitter, self.lighting, self.textures,
                                    self.background_jitter)


# ------------------------------------------------------------ distractors
def task_object_indices(kitchen: Kitchen, task: TaskSpec) -> set[int]:
    """Objects that define the task: the target and any goal-reference object."""
    keep = set()
    ti = kitchen.target_index(task)
    if ti >= 0:
        keep.add(ti)
    if task.goal_kind == "object":
        keep.add(kitchen.index[task.goal_object])
    return keep


def shuffle_distractors(kitchen: Kitchen, layout: Layout, task: TaskSpec,
                        rng: np.random.Generator) -> Layout:
    """Re-place every non-task object; task objects keep their exact pose."""
    keep = task_object_indices(kitchen, task)
    movable = [i not in keep for i in range(kitchen.n_objects)]
    if not any(movable):
        return layout
    return with_poses(layout, kitchen.place_objects(rng, layout.poses, movable))


# ------------------------------------------------------------------ replay
def action_noise(seed: int, shape, std: float) -> np.ndarray:
    """The exact noise stream added by ``replay_augmented`` for ``seed``."""
    if std == 0:
        return np.zeros(shape, np.float32)
    return (std * np.random.default_rng(seed).standard_normal(shape)).astype(np.float32)


def replay_augmented(kitchen: Kitchen, tape: DemoTape, task: TaskSpec, layout: Layout,
                     theme: VisualTheme, sigma: float, seed: int, render: bool = True) -> Trajectory:
    kitchen.target_index(task)
    acts = np.clip(tape.actions + action_noise(seed, tape.actions.shape, sigma), -1, 1)
    traj = rollout_actions(kitchen, layout, task, tape.seed, acts, theme, render)
    traj.provenance = {"tape": tape.tape_id, "task_id": tape.task_id, "layout_id": tape.layout_id,
                       "sigma": sigma, "noise_seed": seed}
    return traj


# --------------------------------------------------------------- in-paint
@dataclass(frozen=True)
class SpriteFamily:
    shapes: tuple[str, ...]
    radius: tuple[float, float]  # pixels
    palette: tuple[tuple[int, int, int], ...]
    alpha: tuple[float, float] = (0.85, 1.0)


SPRITES = {
    "mug": SpriteFamily(("disc_handle",), (3.0, 5.0), ((200, 40, 40), (40, 60, 190), (240, 240, 230))),
    "plate": SpriteFamily(("ring_filled",), (5.0, 7.5), ((245, 245, 240), (225, 215, 190))),
    "glass": SpriteFamily(("box",), (2.5, 4.5), ((170, 210, 240), (200, 230, 245)), (0.5, 0.7)),
    "fruit": SpriteFamily(("disc",), (2.0, 4.0), ((220, 50, 30), (250, 160, 20), (240, 220, 40),
                                                 (80, 180, 50))),
    "bowl": SpriteFamily(("ring",), (4.0, 6.5), ((120, 80, 50), (200, 200, 210), (60, 120, 170))),
}


@dataclass
class InpaintSpec:
    mask: np.ndarray  # (H, W) bool
    prompt: str
    seed: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, bool)
        if self.mask.ndim != 2 or not self.mask.any():
            raise ValueError("in-paint mask must be a non-empty 2-D binary image")


def rect_mask(h: int, w: int, top: int, left: int, height: int, width: int) -> np.ndarray:
    m = np.zeros((h, w), bool)
    m[top:top + height, left:left + width] = True
    return m


def render_sprite(prompt: str, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sprite color (H, W, 3) float and alpha (H, W) in [0, 1], zero outside the mask."""
    if prompt not in SPRITES:
        raise ValueError(f"unknown prompt {prompt!r}; prompt pool is {sorted(SPRITES)}")
    fam = SPRITES[prompt]
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    cy = (rows.min() + rows.max() + 1) / 2 + rng.uniform(-1, 1)
    cx = (cols.min() + cols.max() + 1) / 2 + rng.uniform(-1, 1)
    r = rng.uniform(*fam.radius)
    shape = fam.shapes[int(rng.integers(len(fam.shapes)))]
    base = np.asarray(fam.palette[int(rng.integers(len(fam.palette)))], np.float32)
    base = np.clip(base + rng.integers(-20, 21, size=3), 0, 255)
    a0 = rng.uniform(*fam.alpha)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    d = np.hypot(yy - cy, xx - cx)
    if shape == "disc":
        cover = d <= r
        shade = np.ones_like(d)
    elif shape == "disc_handle":
        cover = (d <= r) | (np.hypot(yy - cy, xx - (cx + r + 0.8)) <= 0.45 * r)
        shade = np.where(d <= r, 1.0, 0.75)
    elif shape == "ring_filled":
        cover = d <= r
        shade = np.where(d > 0.7 * r, 0.85, 1.0)
    elif shape == "ring":
        cover = (d <= r) & (d >= 0.55 * r)
        shade = np.ones_like(d)
    else:  # box
        theta = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        cover = (np.abs(u) <= 0.5 * r) & (np.abs(v) <= r)
        shade = np.ones_like(d)
    alpha = np.where(cover & mask, a0, 0.0).astype(np.float32)
    color = base[None, None, :] * shade[..., None]
    return color.astype(np.float32), alpha


def inpaint(image: np.ndarray, spec: InpaintSpec) -> np.ndarray:
    """Alpha-blend a procedural sprite strictly inside ``spec.mask``."""
    if spec.mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {spec.mask.shape} != image shape {image.shape[:2]}")
    color, alpha = render_sprite(spec.prompt, spec.mask, spec.seed)
    out = image.copy()
    m = alpha > 0
    blend = alpha[m, None] * color[m] + (1 - alpha[m, None]) * image[m].astype(np.float32)
    out[m] = np.clip(np.rint(blend), 0, 255).astype(image.dtype)
    return out


def forbidden_pixels(kitchen: Kitchen, traj: Trajectory, task: TaskSpec, margin: float = 0.02
                     ) -> np.ndarray:
    """Pixels covered by the target footprint or robot marker at any step."""
    hw = kitchen.image_size
    c = (np.arange(hw) + 0.5) / hw
    yy, xx = np.meshgrid(c, c, indexing="ij")
    bad = np.zeros((hw, hw), bool)
    ti = kitchen.target_index(task)
    for s in traj.states:
        discs = [(s.robot[0], s.robot[1], ROBOT_RADIUS)]
        if ti >= 0:
            discs.append((s.poses[ti, 0], s.poses[ti, 1], kitchen.radii[ti]))
        for x, y, r in discs:
            bad |= (xx - x) ** 2 + (yy - y) ** 2 <= (r + margin) ** 2
    return bad


def sample_mask(forbidden: np.ndarray, rng: np.random.Generator, size=(8, 15),
                tries: int = 200) -> np.ndarray | None:
    h, w = forbidden.shape
    for _ in range(tries):
        hh, ww = (int(v) for v in rng.integers(size[0], size[1] + 1, size=2))
        top, left = int(rng.integers(0, h - hh + 1)), int(rng.integers(0, w - ww + 1))
        m = rect_mask(h, w, top, left, hh, ww)
        if not (m & forbidden).any():
            return m
    return None


# ------------------------------------------------------- pixel-only arm
def pixel_jitter(image: np.ndarray, rng: np.random.Generator, strength: float = 0.15,
                 max_shift: int = 2) -> np.ndarray:
    """Standard color jitter (per-channel gain + brightness) and crop-shift."""
    gain = 1 + rng.uniform(-strength, strength, size=3) + rng.uniform(-strength, strength)
    img = np.clip(image.astype(np.float32) * gain, 0, 255)
    return crop_shift(np.rint(img).astype(np.uint8), rng, max_shift)


def crop_shift(image: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Random (H-2s)x(W-2s) crop padded back to full size by edge replication."""
    s = max_shift
    if s == 0:
        return image.copy()
    h, w = image.shape[:2]
    dy, dx = (int(v) for v in rng.integers(0, 2 * s + 1, size=2))
    crop = image[dy:dy + h - 2 * s, dx:dx + w - 2 * s]
    return np.pad(crop, ((s, s), (s, s), (0, 0)), mode="edge")


# ------------------------------------------------------------- multiply
@dataclass
class AccountingReport:
    episodes_in: int = 0
    episodes_out: int = 0
    replays_per_source: int = 1
    counts: dict = field(default_factory=lambda: {k: 0 for k in (
        "themed", "shuffled", "noised", "inpainted", "pixel_jittered", "successful", "failed")})

    @property
    def consistent(self) -> bool:
        return self.episodes_out == self.episodes_in * self.replays_per_source

    def rows(self) -> list[tuple[str, int | str]]:
        t, l, e = REFERENCE_SCALE["tasks"], REFERENCE_SCALE["layouts"], REFERENCE_SCALE["episodes_per_cell"]
        formula = t * l * e
        rows = [("episodes_in", self.episodes_in), ("replays_per_source", self.replays_per_source),
                ("episodes_out", self.episodes_out),
                ("expected_out", self.episodes_in * self.replays_per_source)]
        rows += [(k, v) for k, v in self.counts.items()]
        rows += [("reference_scale_formula", f"{t}x{l}x{e}={formula}"),
                 ("reference_scale_reported", REFERENCE_SCALE["reported_episodes"]),
                 ("reference_scale_discrepancy", formula - REFERENCE_SCALE["reported_episodes"])]
        return rows

    def to_csv(self) -> str:
        return "key,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows())

    def to_text(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        return "\n".join(f"{k:<{width}}  {v}" for k, v in self.rows())


def source_tapes(shard) -> list[DemoTape]:
    """Recover replayable tapes (actions + reset seed) from a raw shard."""
    prov = json.loads(shard.provenance) if shard.provenance else {}
    metas = prov.get("episodes", [])
    out = []
    for k, ep in enumerate(shard.episodes):
        seed = metas[k]["seed"] if k < len(metas) else k
        out.append(DemoTape(ep.actions, shard.task_id, shard.layout_id, int(seed)))
    return out


def layout_from_shard(kitchen: Kitchen, shard) -> Layout:
    from .kitchen2d import SimState

    if not shard.episodes:
        raise ValueError(f"shard t{shard.task_id}/l{shard.layout_id} has no episodes")
    s0 = SimState.from_vector(shard.episodes[0].states[0])
    return Layout(shard.layout_id, -1, s0.poses.copy())


def augment_shard(kitchen: Kitchen, task: TaskSpec, shard, plan: AugmentPlan,
                  report: AccountingReport | None = None):
    """Emit ``replays_per_source`` augmented episodes per source episode."""
    from .harness.formats import Episode, ShardFile

    layout = layout_from_shard(kitchen, shard)
    tapes = source_tapes(shard)
    episodes, metas = [], []
    for e, tape in enumerate(tapes):
        for r in range(plan.replays_per_source):
            rng = make_rng(plan.master_seed, shard.shard_id, e, r)
            theme = plan.sample_theme(kitchen, rng)
            lay = shuffle_distractors(kitchen, layout, task, rng) \
                if plan.shuffle and not plan.pixel_only else layout
            sigma = 0.0 if plan.pixel_only else plan.action_noise
            noise_seed = int(rng.integers(0, 2 ** 31))
            traj = replay_augmented(kitchen, tape, task, lay, theme, sigma, noise_seed)
            meta = {"tape": tape.tape_id, "seed": tape.seed, "replay": r, "sigma": sigma,
                    "noise_seed": noise_seed, "shuffled": lay is not layout, "inpaint": None,
                    "themed": theme is not None and plan.themes and not plan.pixel_only}
            images = traj.images
            if plan.pixel_only:
                images = [pixel_jitter(im, rng) for im in images]
                meta["pixel_jitter"] = True
            elif plan.inpainted(r):
                bad = forbidden_pixels(kitchen, traj, task)
                prompts = []
                for _ in range(plan.inpaint_count):
                    mask = sample_mask(bad, rng)
                    if mask is None:
                        continue
                    spec = InpaintSpec(mask, str(rng.choice(list(plan.prompts))),
                                       int(rng.integers(0, 2 ** 31)))
                    images = [inpaint(im, spec) for im in images]
                    prompts.append(spec.prompt)
                    bad = bad | mask
                meta["inpaint"] = prompts or None
            traj.images = images
            episodes.append(Episode.from_trajectory(traj))
            metas.append(meta)
            if report is not None:
                c = report.counts
                c["themed"] += meta["themed"]
                c["shuffled"] += meta["shuffled"]
                c["noised"] += sigma > 0
                c["inpainted"] += bool(meta["inpaint"])
                c["pixel_jittered"] += bool(meta.get("pixel_jitter"))
                c["successful" if traj.success else "failed"] += 1
    if report is not None:
        report.episodes_in += len(tapes)
        report.episodes_out += len(episodes)
    try:
        src_prov = json.loads(shard.provenance) if shard.provenance else {}
    except json.JSONDecodeError:
        src_prov = {"raw": shard.provenance}
    prov = {"stage": "augment", "task": task.name, "task_id": task.task_id,
            "layout_id": shard.layout_id, "source": src_prov.get("stage", "unknown"),
            "master_seed": plan.master_seed, "replays_per_source": plan.replays_per_source,
            "episodes": metas}
    return ShardFile(shard.task_id, shard.layout_id, shard.H, shard.W, shard.C, shard.proprio_dim,
                     shard.action_dim, shard.state_dim, json.dumps(prov, sort_keys=True), episodes)


def multiply_dataset(kitchen: Kitchen, tasks: Sequence[TaskSpec], shards: Iterable,
                     plan: AugmentPlan):
    """Yield augmented shards in input order; the report fills in as they are consumed.

    Returns ``(generator, report)`` so callers can stream shards to disk.
    """
    report = AccountingReport(replays_per_source=plan.replays_per_source)
    by_id = {t.task_id: t for t in tasks}

    def gen():
        for shard in shards:
            if shard.task_id not in by_id:
                raise ConfigError(f"shard task id {shard.task_id} not in the configured task list")
            yield augment_shard(kitchen, by_id[shard.task_id], shard, plan, report)

    return gen(), report
