"""Deterministic 2D tabletop-kitchen simulator.

The workspace is the unit square. The robot is a point end-effector with a
velocity command and a gripper; free objects attach to it when grasped,
articulated objects (doors) rotate about a hinge when their handle is held.
Physics and rendering are separated: ``render`` is a pure function of
(state, theme), so replaying one action stream under many themes yields the
same state sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numcore import ConfigError, NonFiniteError

V_MAX = 0.05
GRASP_RADIUS = 0.03
GRIP_SLEW = 0.2
GRIP_CLOSED = 0.5
HOME = (0.5, 0.5)
HOME_JITTER = 0.02
IMAGE_SIZE = 48
PROPRIO_DIM = 6
ACTION_DIM = 3
HANDLE_RADIUS = 0.015
DOOR_HALF_WIDTH = 0.012
ROBOT_RADIUS = 0.02
MAX_REJECTIONS = 10_000
TEXTURES = ("plain", "stripes", "checker", "dots")
ROBOT_TARGET = "robot"


@dataclass(frozen=True)
class ObjectSpec:
    object_id: str
    kind: str = "free"  # free | articulated
    shape: str = "disc"  # disc | box
    half_extents: tuple[float, ...] = (0.04,)
    color: tuple[int, int, int] = (200, 200, 200)
    texture: str = "plain"
    arm_length: float = 0.0
    angle_range: tuple[float, float] = (0.0, 0.0)
    orient_range: tuple[float, float] = (-math.pi, math.pi)

    def __post_init__(self):
        if self.kind not in ("free", "articulated"):
            raise ConfigError(f"{self.object_id}: unknown kind {self.kind!r}")
        if self.shape not in ("disc", "box"):
            raise ConfigError(f"{self.object_id}: unknown shape {self.shape!r}")
        need = 1 if self.shape == "disc" else 2
        if len(self.half_extents) != need or min(self.half_extents) <= 0:
            raise ConfigError(f"{self.object_id}: bad half extents {self.half_extents}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"{self.object_id}: unknown texture {self.texture!r}")
        if self.kind == "articulated":
            lo, hi = self.angle_range
            if not hi > lo:
                raise ConfigError(f"{self.object_id}: degenerate articulation range")
            if self.arm_length <= 0:
                raise ConfigError(f"{self.object_id}: articulated objects need arm_length > 0")

    @property
    def body_radius(self) -> float:
        if self.shape == "disc":
            return self.half_extents[0]
        return math.hypot(*self.half_extents)

    @property
    def footprint_radius(self) -> float:
        if self.kind == "articulated":
            return max(self.body_radius, self.arm_length + HANDLE_RADIUS)
        return self.body_radius


@dataclass(frozen=True)
class Layout:
    layout_id: int
    seed: int
    poses: np.ndarray  # (n, 3): x, y, orientation

    def __eq__(self, other):
        return (isinstance(other, Layout) and self.layout_id == other.layout_id
                and self.seed == other.seed and np.array_equal(self.poses, other.poses))

    __hash__ = None


@dataclass(frozen=True)
class VisualTheme:
    color_offsets: np.ndarray  # (n, 3) ints
    lighting: float = 1.0
    textures: tuple[str, ...] = ()
    background: tuple[int, int, int] = (190, 170, 140)


@dataclass
class TaskSpec:
    task_id: int
    name: str
    target: str  # object id or "robot"
    goal_kind: str  # absolute | object | angle
    goal_value: tuple[float, ...] = ()
    goal_object: str = ""
    eps: float = 0.03
    min_stable_steps: int = 5
    horizon: int = 50

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"task {self.name}: eps must be positive")
        if self.horizon < self.min_stable_steps:
            raise ConfigError(f"task {self.name}: horizon < min_stable_steps")
        if self.goal_kind not in ("absolute", "object", "angle"):
            raise ConfigError(f"task {self.name}: unknown goal kind {self.goal_kind!r}")


@dataclass
class SimState:
    robot: np.ndarray  # (2,)
    robot_vel: np.ndarray  # (2,)
    grip: float  # aperture, 1 = open
    grip_rate: float
    poses: np.ndarray  # (n, 3): x, y, orientation (hinge pose for articulated)
    angles: np.ndarray  # (n,) articulation angle, 0 for free objects
    vels: np.ndarray  # (n, 3): vx, vy, v_angle
    held: int = -1
    t: int = 0

    def copy(self) -> "SimState":
        return SimState(self.robot.copy(), self.robot_vel.copy(), self.grip, self.grip_rate,
                        self.poses.copy(), self.angles.copy(), self.vels.copy(), self.held, self.t)

    def proprio(self) -> np.ndarray:
        return np.array([*self.robot, *self.robot_vel, self.grip, self.grip_rate], dtype=np.float32)

    def to_vector(self) -> np.ndarray:
        head = [*self.robot, *self.robot_vel, self.grip, self.grip_rate, self.held, self.t]
        return np.concatenate([np.asarray(head, dtype=np.float64), self.poses.ravel(),
                               self.angles, self.vels.ravel()]).astype(np.float32)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "SimState":
        vec = np.asarray(vec, dtype=np.float32)
        n = (len(vec) - 8) // 7
        if 8 + 7 * n != len(vec):
            raise ValueError(f"state vector length {len(vec)} is not 8 + 7n")
        p = vec[8:8 + 3 * n].reshape(n, 3)
        a = vec[8 + 3 * n:8 + 4 * n]
        v = vec[8 + 4 * n:].reshape(n, 3)
        return cls(vec[0:2].copy(), vec[2:4].copy(), vec[4], vec[5], p.copy(), a.copy(), v.copy(),
                   int(vec[6]), int(vec[7]))

    def __eq__(self, other):
        return isinstance(other, SimState) and np.array_equal(self.to_vector(), other.to_vector())

    __hash__ = None


def state_dim(n_objects: int) -> int:
    return 8 + 7 * n_objects


class Kitchen:
    """Simulator bound to one object roster.

    Instances hold only immutable geometry; all dynamic data lives in
    ``SimState`` so one Kitchen can be shared by independent episodes.
    """

    def __init__(self, roster: Sequence[ObjectSpec], image_size: int = IMAGE_SIZE,
                 clearance: float = 0.01):
        if not roster:
            raise ConfigError("object roster is empty")
        ids = [o.object_id for o in roster]
        if len(set(ids)) != len(ids) or ROBOT_TARGET in ids:
            raise ConfigError(f"object ids must be unique and not {ROBOT_TARGET!r}: {ids}")
        self.roster = tuple(roster)
        self.index = {o.object_id: i for i, o in enumerate(roster)}
        self.image_size = image_size
        self.clearance = clearance
        self.radii = np.array([o.footprint_radius for o in roster])
        self.articulated = np.array([o.kind == "articulated" for o in roster])
        self.arm = np.array([o.arm_length for o in roster], dtype=np.float32)
        c = (np.arange(image_size) + 0.5) / image_size
        self._py, self._px = np.meshgrid(c, c, indexing="ij")

    @property
    def n_objects(self) -> int:
        return len(self.roster)

    @property
    def state_dim(self) -> int:
        return state_dim(self.n_objects)

    # ---------------------------------------------------------------- layouts
    def place_objects(self, rng: np.random.Generator, poses: np.ndarray | None = None,
                      movable: Sequence[bool] | None = None) -> np.ndarray:
        """Rejection-sample non-overlapping poses for the movable objects.

        Objects that are not movable keep their pose from ``poses`` and act
        as fixed obstacles.
        """
        n = self.n_objects
        out = np.zeros((n, 3)) if poses is None else np.array(poses, dtype=np.float64)
        movable = [True] * n if movable is None else list(movable)
        placed = [i for i in range(n) if not movable[i]]
        rejections = 0
        for i in range(n):
            if not movable[i]:
                continue
            spec, r = self.roster[i], self.radii[i]
            if 2 * r >= 1.0:
                raise ConfigError(f"{spec.object_id} does not fit in the workspace")
            while True:
                x, y = rng.uniform(r, 1 - r, size=2)
                ok = all(math.hypot(x - out[j, 0], y - out[j, 1]) > r + self.radii[j] + self.clearance
                         for j in placed)
                if ok:
                    out[i] = (x, y, rng.uniform(*spec.orient_range))
                    placed.append(i)
                    break
                rejections += 1
                if rejections >= MAX_REJECTIONS:
                    raise ConfigError(f"layout placement failed after {MAX_REJECTIONS} rejections "
                                      "(roster too dense)")
        return out.astype(np.float32)

    def sample_layout(self, seed: int, layout_id: int | None = None) -> Layout:
        rng = np.random.default_rng(seed)
        return Layout(seed if layout_id is None else layout_id, seed, self.place_objects(rng))

    def footprint_gaps(self, poses: np.ndarray) -> np.ndarray:
        """Pairwise center distance minus footprint radii (upper triangle)."""
        n = self.n_objects
        gaps = []
        for i in range(n):
            for j in range(i + 1, n):
                d = math.hypot(poses[i, 0] - poses[j, 0], poses[i, 1] - poses[j, 1])
                gaps.append(d - self.radii[i] - self.radii[j])
        return np.array(gaps)

    # ------------------------------------------------------------------ tasks
    def target_index(self, task: TaskSpec) -> int:
        """Roster index of the task target, or -1 for the robot itself."""
        if task.target == ROBOT_TARGET:
            return -1
        if task.target not in self.index:
            raise ConfigError(f"task {task.name}: target {task.target!r} absent from layout roster")
        return self.index[task.target]

    def goal(self, task: TaskSpec, layout: Layout) -> np.ndarray:
        """Goal as (x, y, angle); unused components are zero."""
        if task.goal_kind == "absolute":
            return np.array([task.goal_value[0], task.goal_value[1], 0.0], dtype=np.float32)
        if task.goal_kind == "object":
            j = self.index.get(task.goal_object)
            if j is None:
                raise ConfigError(f"task {task.name}: goal object {task.goal_object!r} unknown")
            off = task.goal_value or (0.0, 0.0)
            return np.array([layout.poses[j, 0] + off[0], layout.poses[j, 1] + off[1], 0.0],
                            dtype=np.float32)
        return np.array([0.0, 0.0, task.goal_value[0]], dtype=np.float32)

    def handle_position(self, state: SimState, i: int) -> np.ndarray:
        ang = state.poses[i, 2] + state.angles[i]
        return state.poses[i, :2] + self.arm[i] * np.array([math.cos(ang), math.sin(ang)],
                                                          dtype=np.float32)

    def target_position(self, state: SimState, task: TaskSpec) -> np.ndarray:
        """Where the robot must go to manipulate the target."""
        i = self.target_index(task)
        if i < 0:
            return state.robot.copy()
        if self.articulated[i]:
            return self.handle_position(state, i)
        return state.poses[i, :2].copy()

    def pose_error(self, state: SimState, task: TaskSpec, goal: np.ndarray) -> float:
        i = self.target_index(task)
        if i < 0:
            return float(np.hypot(*(state.robot - goal[:2])))
        if self.articulated[i]:
            return float(abs(state.angles[i] - goal[2]))
        return float(np.hypot(*(state.poses[i, :2] - goal[:2])))

    def reward(self, state: SimState, task: TaskSpec, goal: np.ndarray) -> float:
        err = self.pose_error(state, task, goal)
        i = self.target_index(task)
        r = -err
        if i >= 0 and state.held == i:
            r += 0.5
        if err < task.eps:
            r += 10.0
        return r

    # ---------------------------------------------------------------- physics
    def reset(self, layout: Layout, task: TaskSpec | None, seed: int) -> SimState:
        if layout.poses.shape != (self.n_objects, 3):
            raise ConfigError("layout does not match the kitchen roster")
        if task is not None:
            self.target_index(task)
        rng = np.random.default_rng(seed)
        r = HOME_JITTER * math.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * math.pi)
        robot = np.array([HOME[0] + r * math.cos(a), HOME[1] + r * math.sin(a)], dtype=np.float32)
        n = self.n_objects
        angles = np.array([o.angle_range[0] if o.kind == "articulated" else 0.0
                           for o in self.roster], dtype=np.float32)
        return SimState(robot, np.zeros(2, np.float32), 1.0, 0.0,
                        layout.poses.astype(np.float32).copy(), angles,
                        np.zeros((n, 3), np.float32), -1, 0)

    def step(self, state: SimState, action) -> SimState:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise ConfigError(f"action must have {ACTION_DIM} components, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite action {a}")
        a = np.clip(a, -1.0, 1.0)
        s = state.copy()
        old = state.robot.astype(np.float64)
        new = np.clip(old + V_MAX * a[:2], 0.0, 1.0)
        s.robot = new.astype(np.float32)
        s.robot_vel = (s.robot - state.robot).astype(np.float32)
        target_ap = (a[2] + 1.0) / 2.0
        g = float(state.grip)
        g = g + float(np.clip(target_ap - g, -GRIP_SLEW, GRIP_SLEW))
        s.grip = np.float32(g)
        s.grip_rate = np.float32(s.grip - state.grip)
        s.vels[:] = 0
        closed = s.grip < GRIP_CLOSED

        if s.held >= 0 and not closed:
            s.held = -1
        if s.held >= 0:
            i = s.held
            if self.articulated[i]:
                self._drag_handle(s, i, s.robot.astype(np.float64) - old)
            else:
                s.vels[i, :2] = s.robot - s.poses[i, :2]
                s.poses[i, :2] = s.robot
        elif closed:
            i = self._grasp_candidate(s)
            if i >= 0:
                s.held = i
                if not self.articulated[i]:
                    s.vels[i, :2] = s.robot - s.poses[i, :2]
                    s.poses[i, :2] = s.robot
        s.t = state.t + 1
        return s

    def _grasp_candidate(self, s: SimState) -> int:
        best, best_d = -1, GRASP_RADIUS
        for i in range(self.n_objects):
            p = self.handle_position(s, i) if self.articulated[i] else s.poses[i, :2]
            d = float(np.hypot(*(p - s.robot)))
            if d <= best_d:
                best, best_d = i, d
        return best

    def _drag_handle(self, s: SimState, i: int, delta: np.ndarray):
        spec = self.roster[i]
        ang = float(s.poses[i, 2] + s.angles[i])
        tangent = np.array([-math.sin(ang), math.cos(ang)])
        dtheta = float(delta @ tangent) / spec.arm_length
        new = float(np.clip(s.angles[i] + dtheta, *spec.angle_range))
        s.vels[i, 2] = np.float32(new) - s.angles[i]
        s.angles[i] = np.float32(new)

    def check_success(self, states: Sequence[SimState], task: TaskSpec,
                      goal: np.ndarray, min_stable: int | None = None) -> bool:
        need = task.min_stable_steps if min_stable is None else min_stable
        run = 0
        for s in states:
            run = run + 1 if self.pose_error(s, task, goal) < task.eps else 0
            if run >= need:
                return True
        return False

    # --------------------------------------------------------------- themes
    def default_theme(self) -> VisualTheme:
        return VisualTheme(np.zeros((self.n_objects, 3), dtype=np.int16), 1.0,
                           tuple(o.texture for o in self.roster))

    def sample_theme(self, rng: np.random.Generator, jitter: int = 40,
                     lighting: tuple[float, float] = (0.7, 1.3),
                     texture_pool: Sequence[str] = TEXTURES, background_jitter: int = 30
                     ) -> VisualTheme:
        offs = rng.integers(-jitter, jitter + 1, size=(self.n_objects, 3)).astype(np.int16)
        light = float(rng.uniform(*lighting))
        tex = tuple(str(rng.choice(list(texture_pool))) for _ in self.roster)
        bg = tuple(int(np.clip(v + rng.integers(-background_jitter, background_jitter + 1), 0, 255))
                   for v in VisualTheme.__dataclass_fields__["background"].default)
        return VisualTheme(offs, light, tex, bg)

    # ---------------------------------------------------------------- render
    def render(self, state: SimState, theme: VisualTheme) -> np.ndarray:
        """Rasterize to an (H, W, 3) uint8 image with the painter's algorithm."""
        hw = self.image_size
        img = np.empty((hw, hw, 3), dtype=np.float32)
        img[:] = np.asarray(theme.background, dtype=np.float32)
        textures = theme.textures or tuple(o.texture for o in self.roster)
        for i, spec in enumerate(self.roster):
            color = np.clip(np.asarray(spec.color, np.float32) + theme.color_offsets[i], 0, 255)
            x, y, orient = (float(v) for v in state.poses[i])
            self._paint_shape(img, spec, x, y, orient, color, textures[i])
            if spec.kind == "articulated":
                hx, hy = self.handle_position(state, i)
                self._paint_segment(img, x, y, float(hx), float(hy), DOOR_HALF_WIDTH, color * 0.6)
                self._paint_disc(img, float(hx), float(hy), HANDLE_RADIUS, color * 0.35)
        shade = 40.0 + 200.0 * (1.0 - float(np.clip(state.grip, 0, 1)))
        rx, ry = (float(v) for v in state.robot)
        self._paint_disc(img, rx, ry, ROBOT_RADIUS, np.array([shade, shade, 255.0], np.float32))
        img *= np.float32(theme.lighting)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    def _window(self, x, y, r):
        hw = self.image_size
        j0, j1 = max(int((x - r) * hw) - 1, 0), min(int((x + r) * hw) + 2, hw)
        i0, i1 = max(int((y - r) * hw) - 1, 0), min(int((y + r) * hw) + 2, hw)
        return slice(i0, i1), slice(j0, j1)

    def _paint_disc(self, img, x, y, r, color):
        win = self._window(x, y, r)
        m = (self._px[win] - x) ** 2 + (self._py[win] - y) ** 2 <= r * r
        img[win][m] = color

    def _paint_segment(self, img, x0, y0, x1, y1, half_w, color):
        win = self._window((x0 + x1) / 2, (y0 + y1) / 2,
                           math.hypot(x1 - x0, y1 - y0) / 2 + half_w)
        px, py = self._px[win] - x0, self._py[win] - y0
        dx, dy = x1 - x0, y1 - y0
        ll = dx * dx + dy * dy
        t = np.clip((px * dx + py * dy) / ll, 0, 1) if ll > 0 else 0.0
        m = (px - t * dx) ** 2 + (py - t * dy) ** 2 <= half_w * half_w
        img[win][m] = color

    def _paint_shape(self, img, spec, x, y, orient, color, texture):
        win = self._window(x, y, spec.body_radius)
        dx, dy = self._px[win] - x, self._py[win] - y
        if spec.shape == "disc":
            r = spec.half_extents[0]
            m = dx * dx + dy * dy <= r * r
        else:
            c, s = math.cos(orient), math.sin(orient)
            u, v = c * dx + s * dy, -s * dx + c * dy
            m = (np.abs(u) <= spec.half_extents[0]) & (np.abs(v) <= spec.half_extents[1])
        pat = texture_factor(texture, dx, dy, self.image_size)
        img[win][m] = (color[None, :] * pat[m][:, None])


def texture_factor(texture: str, dx: np.ndarray, dy: np.ndarray, hw: int) -> np.ndarray:
    """Per-pixel brightness multiplier in {0.7, 1}; equals 1 at the object center."""
    u = np.floor(dx * hw / 2 + 0.5).astype(int)
    v = np.floor(dy * hw / 2 + 0.5).astype(int)
    if texture == "plain":
        dark = np.zeros(dx.shape, bool)
    elif texture == "stripes":
        dark = (u % 2) == 1
    elif texture == "checker":
        dark = ((u + v) % 2) == 1
    elif texture == "dots":
        dark = ((u % 2) == 1) & ((v % 2) == 1)
    else:
        raise ConfigError(f"unknown texture {texture!r}")
    return np.where(dark, 0.7, 1.0).astype(np.float32)


@dataclass
class Trajectory:
    states: list[SimState]  # includes terminal state: len = len(actions) + 1
    actions: list[np.ndarray]
    images: list[np.ndarray]
    provenance: dict = field(default_factory=dict)
    success: bool = False

    def __len__(self):
        return len(self.actions)


def rollout_actions(kitchen: Kitchen, layout: Layout, task: TaskSpec, reset_seed: int,
                    actions: Sequence[np.ndarray], theme: VisualTheme | None = None,
                    render: bool = True) -> Trajectory:
    """Execute a fixed action stream; render every pre-action state if asked."""
    s = kitchen.reset(layout, task, reset_seed)
    states, acts, imgs = [s], [], []
    for a in actions:
        if render:
            imgs.append(kitchen.render(s, theme or kitchen.default_theme()))
        s = kitchen.step(s, a)
        states.append(s)
        acts.append(np.clip(np.asarray(a, np.float32), -1, 1))
    goal = kitchen.goal(task, layout)
    ok = kitchen.check_success(states, task, goal)
    return Trajectory(states, acts, imgs, {}, ok)


def with_poses(layout: Layout, poses: np.ndarray) -> Layout:
    return replace(layout, poses=np.asarray(poses, dtype=np.float32))
