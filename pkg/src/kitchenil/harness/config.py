"""Sectioned key=value pipeline configuration.

A config file is INI text. Fixed sections map onto the dataclasses below;
``[object.<id>]`` and ``[task.<name>]`` sections define the roster and the
task list. Unknown sections or keys are rejected so typos never pass
silently. ``PipelineConfig.to_text()`` renders the fully resolved config,
which every stage embeds in its outputs.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..kitchen2d import ObjectSpec, TaskSpec
from ..numcore import ConfigError


@dataclass
class PipelineSection:
    master_seed: int = 0
    image_size: int = 48
    horizon: int = 50
    min_stable_steps: int = 5
    eps: float = 0.03
    clearance: float = 0.01
    jobs: int = 1


@dataclass
class LayoutSection:
    train_count: int = 10
    study_counts: tuple[int, ...] = (2, 5, 10)
    heldout_count: int = 10
    heldout_id_base: int = 10_000
    seeds: int = 3


@dataclass
class CollectSection:
    mode: str = "script"
    tapes_per_cell: int = 5
    npg_tasks: tuple[str, ...] = ("reach_switch",)
    npg_iterations: int = 60
    npg_episodes: int = 40
    npg_delta: float = 0.01
    npg_cg_iters: int = 10
    npg_gamma: float = 0.99
    npg_hidden: tuple[int, ...] = (32, 32)
    filter_threshold: float = 0.9
    filter_episodes: int = 50


@dataclass
class AugmentSection:
    replays_per_source: int = 20
    action_noise: float = 0.02
    shuffle: bool = True
    inpaint_fraction: float = 0.5
    inpaint_count: int = 1
    inpaint_prompts: tuple[str, ...] = ("mug", "plate", "glass", "fruit", "bowl")
    color_jitter: int = 40
    lighting_min: float = 0.7
    lighting_max: float = 1.3
    textures: tuple[str, ...] = ("plain", "stripes", "checker", "dots")
    background_jitter: int = 30
    pixel_only: bool = False


@dataclass
class EncoderSection:
    kind: str = "random"
    dim: int = 64
    hidden: int = 256
    seed: int = 0
    moco_steps: int = 1000
    moco_batch: int = 32
    moco_queue: int = 1024
    moco_momentum: float = 0.99
    moco_temperature: float = 0.2
    moco_lr: float = 1e-3
    moco_frames: str = "augmented"
    moco_jitter: float = 0.2
    moco_shift: int = 1


@dataclass
class TrainSection:
    mode: str = "frozen"
    task_embedding: str = "context"
    hashed_dim: int = 16
    hidden: tuple[int, ...] = (256, 256)
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    encoder_lr: float = 1e-4
    loss: str = "mean_mse"
    sigma_init: float = -1.0
    filter_success: bool = True
    input: str = "visual"
    activation: str = "tanh"


@dataclass
class EvalSection:
    episodes_per_cell: int = 10
    deterministic: bool = True
    shuffle_distractors: bool = False


@dataclass
class StudySection:
    scaling_arms: tuple[str, ...] = ("state", "random", "moco")
    ablation_layouts: int = 1
    ablation_embedding: str = "hashed_name"
    ablation_representations: tuple[str, ...] = ("random", "moco", "finetune")


SECTIONS = {
    "pipeline": PipelineSection, "layouts": LayoutSection, "collect": CollectSection,
    "augment": AugmentSection, "encoder": EncoderSection, "train": TrainSection,
    "eval": EvalSection, "study": StudySection,
}

CHOICES = {
    ("collect", "mode"): ("script", "npg"),
    ("encoder", "kind"): ("random", "moco"),
    ("encoder", "moco_frames"): ("augmented", "raw"),
    ("train", "mode"): ("frozen", "finetune"),
    ("train", "task_embedding"): ("context", "hashed_name", "goal_image"),
    ("train", "loss"): ("mean_mse", "sampled"),
    ("train", "input"): ("visual", "state"),
    ("train", "activation"): ("tanh", "relu"),
    ("study", "ablation_embedding"): ("context", "hashed_name", "goal_image"),
}
ARM_CHOICES = {
    ("study", "scaling_arms"): ("state", "random", "moco"),
    ("study", "ablation_representations"): ("random", "moco", "finetune"),
}

_OBJECT_KEYS = {"kind", "shape", "half_extents", "color", "texture", "arm_length",
                "angle_range", "orient_range"}
_TASK_KEYS = {"task_id", "target", "goal", "eps", "min_stable_steps", "horizon"}


@dataclass
class PipelineConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    layouts: LayoutSection = field(default_factory=LayoutSection)
    collect: CollectSection = field(default_factory=CollectSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    study: StudySection = field(default_factory=StudySection)
    objects: list[ObjectSpec] = field(default_factory=list)
    tasks: list[TaskSpec] = field(default_factory=list)
    raw_objects: dict = field(default_factory=dict, repr=False)
    raw_tasks: dict = field(default_factory=dict, repr=False)

    def task(self, name_or_id) -> TaskSpec:
        for t in self.tasks:
            if t.name == name_or_id or t.task_id == name_or_id:
                return t
        raise ConfigError(f"unknown task {name_or_id!r}")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        for oid, kv in self.raw_objects.items():
            cp[f"object.{oid}"] = kv
        for tname, kv in self.raw_tasks.items():
            cp[f"task.{tname}"] = kv
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def replace(self, **overrides) -> "PipelineConfig":
        """Copy with dotted overrides, e.g. ``replace(**{"augment.shuffle": False})``."""
        return loads(self.to_text(), overrides)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _convert(raw: str, proto, where: str):
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if proto and isinstance(proto[0], int):
                return tuple(int(x) for x in items)
            if proto and isinstance(proto[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(proto).__name__}") from e


def _floats(raw: str, where: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"{where}: expected comma-separated numbers, got {raw!r}") from e


def _parse_object(oid: str, kv: dict) -> ObjectSpec:
    where = f"[object.{oid}]"
    unknown = set(kv) - _OBJECT_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    args = {"object_id": oid}
    for k in ("kind", "shape", "texture"):
        if k in kv:
            args[k] = kv[k].strip()
    if "half_extents" in kv:
        args["half_extents"] = _floats(kv["half_extents"], where)
    if "color" in kv:
        args["color"] = tuple(int(x) for x in _floats(kv["color"], where))
    if "arm_length" in kv:
        args["arm_length"] = float(kv["arm_length"])
    for k in ("angle_range", "orient_range"):
        if k in kv:
            v = _floats(kv[k], where)
            if len(v) != 2:
                raise ConfigError(f"{where}: {k} needs two numbers")
            args[k] = v
    return ObjectSpec(**args)


def _parse_task(name: str, kv: dict, pipe: PipelineSection) -> TaskSpec:
    where = f"[task.{name}]"
    unknown = set(kv) - _TASK_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for k in ("task_id", "target", "goal"):
        if k not in kv:
            raise ConfigError(f"{where}: missing required key {k!r}")
    goal = kv["goal"].strip()
    goal_obj, value = "", ()
    if goal.startswith("@"):
        kind = "object"
        ref, _, off = goal[1:].partition("+")
        goal_obj = ref.strip()
        value = _floats(off, where) if off else ()
    elif goal.startswith("angle:"):
        kind = "angle"
        value = _floats(goal[6:], where)
    else:
        kind = "absolute"
        value = _floats(goal, where)
        if len(value) != 2:
            raise ConfigError(f"{where}: absolute goal needs x,y")
    return TaskSpec(int(kv["task_id"]), name, kv["target"].strip(), kind, value, goal_obj,
                    float(kv.get("eps", pipe.eps)),
                    int(kv.get("min_stable_steps", pipe.min_stable_steps)),
                    int(kv.get("horizon", pipe.horizon)))


def _read(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    return cp


def _parse_with_base(text: str, depth: int = 0) -> configparser.ConfigParser:
    """An ``[include] base = <name>`` section layers this text over a bundled config."""
    cp = _read(text)
    if not cp.has_section("include"):
        return cp
    inc = dict(cp["include"])
    if set(inc) != {"base"}:
        raise ConfigError(f"[include]: only 'base' is allowed, got {sorted(inc)}")
    if depth > 4:
        raise ConfigError("[include]: nesting too deep")
    merged = _parse_with_base(_bundled_text(inc["base"].strip()), depth + 1)
    for sec in cp.sections():
        if sec == "include":
            continue
        if not merged.has_section(sec):
            merged.add_section(sec)
        for k, v in cp[sec].items():
            merged[sec][k] = v
    return merged


def _bundled_text(name: str) -> str:
    name = name if name.endswith(".ini") else f"{name}.ini"
    try:
        return resources.files("kitchenil.configs").joinpath(name).read_text()
    except FileNotFoundError as e:
        raise ConfigError(f"config {name!r} not found") from e


def loads(text: str, overrides: dict | None = None) -> PipelineConfig:
    cp = _parse_with_base(text)
    for key, val in (overrides or {}).items():
        sec, _, k = key.partition(".") if not key.startswith(("object.", "task.")) else key.rpartition(".")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][k] = _fmt(val) if not isinstance(val, str) else val
    cfg = PipelineConfig()
    for sec in cp.sections():
        if sec in SECTIONS:
            obj = getattr(cfg, sec)
            names = {f.name for f in dataclasses.fields(obj)}
            for k, raw in cp[sec].items():
                if k not in names:
                    raise ConfigError(f"[{sec}]: unknown key {k!r}")
                val = _convert(raw, getattr(obj, k), f"[{sec}] {k}")
                allowed = CHOICES.get((sec, k))
                if allowed and val not in allowed:
                    raise ConfigError(f"[{sec}] {k}: {val!r} not in {allowed}")
                arms = ARM_CHOICES.get((sec, k))
                if arms and (not val or set(val) - set(arms)):
                    raise ConfigError(f"[{sec}] {k}: {val!r} must be a non-empty subset of {arms}")
                setattr(obj, k, val)
        elif sec.startswith("object."):
            cfg.raw_objects[sec[7:]] = dict(cp[sec])
        elif sec.startswith("task."):
            cfg.raw_tasks[sec[5:]] = dict(cp[sec])
        else:
            raise ConfigError(f"unknown config section [{sec}]")
    cfg.objects = [_parse_object(oid, kv) for oid, kv in cfg.raw_objects.items()]
    cfg.tasks = sorted((_parse_task(n, kv, cfg.pipeline) for n, kv in cfg.raw_tasks.items()),
                       key=lambda t: t.task_id)
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    if not cfg.objects:
        raise ConfigError("config defines no [object.*] sections")
    if not cfg.tasks:
        raise ConfigError("config defines no [task.*] sections")
    ids = [t.task_id for t in cfg.tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids {ids}")
    counts = cfg.layouts.study_counts
    if list(counts) != sorted(counts):
        raise ConfigError("layouts.study_counts must be ascending")
    if cfg.augment.replays_per_source < 1:
        raise ConfigError("augment.replays_per_source must be >= 1")
    if cfg.augment.action_noise < 0:
        raise ConfigError("augment.action_noise must be >= 0")
    if not 0 <= cfg.augment.inpaint_fraction <= 1:
        raise ConfigError("augment.inpaint_fraction must be in [0, 1]")
    if not (0.5 <= cfg.augment.lighting_min <= cfg.augment.lighting_max <= 1.5):
        raise ConfigError("lighting range must lie within [0.5, 1.5]")
    if max(max(counts), cfg.layouts.train_count) > cfg.layouts.heldout_id_base:
        raise ConfigError("heldout_id_base must exceed every training layout id")
    if not math.isfinite(cfg.pipeline.eps) or cfg.pipeline.eps <= 0:
        raise ConfigError("pipeline.eps must be positive")


def load(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Load a config file; ``None`` or a bare name selects a bundled config."""
    if path is None:
        path = "default"
    p = Path(path)
    if p.exists():
        text = p.read_text()
    else:
        text = _bundled_text(str(path))
    return loads(text, overrides)
