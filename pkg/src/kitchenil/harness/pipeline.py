"""Stage runners that chain collect -> augment -> compress -> train on disk.

Every output is a pure function of the resolved config and the master seed:
layouts, tapes, replays and initializations all draw from streams keyed by
those two values.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import numcore as nc
from ..augment import AccountingReport, AugmentPlan, augment_shard
from ..collect import (ExpertError, NpgBudget, evaluate_expert, filter_experts, npg_train,
                       record_tapes, rollout_record, script_expert, state_features)
from ..collect import feature_dim as state_feature_dim
from ..compress import (EncoderParams, encode_dataset, make_frozen_encoder, preprocess,
                        sample_frames, train_moco)
from ..kitchen2d import Kitchen, Layout, SimState, TaskSpec, VisualTheme
from ..policy import BcBatch, context_dim, train_bc
from .config import PipelineConfig
from .evaluate import EvalReport, PolicyBundle, evaluate_layouts, goal_embedding
from .formats import EmbeddingCache, read_cache, read_shard, write_cache, write_shard

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage name."""


def make_kitchen(cfg: PipelineConfig) -> Kitchen:
    return Kitchen(cfg.objects, cfg.pipeline.image_size, cfg.pipeline.clearance)


# ----------------------------------------------------------------- layouts
def layout_seed(master_seed: int, kind: str, layout_id: int) -> int:
    return int(nc.make_rng(master_seed, kind, layout_id).integers(0, 2 ** 31))


def train_layout(kitchen: Kitchen, master_seed: int, layout_id: int) -> Layout:
    return kitchen.sample_layout(layout_seed(master_seed, "train-layout", layout_id), layout_id)


@dataclass
class HeldoutSuite:
    layouts: list[Layout]
    theme_seed: int
    color_jitter: int = 40
    lighting: tuple[float, float] = (0.7, 1.3)
    textures: tuple[str, ...] = ("plain", "stripes", "checker", "dots")
    background_jitter: int = 30

    @property
    def layout_ids(self) -> list[int]:
        return [lay.layout_id for lay in self.layouts]

    def theme(self, kitchen: Kitchen, rng: np.random.Generator) -> VisualTheme:
        return kitchen.sample_theme(rng, self.color_jitter, self.lighting, self.textures,
                                    self.background_jitter)

    def themes(self, kitchen: Kitchen, per_layout: int = 1) -> list[list[VisualTheme]]:
        out = []
        for lay in self.layouts:
            rng = nc.make_rng(self.theme_seed, "heldout-theme", lay.layout_id)
            out.append([self.theme(kitchen, rng) for _ in range(per_layout)])
        return out


def make_heldout_suite(kitchen: Kitchen, n_layouts: int, theme_seed: int,
                       id_base: int = 10_000, cfg: PipelineConfig | None = None) -> HeldoutSuite:
    """Fresh layouts with ids from ``id_base`` upward, which training never uses."""
    if n_layouts < 1:
        raise ValueError("heldout suite needs at least one layout")
    lays = [kitchen.sample_layout(layout_seed(theme_seed, "heldout-layout", i), id_base + i)
            for i in range(n_layouts)]
    if cfg is None:
        return HeldoutSuite(lays, theme_seed)
    a = cfg.augment
    return HeldoutSuite(lays, theme_seed, a.color_jitter, (a.lighting_min, a.lighting_max),
                        tuple(a.textures), a.background_jitter)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*items)))


def shard_name(task_id: int, layout_id: int) -> str:
    return f"t{task_id:03d}_l{layout_id:05d}.cact"


# ----------------------------------------------------------------- collect
def _collect_cell(cfg_text: str, task_id: int, layout_id: int, master_seed: int, out_dir: str):
    from .config import loads

    cfg = loads(cfg_text)
    kitchen = make_kitchen(cfg)
    task = cfg.task(task_id)
    layout = train_layout(kitchen, master_seed, layout_id)
    entry = {"file": shard_name(task_id, layout_id), "task": task.name, "task_id": task_id,
             "layout_id": layout_id, "layout_seed": layout.seed, "source": "script"}
    if cfg.collect.mode == "npg" and task.name in cfg.collect.npg_tasks:
        c = cfg.collect
        budget = NpgBudget(c.npg_iterations, c.npg_episodes, c.npg_delta, c.npg_cg_iters,
                           c.npg_gamma, tuple(c.npg_hidden))
        seed = int(nc.make_rng(master_seed, "npg", task_id, layout_id).integers(0, 2 ** 31))
        policy, _ = npg_train(kitchen, task, layout, budget, seed)
        flags = evaluate_expert(kitchen, policy, task, layout, c.filter_episodes, seed + 1)
        dec = filter_experts({(task_id, layout_id): flags}, c.filter_threshold)[0]
        entry.update(source="npg", filter_successes=dec.successes, filter_episodes=dec.episodes,
                     accepted=dec.accepted)
        if not dec.accepted:
            entry["file"] = None
            return entry
        shard = rollout_record(kitchen, policy, task, layout, c.tapes_per_cell, seed + 2)
    else:
        tapes = []
        for k in range(cfg.collect.tapes_per_cell):
            seed = int(nc.make_rng(master_seed, "tape", task_id, layout_id, k).integers(0, 2 ** 31))
            try:
                tapes.append(script_expert(kitchen, task, layout, seed))
            except ExpertError as e:
                raise StageError(f"collect: {e}") from e
        shard = record_tapes(kitchen, tapes, task, layout)
    prov = json.loads(shard.provenance)
    prov["master_seed"] = master_seed
    shard.provenance = json.dumps(prov, sort_keys=True)
    write_shard(Path(out_dir) / entry["file"], shard)
    entry["tapes"] = [m.get("tape", f"npg-{m['seed']}") for m in prov["episodes"]]
    entry["successes"] = [bool(e.success) for e in shard.episodes]
    return entry


def collect_stage(cfg: PipelineConfig, layout_ids: Iterable[int], out_dir, master_seed: int,
                  tasks: Sequence[TaskSpec] | None = None, jobs: int | None = None) -> dict:
    """Write one raw shard per (task, layout) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = list(tasks or cfg.tasks)
    layout_ids = list(layout_ids)
    heldout = set(range(cfg.layouts.heldout_id_base, cfg.layouts.heldout_id_base + 2 ** 15))
    if heldout & set(layout_ids):
        raise StageError("collect: training layout ids overlap the heldout id range")
    text = cfg.to_text()
    items = [(text, t.task_id, lid, master_seed, str(out)) for t in tasks for lid in layout_ids]
    entries = _map(_collect_cell, items, jobs or cfg.pipeline.jobs)
    manifest = {"stage": "collect", "master_seed": master_seed, "layout_ids": layout_ids,
                "cells": entries, "config": text}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(dir_) -> dict:
    return json.loads((Path(dir_) / "manifest.json").read_text())


def shard_paths(dir_, layout_ids: Iterable[int] | None = None) -> list[Path]:
    m = read_manifest(dir_)
    keep = None if layout_ids is None else set(layout_ids)
    return [Path(dir_) / c["file"] for c in m["cells"]
            if c["file"] and (keep is None or c["layout_id"] in keep)]


# ----------------------------------------------------------------- augment
def _augment_cell(cfg_text: str, plan_kwargs: dict, src: str, dst: str):
    from .config import loads

    cfg = loads(cfg_text)
    kitchen = make_kitchen(cfg)
    shard = read_shard(src)
    report = AccountingReport(replays_per_source=plan_kwargs["replays_per_source"])
    out = augment_shard(kitchen, cfg.task(shard.task_id), shard, AugmentPlan(**plan_kwargs), report)
    write_shard(dst, out)
    return report


def plan_kwargs(plan: AugmentPlan) -> dict:
    from dataclasses import asdict
    return asdict(plan)


def augment_stage(cfg: PipelineConfig, in_dir, out_dir, master_seed: int,
                  plan: AugmentPlan | None = None, jobs: int | None = None) -> AccountingReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = plan or AugmentPlan.from_config(cfg.augment, master_seed)
    src_manifest = read_manifest(in_dir)
    cells = [c for c in src_manifest["cells"] if c["file"]]
    items = [(cfg.to_text(), plan_kwargs(plan), str(Path(in_dir) / c["file"]), str(out / c["file"]))
             for c in cells]
    reports = _map(_augment_cell, items, jobs or cfg.pipeline.jobs)
    total = AccountingReport(replays_per_source=plan.replays_per_source)
    for r in reports:
        total.episodes_in += r.episodes_in
        total.episodes_out += r.episodes_out
        for k, v in r.counts.items():
            total.counts[k] += v
    manifest = {"stage": "augment", "master_seed": master_seed, "plan": plan_kwargs(plan),
                "layout_ids": src_manifest["layout_ids"], "cells": cells,
                "accounting": dict(total.rows()), "config": cfg.to_text()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    (out / "accounting.csv").write_text(total.to_csv())
    return total


# ---------------------------------------------------------------- compress
def save_encoder(path, enc: EncoderParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"tag": enc.tag, "normalize": enc.normalize, "n": len(enc.arrays()),
                       "fingerprint": enc.fingerprint.hex()})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(meta.encode(), np.uint8),
                 **{f"w{i}": a for i, a in enumerate(enc.arrays())})


def load_encoder(path) -> EncoderParams:
    z = np.load(Path(path))
    meta = json.loads(z["meta"].tobytes().decode())
    body = nc.MlpParams.from_arrays([z[f"w{i}"] for i in range(meta["n"])], "relu")
    enc = EncoderParams(body, meta["tag"], meta["normalize"])
    if enc.fingerprint.hex() != meta["fingerprint"]:
        raise ValueError(f"{path}: encoder weights do not match the stored fingerprint")
    return enc


def build_encoder(cfg: PipelineConfig, kind: str, paths: Sequence[Path], master_seed: int,
                  raw_paths: Sequence[Path] | None = None) -> EncoderParams:
    e = cfg.encoder
    seed = int(nc.make_rng(master_seed, "encoder", e.seed).integers(0, 2 ** 31))
    if kind == "random":
        return make_frozen_encoder(seed, e.dim, e.hidden)
    if kind == "moco":
        src = raw_paths if (e.moco_frames == "raw" and raw_paths) else paths
        n_frames = max(e.moco_batch * 32, 2048)
        frames = sample_frames((read_shard(p) for p in src), n_frames, seed, len(src))
        enc, _ = train_moco(frames, e.moco_steps, e.moco_batch, seed, e.dim, e.hidden,
                            e.moco_queue, e.moco_temperature, e.moco_momentum, e.moco_lr,
                            jitter=e.moco_jitter, shift=e.moco_shift)
        return enc
    raise StageError(f"compress: unknown encoder kind {kind!r}")


def compress_stage(cfg: PipelineConfig, in_dir, out_dir, master_seed: int, kind: str | None = None,
                   layout_ids: Iterable[int] | None = None) -> tuple[EncoderParams, EmbeddingCache]:
    kind = kind or cfg.encoder.kind
    paths = shard_paths(in_dir, layout_ids)
    enc = build_encoder(cfg, kind, paths, master_seed)
    cache = encode_dataset(enc, (read_shard(p) for p in paths))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cache(out / f"{kind}.cemb", cache)
    save_encoder(out / f"{kind}.npz", enc)
    return enc, cache


# ------------------------------------------------------------------- train
@dataclass
class Dataset:
    batch: BcBatch
    frames: np.ndarray | None
    per_task: dict = field(default_factory=dict)
    tape_ids: list = field(default_factory=list)


def obs_dim(cfg: PipelineConfig, kitchen: Kitchen) -> int:
    return state_feature_dim(kitchen) if cfg.train.input == "state" else cfg.encoder.dim


def goal_dim(cfg: PipelineConfig, kitchen: Kitchen) -> int:
    mode = cfg.train.task_embedding
    if mode == "context":
        return context_dim(len(cfg.tasks), kitchen.n_objects)
    if mode == "hashed_name":
        return cfg.train.hashed_dim
    return cfg.encoder.dim


def build_dataset(cfg: PipelineConfig, kitchen: Kitchen, paths: Sequence[Path],
                  cache: EmbeddingCache | None, encoder: EncoderParams | None,
                  keep_frames: bool = False, tasks: Sequence[TaskSpec] | None = None) -> Dataset:
    """Assemble (z_t, z_g, proprio, action) rows from successful episodes.

    Every task in ``tasks`` (default: all configured tasks) must contribute.
    """
    zt, zg, pr, ac, fr = [], [], [], [], []
    per_task = {t.name: 0 for t in (tasks or cfg.tasks)}
    tape_ids = []
    horizon = cfg.pipeline.horizon
    for path in paths:
        shard = read_shard(path)
        task = cfg.task(shard.task_id)
        metas = json.loads(shard.provenance).get("episodes", [])
        for e, ep in enumerate(shard.episodes):
            if len(ep) == 0 or (cfg.train.filter_success and not ep.success):
                continue
            s0 = SimState.from_vector(ep.states[0])
            goal = kitchen.goal(task, Layout(shard.layout_id, -1, s0.poses))
            if cfg.train.input == "state":
                z = np.stack([state_features(kitchen, SimState.from_vector(v), goal, horizon)
                              for v in ep.states])
            else:
                z = cache.episode(shard.shard_id, e)
            g = goal_embedding(cfg.train.task_embedding, kitchen, cfg.tasks, task, s0, goal,
                               cfg.train.hashed_dim, encoder, ep.images[-1])
            zt.append(z.astype(np.float32))
            zg.append(np.repeat(g[None].astype(np.float32), len(ep), 0))
            pr.append(ep.proprio)
            ac.append(ep.actions)
            if keep_frames:
                fr.append(preprocess(ep.images))
            per_task[task.name] = per_task.get(task.name, 0) + len(ep)
            if e < len(metas):
                tape_ids.append(metas[e].get("tape"))
    empty = [k for k, v in per_task.items() if v == 0]
    if empty:
        raise StageError(f"train: no successful episodes for tasks {empty}")
    batch = BcBatch(np.concatenate(zt), np.concatenate(zg), np.concatenate(pr), np.concatenate(ac))
    return Dataset(batch, np.concatenate(fr) if keep_frames else None, per_task,
                   sorted(set(tape_ids)))


def train_stage(cfg: PipelineConfig, kitchen: Kitchen, paths: Sequence[Path],
                cache: EmbeddingCache | None, encoder: EncoderParams | None, master_seed: int,
                train_layouts: Sequence[int], tasks: Sequence[TaskSpec] | None = None
                ) -> PolicyBundle:
    t = cfg.train
    if cfg.train.input == "visual":
        if encoder is None or cache is None:
            raise StageError("train: visual input needs an encoder and an embedding cache")
        try:
            cache.check(encoder.fingerprint)
        except ValueError as e:
            raise StageError(f"train: {e}") from e
    finetune = t.mode == "finetune" and t.input == "visual"
    data = build_dataset(cfg, kitchen, paths, cache, encoder, keep_frames=finetune, tasks=tasks)
    seed = int(nc.make_rng(master_seed, "bc").integers(0, 2 ** 31))
    enc_train = encoder.copy("finetuned") if finetune else None
    params, curves, enc_out = train_bc(
        data.batch, obs_dim(cfg, kitchen), goal_dim(cfg, kitchen), t.hidden, t.epochs,
        t.batch_size, t.lr, t.loss, t.sigma_init, seed, enc_train, data.frames, t.encoder_lr,
        activation=t.activation)
    final_enc = enc_out if finetune else encoder
    fp = final_enc.fingerprint if final_enc is not None else b"\0" * 32
    return PolicyBundle(params, final_enc, fp, t.task_embedding, t.input, list(train_layouts),
                        cfg.to_text(), master_seed, curves.loss)


# -------------------------------------------------------------------- eval
def evaluate(policy, split: str, episodes_per_cell: int | None = None,
             horizon: int | None = None, seed: int = 0, shuffle: bool | None = None,
             tasks: Sequence[TaskSpec] | None = None) -> EvalReport:
    """Evaluate a policy file (or loaded bundle) on its train layouts or a heldout suite."""
    bundle = policy if isinstance(policy, PolicyBundle) else PolicyBundle.load(policy)
    cfg = bundle.config
    kitchen = make_kitchen(cfg)
    n_ep = episodes_per_cell or cfg.eval.episodes_per_cell
    horizon = horizon or cfg.pipeline.horizon
    shuffle = cfg.eval.shuffle_distractors if shuffle is None else shuffle
    tasks = list(tasks or cfg.tasks)
    if split == "train":
        layouts = [train_layout(kitchen, bundle.master_seed, i) for i in bundle.train_layouts]
        return evaluate_layouts(kitchen, bundle, tasks, layouts, split, n_ep, horizon, seed,
                                resample_themes=False, shuffle=shuffle,
                                deterministic=cfg.eval.deterministic)
    if split == "heldout":
        suite = make_heldout_suite(kitchen, cfg.layouts.heldout_count, bundle.master_seed,
                                   cfg.layouts.heldout_id_base, cfg)
        clash = set(suite.layout_ids) & set(bundle.train_layouts)
        if clash:
            raise StageError(f"eval: heldout layouts {sorted(clash)} were used in training")
        return evaluate_layouts(kitchen, bundle, tasks, suite.layouts, split, n_ep, horizon, seed,
                                resample_themes=True, shuffle=shuffle,
                                theme_sampler=lambda rng: suite.theme(kitchen, rng),
                                deterministic=cfg.eval.deterministic)
    raise ValueError(f"unknown split {split!r}; expected train or heldout")


# --------------------------------------------------------------- full run
@dataclass
class RunResult:
    root: Path
    bundle: PolicyBundle
    reports: dict[str, EvalReport]
    accounting: AccountingReport


def run_pipeline(cfg: PipelineConfig, root, splits: Sequence[str] = ("train", "heldout"),
                 layout_ids: Sequence[int] | None = None) -> RunResult:
    """Collect -> Augment -> Compress -> Train -> Evaluate under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(cfg.to_text())
    seed = cfg.pipeline.master_seed
    layout_ids = list(layout_ids if layout_ids is not None else range(cfg.layouts.train_count))
    kitchen = make_kitchen(cfg)
    log.info("collect: %d tasks x %d layouts", len(cfg.tasks), len(layout_ids))
    collect_stage(cfg, layout_ids, root / "raw", seed)
    log.info("augment")
    acc = augment_stage(cfg, root / "raw", root / "aug", seed)
    enc = cache = None
    if cfg.train.input == "visual":
        log.info("compress: %s encoder", cfg.encoder.kind)
        enc, cache = compress_stage(cfg, root / "aug", root / "cache", seed)
    log.info("train: %s", cfg.train.mode)
    bundle = train_stage(cfg, kitchen, shard_paths(root / "aug"), cache, enc, seed, layout_ids)
    bundle.save(root / "policy.npz")
    reports = {}
    rep_dir = root / "reports"
    rep_dir.mkdir(exist_ok=True)
    for split in splits:
        reports[split] = evaluate(bundle, split, seed=seed)
        (rep_dir / f"eval_{split}.csv").write_text(reports[split].to_csv())
    return RunResult(root, bundle, reports, acc)


def load_cache_for(dir_, kind: str) -> tuple[EncoderParams, EmbeddingCache]:
    enc = load_encoder(Path(dir_) / f"{kind}.npz")
    return enc, read_cache(Path(dir_) / f"{kind}.cemb", enc.fingerprint)
