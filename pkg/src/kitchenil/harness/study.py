"""Layout-scaling study and the augmentation x representation ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..augment import AugmentPlan
from ..compress import encode_dataset
from .config import PipelineConfig
from .evaluate import mean_stderr
from .formats import read_shard
from .pipeline import (StageError, augment_stage, build_encoder, collect_stage, evaluate,
                       make_kitchen, read_manifest, shard_paths, train_stage)

log = logging.getLogger(__name__)


def seed_master(cfg: PipelineConfig, seed_index: int) -> int:
    return cfg.pipeline.master_seed + seed_index


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        raise StageError(f"{name}: {type(e).__name__}: {e}") from e


def _prepare_data(cfg: PipelineConfig, root: Path, layout_ids: Sequence[int], master: int,
                  plans: dict[str, AugmentPlan]) -> dict[str, Path]:
    """Raw shards once, then one augmented directory per named plan."""
    raw = root / "raw"
    if not (raw / "manifest.json").exists():
        _stage("collect", collect_stage, cfg, layout_ids, raw, master)
    dirs = {}
    for name, plan in plans.items():
        d = root / f"aug_{name}"
        if not (d / "manifest.json").exists():
            _stage("augment", augment_stage, cfg, raw, d, master, plan)
        dirs[name] = d
    return dirs


def _encode(cfg, kind, paths, master):
    enc = _stage("compress", build_encoder, cfg, kind, paths, master)
    cache = _stage("compress", encode_dataset, enc, (read_shard(p) for p in paths))
    return enc, cache


# ------------------------------------------------------------------ scaling
@dataclass
class TrendRow:
    arm: str
    count: int
    seed: int
    train: float
    heldout: float
    seconds: float = 0.0


@dataclass
class TrendTable:
    rows: list[TrendRow] = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        for arm in dict.fromkeys(r.arm for r in self.rows):
            for c in sorted({r.count for r in self.rows if r.arm == arm}):
                rs = [r for r in self.rows if r.arm == arm and r.count == c]
                tm, ts = mean_stderr([r.train for r in rs])
                hm, hs = mean_stderr([r.heldout for r in rs])
                out.append({"arm": arm, "layouts": c, "seeds": len(rs), "train_mean": tm,
                            "train_stderr": ts, "heldout_mean": hm, "heldout_stderr": hs})
        return out

    def heldout_means(self, arm: str) -> dict[int, float]:
        return {s["layouts"]: s["heldout_mean"] for s in self.summary() if s["arm"] == arm}

    def train_means(self, arm: str) -> dict[int, float]:
        return {s["layouts"]: s["train_mean"] for s in self.summary() if s["arm"] == arm}

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["arm", "layouts", "seeds", "train_mean", "train_stderr", "heldout_mean",
                "heldout_stderr"]
        w = csv.DictWriter(buf, keys, lineterminator="\n")
        w.writeheader()
        for s in self.summary():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in s.items()})
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "layouts", "seed", "train", "heldout"])
        for r in self.rows:
            w.writerow([r.arm, r.count, r.seed, f"{r.train:.6f}", f"{r.heldout:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'arm':<8}{'layouts':>8}{'train':>18}{'heldout':>18}"]
        for s in self.summary():
            lines.append(f"{s['arm']:<8}{s['layouts']:>8}"
                         f"{100 * s['train_mean']:>10.1f} +/- {100 * s['train_stderr']:<4.1f}"
                         f"{100 * s['heldout_mean']:>10.1f} +/- {100 * s['heldout_stderr']:<4.1f}")
        return "\n".join(lines)

    @classmethod
    def from_runs_csv(cls, text: str) -> "TrendTable":
        rows = [TrendRow(r["arm"], int(r["layouts"]), int(r["seed"]), float(r["train"]),
                         float(r["heldout"])) for r in csv.DictReader(io.StringIO(text))]
        return cls(rows)


def run_scaling_study(cfg: PipelineConfig, layout_counts: Sequence[int], seeds: int, root,
                      arms: Sequence[str] | None = None) -> TrendTable:
    """Train and evaluate one policy per (arm, layout count, seed).

    Layout ids are nested (count c uses ids 0..c-1), so raw and augmented
    shards are produced once per seed at the largest count and subset.
    """
    counts = list(layout_counts)
    if counts != sorted(counts) or not counts:
        raise ValueError("layout counts must be non-empty and ascending")
    arms = list(arms or cfg.study.scaling_arms)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(cfg.to_text())
    kitchen = make_kitchen(cfg)
    table = TrendTable()
    for s in range(seeds):
        master = seed_master(cfg, s)
        sroot = root / f"seed{s}"
        log.info("study seed %d (master seed %d)", s, master)
        plan = AugmentPlan.from_config(cfg.augment, master)
        aug = _prepare_data(cfg, sroot, range(counts[-1]), master, {"default": plan})["default"]
        random_cache = None
        for arm in arms:
            arm_cfg = cfg.replace(**{"train.input": "state" if arm == "state" else "visual",
                                     "train.mode": "frozen"})
            for c in counts:
                t0 = time.time()
                paths = shard_paths(aug, range(c))
                enc = cache = None
                if arm == "random":
                    if random_cache is None:
                        random_cache = _encode(arm_cfg, "random", shard_paths(aug), master)
                    enc, cache = random_cache
                elif arm == "moco":
                    enc, cache = _encode(arm_cfg, "moco", paths, master)
                bundle = _stage("train", train_stage, arm_cfg, kitchen, paths, cache, enc, master,
                                list(range(c)))
                out = sroot / arm / f"layouts{c}"
                bundle.save(out / "policy.npz")
                reps = {}
                for split in ("train", "heldout"):
                    reps[split] = _stage("eval", evaluate, bundle, split, seed=master)
                    (out / f"eval_{split}.csv").write_text(reps[split].to_csv())
                row = TrendRow(arm, c, s, reps["train"].overall()[0], reps["heldout"].overall()[0],
                               time.time() - t0)
                table.rows.append(row)
                log.info("seed %d arm %s layouts %d: train %.3f heldout %.3f (%.0fs)",
                         s, arm, c, row.train, row.heldout, row.seconds)
    (root / "trend.csv").write_text(table.to_csv())
    (root / "trend_runs.csv").write_text(table.runs_csv())
    (root / "trend.txt").write_text(table.to_text() + "\n")
    return table


# ---------------------------------------------------------------- ablation
@dataclass
class AblationRow:
    seed: int
    augmentation: str
    representation: str
    train: float
    shuffled: float
    encoder_tag: str = ""


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)
    tape_manifests: dict = field(default_factory=dict)

    def cell(self, augmentation: str, representation: str, metric: str = "shuffled"):
        return mean_stderr([getattr(r, metric) for r in self.rows
                            if r.augmentation == augmentation and r.representation == representation])

    def representations(self) -> list[str]:
        return list(dict.fromkeys(r.representation for r in self.rows))

    def augmentation_gap(self, metric: str = "shuffled") -> float:
        """Mean over representations of (aug - no-aug)."""
        reps = self.representations()
        gaps = [self.cell("aug", rep, metric)[0] - self.cell("noaug", rep, metric)[0] for rep in reps]
        return sum(gaps) / len(gaps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["augmentation", "representation", "seeds", "train_mean", "train_stderr",
                    "shuffled_mean", "shuffled_stderr"])
        for aug in ("aug", "noaug"):
            for rep in self.representations():
                n = sum(1 for r in self.rows if r.augmentation == aug and r.representation == rep)
                tm, ts = self.cell(aug, rep, "train")
                sm, ss = self.cell(aug, rep, "shuffled")
                w.writerow([aug, rep, n, f"{tm:.6f}", f"{ts:.6f}", f"{sm:.6f}", f"{ss:.6f}"])
        for rep in self.representations():
            gap = self.cell("aug", rep)[0] - self.cell("noaug", rep)[0]
            w.writerow(["gap", rep, "", "", "", f"{gap:.6f}", ""])
        w.writerow(["gap", "mean", "", "", "", f"{self.augmentation_gap():.6f}", ""])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "augmentation", "representation", "train", "shuffled", "encoder"])
        for r in self.rows:
            w.writerow([r.seed, r.augmentation, r.representation, f"{r.train:.6f}",
                        f"{r.shuffled:.6f}", r.encoder_tag])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'augment':<8}{'represent':<10}{'train':>16}{'shuffled':>18}"]
        for aug in ("aug", "noaug"):
            for rep in self.representations():
                tm, ts = self.cell(aug, rep, "train")
                sm, ss = self.cell(aug, rep, "shuffled")
                lines.append(f"{aug:<8}{rep:<10}{100 * tm:>8.1f} +/- {100 * ts:<4.1f}"
                             f"{100 * sm:>10.1f} +/- {100 * ss:<4.1f}")
        lines.append(f"mean aug - noaug gap (shuffled): {100 * self.augmentation_gap():+.1f} points")
        return "\n".join(lines)


def tape_manifest(aug_dir) -> list[str]:
    """Sorted source tape ids consumed by an augmented directory."""
    ids = set()
    for p in shard_paths(aug_dir):
        prov = json.loads(read_shard(p).provenance)
        ids.update(m["tape"] for m in prov["episodes"])
    return sorted(ids)


def run_ablations(cfg: PipelineConfig, seeds: int, root,
                  representations: Sequence[str] | None = None) -> AblationTable:
    """{aug, noaug} x representations, evaluated with distractors re-shuffled.

    Both augmentation arms replay the same raw tapes; the no-aug arm gets
    pixel jitter and crop shifts only (no themes, shuffles, noise or in-paint).
    """
    reps = list(representations or cfg.study.ablation_representations)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = cfg.replace(**{"train.task_embedding": cfg.study.ablation_embedding,
                          "train.input": "visual"})
    (root / "config.ini").write_text(base.to_text())
    kitchen = make_kitchen(base)
    layout_ids = list(range(cfg.study.ablation_layouts))
    table = AblationTable()
    for s in range(seeds):
        master = seed_master(cfg, s)
        sroot = root / f"seed{s}"
        aug_plan = AugmentPlan.from_config(cfg.augment, master)
        noaug_plan = AugmentPlan(**{**aug_plan.__dict__, "pixel_only": True})
        dirs = _prepare_data(base, sroot, layout_ids, master, {"aug": aug_plan, "noaug": noaug_plan})
        manifests = {k: tape_manifest(d) for k, d in dirs.items()}
        if manifests["aug"] != manifests["noaug"]:
            raise StageError("ablate: augmentation arms consumed different tape sets")
        table.tape_manifests[s] = manifests
        (sroot / "tapes.json").write_text(json.dumps(manifests, indent=1))
        for arm, d in dirs.items():
            paths = shard_paths(d)
            for rep in reps:
                kind = "moco" if rep == "moco" else "random"
                rcfg = base.replace(**{"train.mode": "finetune" if rep == "finetune" else "frozen"})
                enc, cache = _encode(rcfg, kind, paths, master)
                bundle = _stage("train", train_stage, rcfg, kitchen, paths, cache, enc, master,
                                layout_ids)
                out = sroot / arm / rep
                bundle.save(out / "policy.npz")
                tr = _stage("eval", evaluate, bundle, "train", seed=master, shuffle=False)
                sh = _stage("eval", evaluate, bundle, "train", seed=master + 7919, shuffle=True)
                (out / "eval_train.csv").write_text(tr.to_csv())
                (out / "eval_shuffled.csv").write_text(sh.to_csv())
                row = AblationRow(s, arm, rep, tr.overall()[0], sh.overall()[0],
                                  bundle.encoder.tag if bundle.encoder else "")
                table.rows.append(row)
                log.info("ablate seed %d %s/%s: train %.3f shuffled %.3f", s, arm, rep,
                         row.train, row.shuffled)
    (root / "ablation.csv").write_text(table.to_csv())
    (root / "ablation_runs.csv").write_text(table.runs_csv())
    (root / "ablation.txt").write_text(table.to_text() + "\n")
    return table
