"""Command-line entry point: ``kitchenil <subcommand> [options]``.

Outputs default to ``$KITCHENIL_OUT`` (or ``./runs``) when ``--out`` is not
given. Every subcommand logs the resolved config and master seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..numcore import ConfigError

log = logging.getLogger("kitchenil")

OUT_ENV = "KITCHENIL_OUT"


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def parse_ids(text: str) -> list[int]:
    """``"0-4,7"`` -> ``[0, 1, 2, 3, 4, 7]``."""
    ids = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            ids.extend(range(int(lo), int(hi) + 1))
        else:
            ids.append(int(part))
    return ids


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="config path or bundled name")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--jobs", type=int, help="worker processes within a stage")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kitchenil", description="2D kitchen imitation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="record expert shards")
    c.add_argument("--tasks", help="comma-separated task names (default: all)")
    c.add_argument("--layouts", default=None, help="layout ids, e.g. 0-9")
    c.add_argument("--mode", choices=["script", "npg"])
    c.add_argument("--out", type=Path)

    a = sub.add_parser("augment", parents=[common], help="multiply raw shards")
    a.add_argument("--in", dest="inp", type=Path, required=True)
    a.add_argument("--plan", help="config whose [augment] section defines the plan")
    a.add_argument("--pixel-only", action="store_true", help="pixel jitter + crop only")
    a.add_argument("--out", type=Path)

    m = sub.add_parser("compress", parents=[common], help="train/build an encoder and cache")
    m.add_argument("--mode", choices=["moco", "frozen"], default="frozen")
    m.add_argument("--in", dest="inp", type=Path, required=True)
    m.add_argument("--out", type=Path, help="cache file path (.cemb)")

    t = sub.add_parser("train", parents=[common], help="behavior cloning")
    t.add_argument("--cache", type=Path)
    t.add_argument("--shards", type=Path, required=True)
    t.add_argument("--mode", choices=["frozen", "finetune"])
    t.add_argument("--encoder", choices=["moco", "random"])
    t.add_argument("--input", choices=["visual", "state"])
    t.add_argument("--out", type=Path)

    e = sub.add_parser("eval", parents=[common], help="closed-loop evaluation")
    e.add_argument("--policy", type=Path, required=True)
    e.add_argument("--split", choices=["train", "heldout"], default="heldout")
    e.add_argument("--episodes", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--shuffle-distractors", action="store_true")
    e.add_argument("--tasks", help="comma-separated task names (default: all)")
    e.add_argument("--out", type=Path, help="CSV path")

    s = sub.add_parser("study", parents=[common], help="layout-scaling study")
    s.add_argument("--layout-counts", help="e.g. 2,5,10")
    s.add_argument("--seeds", type=int)
    s.add_argument("--arms", help="comma-separated subset of state,random,moco")
    s.add_argument("--out", type=Path)

    b = sub.add_parser("ablate", parents=[common], help="augmentation x representation")
    b.add_argument("--seeds", type=int)
    b.add_argument("--out", type=Path)

    r = sub.add_parser("run", parents=[common], help="all four stages plus evaluation")
    r.add_argument("--out", type=Path)

    i = sub.add_parser("inspect", help="print shard, cache or policy headers")
    i.add_argument("paths", nargs="+", type=Path)
    i.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    from .config import load

    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["pipeline.master_seed"] = str(args.seed)
    if args.jobs is not None:
        overrides["pipeline.jobs"] = str(args.jobs)
    cfg = load(args.config, overrides)
    log.info("master seed %d", cfg.pipeline.master_seed)
    log.info("resolved config:\n%s", cfg.to_text())
    return cfg


def _inspect(paths) -> int:
    from .formats import FormatError, read_cache_header, read_shard_header

    code = 0
    for p in paths:
        try:
            with open(p, "rb") as fh:
                magic = fh.read(4)
            if magic == b"CACT":
                hdr = read_shard_header(p)
            elif magic == b"CEMB":
                hdr = read_cache_header(p)
            elif magic[:2] == b"PK":
                from .evaluate import PolicyBundle
                b = PolicyBundle.load(p)
                hdr = {"kind": "policy", "input": b.input_kind, "task_embedding": b.task_embedding,
                       "obs_dim": b.params.obs_dim, "goal_dim": b.params.goal_dim,
                       "encoder": b.encoder.tag if b.encoder else None,
                       "encoder_fingerprint": b.encoder_fingerprint.hex(),
                       "train_layouts": b.train_layouts, "master_seed": b.master_seed}
            else:
                raise FormatError(f"{p}: unrecognized magic {magic!r} at offset 0")
        except (OSError, FormatError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            code = 1
            continue
        print(f"== {p}")
        for k, v in hdr.items():
            if isinstance(v, bytes):
                v = v.decode(errors="replace")
            print(f"{k}: {v}")
    return code


def _run(args) -> int:
    from . import pipeline as P
    from . import study as S
    from ..augment import AugmentPlan

    if args.command == "inspect":
        return _inspect(args.paths)
    cfg = _config(args)
    seed = cfg.pipeline.master_seed
    root = out_root()

    if args.command == "collect":
        overrides = {}
        if args.mode:
            overrides["collect.mode"] = args.mode
        cfg = cfg.replace(**overrides) if overrides else cfg
        tasks = [cfg.task(n.strip()) for n in args.tasks.split(",")] if args.tasks else None
        ids = parse_ids(args.layouts) if args.layouts else list(range(cfg.layouts.train_count))
        out = args.out or root / "raw"
        m = P.collect_stage(cfg, ids, out, seed, tasks)
        rejected = [c for c in m["cells"] if c["file"] is None]
        print(f"wrote {len(m['cells']) - len(rejected)} shards to {out}"
              + (f" ({len(rejected)} experts rejected by the filter)" if rejected else ""))
        return 0

    if args.command == "augment":
        if args.plan:
            from .config import load
            cfg = cfg.replace(**{f"augment.{k}": v for k, v in
                                 vars(load(args.plan).augment).items()})
        plan = AugmentPlan.from_config(cfg.augment, seed)
        if args.pixel_only:
            plan = AugmentPlan(**{**plan.__dict__, "pixel_only": True})
        out = args.out or root / "aug"
        report = P.augment_stage(cfg, args.inp, out, seed, plan)
        print(report.to_text())
        return 0 if report.consistent else 1

    if args.command == "compress":
        kind = "moco" if args.mode == "moco" else "random"
        paths = P.shard_paths(args.inp)
        enc = P.build_encoder(cfg, kind, paths, seed)
        from ..compress import encode_dataset
        from .formats import read_shard, write_cache
        cache = encode_dataset(enc, (read_shard(p) for p in paths))
        out = args.out or root / "cache" / f"{kind}.cemb"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_cache(out, cache)
        P.save_encoder(out.with_suffix(".npz"), enc)
        print(f"{len(cache)} embeddings -> {out} (encoder {enc.tag}, "
              f"fingerprint {enc.fingerprint.hex()[:16]})")
        return 0

    if args.command == "train":
        overrides = {}
        if args.mode:
            overrides["train.mode"] = args.mode
        if args.input:
            overrides["train.input"] = args.input
        if args.encoder:
            overrides["encoder.kind"] = args.encoder
        cfg = cfg.replace(**overrides) if overrides else cfg
        enc = cache = None
        if cfg.train.input == "visual":
            if args.cache is None:
                raise ConfigError("train: --cache is required for visual input")
            enc = P.load_encoder(args.cache.with_suffix(".npz"))
            from .formats import read_cache
            cache = read_cache(args.cache, enc.fingerprint)
        manifest = P.read_manifest(args.shards)
        kitchen = P.make_kitchen(cfg)
        present = {c["task_id"] for c in manifest["cells"] if c["file"]}
        tasks = [t for t in cfg.tasks if t.task_id in present]
        bundle = P.train_stage(cfg, kitchen, P.shard_paths(args.shards), cache, enc, seed,
                               manifest["layout_ids"], tasks)
        out = args.out or root / "policy.npz"
        bundle.save(out)
        print(f"policy -> {out} (final loss {bundle.curves[-1]:.5f})")
        return 0

    if args.command == "eval":
        tasks = [cfg.task(n.strip()) for n in args.tasks.split(",")] if args.tasks else None
        rep = P.evaluate(args.policy, args.split, args.episodes, args.horizon, seed,
                         shuffle=True if args.shuffle_distractors else None, tasks=tasks)
        text = rep.to_csv()
        if args.out:
            args.out.parent.mkdir(parents=True, exist_ok=True)
            args.out.write_text(text)
        m, se = rep.overall()
        print(f"{args.split}: {100 * m:.1f} +/- {100 * se:.1f} % success")
        for name, (tm, ts) in rep.by_task().items():
            print(f"  {name:<16}{100 * tm:6.1f} +/- {100 * ts:.1f}")
        return 0

    if args.command == "study":
        counts = parse_ids(args.layout_counts) if args.layout_counts else list(cfg.layouts.study_counts)
        seeds = args.seeds or cfg.layouts.seeds
        arms = args.arms.split(",") if args.arms else None
        out = args.out or root / "study"
        table = S.run_scaling_study(cfg, counts, seeds, out, arms)
        print(table.to_text())
        print(f"trend CSV -> {out / 'trend.csv'}")
        return 0

    if args.command == "ablate":
        out = args.out or root / "ablation"
        table = S.run_ablations(cfg, args.seeds or cfg.layouts.seeds, out)
        print(table.to_text())
        print(f"ablation CSV -> {out / 'ablation.csv'}")
        return 0

    if args.command == "run":
        res = P.run_pipeline(cfg, args.out or root / "run")
        for split, rep in res.reports.items():
            m, se = rep.overall()
            print(f"{split}: {100 * m:.1f} +/- {100 * se:.1f} % success")
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
