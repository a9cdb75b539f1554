"""Command-line entry point: ``tocoad <subcommand> --config run.ini --out runs/x``.

Every config key can be overridden with ``--set section.key=value``; the most
common ablation axes also have their own flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .data import ConfigError, ImageSample, preprocess, read_image
from .fixture import make_fixture
from .memory_bank import load_bank, score_image
from .metrics import results_table, write_results_csv
from .pipeline import Run, RunConfig, apply_overrides, desk_config, dump_config, load_config, run_full

log = logging.getLogger("tocoad")


def _overrides(pairs: List[str]) -> Dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = _overrides(args.set)
    if args.seed is not None:
        over["run.seed"] = str(args.seed)
    # dedicated flags, only where present on the subcommand
    flags = {
        "generator": "generator.kind",
        "lam": "ncl.lam",
        "levels": "ncl.levels",
        "neg_loss": "ncl.neg_loss",
        "epochs1": "stage1.epochs",
        "epochs2": "stage2.epochs",
        "ratio": "bank.ratio",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            over[key] = str(value)
    return apply_overrides(cfg, over).validate()


def _categories(args, cfg: RunConfig) -> List[str]:
    return [args.category] if getattr(args, "category", None) else list(cfg.data.categories)


def cmd_make_fixture(args) -> int:
    root = Path(args.root)
    tex = make_fixture(root, seed=args.seed or 0)
    # paths are stored as given, i.e. relative to the current directory
    cfg = desk_config(root.as_posix(), tex.as_posix(), seed=args.seed or 0)
    (root / "desk.ini").write_text(dump_config(cfg))
    print(root / "desk.ini")
    return 0


def cmd_synth(args) -> int:
    run = Run(build_config(args), args.out, resume=True)
    for cat in _categories(args, run.cfg):
        for p in run.synth(cat, args.n):
            print(p)
    return 0


def cmd_stage1(args) -> int:
    run = Run(build_config(args), args.out, resume=not args.force)
    for cat in _categories(args, run.cfg):
        print(run.stage1(cat))
    return 0


def cmd_stage2(args) -> int:
    run = Run(build_config(args), args.out, resume=not args.force)
    for cat in _categories(args, run.cfg):
        if run.cfg.stages.dnp and not (run.cat_dir(cat) / "stage1.pt").exists():
            raise FileNotFoundError(f"{cat}: stage 1 checkpoint missing; run train-stage1 first")
        print(run.stage2(cat))
    return 0


def cmd_bank(args) -> int:
    run = Run(build_config(args), args.out, resume=not args.force)
    for cat in _categories(args, run.cfg):
        print(run.build_bank(cat))
    return 0


def cmd_infer(args) -> int:
    run = Run(build_config(args), args.out)
    for cat in _categories(args, run.cfg):
        run.infer(cat, heatmaps=args.heatmaps)
        print(run.cat_dir(cat) / "scores.csv")
    return 0


def cmd_eval(args) -> int:
    run = Run(build_config(args), args.out)
    results = [run.evaluate(cat, heatmaps=args.heatmaps) for cat in _categories(args, run.cfg)]
    write_results_csv(run.out / "metrics.csv", results)
    table = results_table(results)
    (run.out / "results.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_score(args) -> int:
    cfg = build_config(args)
    run = Run(cfg, args.out)
    cat = _categories(args, cfg)[0]
    bank = load_bank(run.cat_dir(cat) / "bank.tcb")
    extractor = run.extractor(cat)
    rows = []
    for path in args.images:
        sample = preprocess(ImageSample(read_image(path), path=str(path)), cfg.data.resize, cfg.data.crop)
        sm = score_image(sample, bank, extractor, cfg.scoring, cfg.backbone.patch_levels,
                         cfg.backbone.neighborhood)
        rows.append({"path": str(path), "image_score": sm.image_score})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for r in rows:
            print(f"{r['image_score']:.6f}\t{r['path']}")
    return 0


def cmd_run_full(args) -> int:
    cfg = build_config(args)
    if args.category:
        cfg.data.categories = (args.category,)
    manifest = run_full(cfg, args.out, resume=not args.force, heatmaps=args.heatmaps)
    print((Path(args.out) / "results.txt").read_text(), end="")
    return 0 if manifest.entries.get("status") == "complete" else 1


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tocoad", description="Two-stage contrastive anomaly detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="INI config file (defaults apply otherwise)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. ncl.lam=0.3 (repeatable)")
        s.add_argument("--out", required=True, help="run output directory")
        s.add_argument("--category", help="restrict to one category")
        s.add_argument("--seed", type=int)
        s.set_defaults(fn=fn)
        return s

    f = sub.add_parser("make-fixture", help="write the procedural desk-scale dataset and its config")
    f.add_argument("root")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(fn=cmd_make_fixture)

    s = stage("synth", cmd_synth, "write a few synthetic anomalies for inspection")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--generator", choices=("perlin", "cutpaste", "nsa"))

    s = stage("train-stage1", cmd_stage1, "train the discriminative network")
    s.add_argument("--generator", choices=("perlin", "cutpaste", "nsa"))
    s.add_argument("--epochs", dest="epochs1", type=int)
    s.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")

    s = stage("train-stage2", cmd_stage2, "contrastive fine-tuning of the feature extractor")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--levels", help="comma-separated backbone levels, e.g. 3,4")
    s.add_argument("--neg-loss", dest="neg_loss", choices=("focal", "cross_entropy"))
    s.add_argument("--generator", choices=("perlin", "cutpaste", "nsa"))
    s.add_argument("--epochs", dest="epochs2", type=int)
    s.add_argument("--force", action="store_true")

    s = stage("build-bank", cmd_bank, "build the coreset memory bank")
    s.add_argument("--ratio", type=float)
    s.add_argument("--force", action="store_true")

    s = stage("infer", cmd_infer, "score the test split")
    s.add_argument("--heatmaps", action="store_true")

    s = stage("score", cmd_score, "score individual image files")
    s.add_argument("images", nargs="+")
    s.add_argument("--json", action="store_true")

    s = stage("eval", cmd_eval, "score the test split and report AUROC")
    s.add_argument("--heatmaps", action="store_true")

    s = stage("run-full", cmd_run_full, "all stages in order, resuming completed ones")
    s.add_argument("--heatmaps", action="store_true")
    s.add_argument("--force", action="store_true", help="ignore existing artifacts")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"tocoad {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
