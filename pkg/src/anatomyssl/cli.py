"""Command-line entry point.

Subcommands: gen, pretrain, probe, segeval, ablate, sweep, plot. Every run
creates a directory containing exactly one ``manifest.json`` recording the
command, the byte-identical config snapshot, the resolved config, seeds and
deviation flags.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
The run-root directory can be overridden with ``ANATOMYSSL_RUN_ROOT``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, resolve_config
from .corpus import CorpusError, load_corpus, write_corpus
from .evaluation import (StratificationError, linear_probe, make_folds,
                         seg_head_eval)
from .phantom import build_corpus
from .sweeps import (component_arm_plan, damage_arm_plan, plot_journal,
                     plot_sweep, run_ablation, run_experiment, run_sweep)
from .training import DEVIATION_FLAGS, load_encoder, run_pretrain

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _repo_overlays() -> Path:
    return Path(__file__).resolve().parents[2] / "configs" / "ablations"


def _run_root() -> Path:
    return Path(os.environ.get("ANATOMYSSL_RUN_ROOT", "runs"))


def _make_run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        run_dir = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = _run_root() / f"{command}-{stamp}-{os.getpid()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_cfg(args):
    if getattr(args, "config", None):
        snapshot = Path(args.config).read_text()
        cfg = load_config(args.config)
    else:
        snapshot = "{}"
        cfg = resolve_config({})
    return cfg, snapshot


def _write_manifest(run_dir: Path, command: str, argv, snapshot: str,
                    resolved: dict, seed, status: str, started: str):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_snapshot": snapshot,
        "resolved_config": resolved,
        "code_version": __version__,
        "seed": seed,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "deviation_flags": DEVIATION_FLAGS,
        "status": status,
    }
    # "run_manifest.json": the corpus index already claims "manifest.json"
    (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def _corpus_from_args(args, cfg):
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    c = cfg.corpus
    return build_corpus(c.n_samples, image_size=c.image_size,
                        n_structures_range=(c.n_structures_min,
                                            c.n_structures_max),
                        contrast_range=(c.contrast_min, c.contrast_max),
                        speckle_strength=c.speckle_strength,
                        n_classes=c.n_classes, seed=c.seed)


def _parse_values(text: str):
    values = []
    for item in text.split(","):
        item = item.strip()
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            raise ConfigError(f"cannot parse value {item!r}")
    return values


def _parse_seeds(text: str):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anatomyssl",
        description="Region-level self-supervised pre-training on synthetic "
                    "phantoms: corpus generation, pre-training, probing, "
                    "ablations, sweeps, plots.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a phantom corpus on disk")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--config")
    p.add_argument("--corpus", help="corpus directory (generated if omitted)")
    p.add_argument("--out")
    p.add_argument("--resume", help="resume from a training checkpoint")

    p = sub.add_parser("probe", help="linear probe a frozen encoder")
    p.add_argument("--config")
    p.add_argument("--encoder", required=True)
    p.add_argument("--corpus")
    p.add_argument("--out")

    p = sub.add_parser("segeval", help="train + evaluate the segmentation head")
    p.add_argument("--config")
    p.add_argument("--encoder", required=True)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--thresholds", default=None,
                   help="comma-separated probability thresholds")

    p = sub.add_parser("ablate", help="run ablation arms from config overlays")
    p.add_argument("--config")
    p.add_argument("--arms", default="",
                   help="component switches: symmetric,lpe,multiscale,cp")
    p.add_argument("--damage-arms", default="", dest="damage_arms",
                   help="damage switches: shuffle,noise,occlusion,all-off")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")
    p.add_argument("--overlays", help="directory with overlay config files")

    p = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    p.add_argument("--config")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")

    p = sub.add_parser("plot", help="plot a run journal or a sweep CSV")
    p.add_argument("--journal")
    p.add_argument("--csv")
    p.add_argument("--out", required=True)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    started = datetime.now(timezone.utc).isoformat()
    try:
        cfg, snapshot = (None, "{}")
        run_dir = None
        if args.command != "plot":
            cfg, snapshot = _load_cfg(args)
            run_dir = _make_run_dir(args, args.command)

        if args.command == "gen":
            samples = _corpus_from_args(argparse.Namespace(corpus=None), cfg)
            write_corpus(samples, run_dir, overwrite=args.overwrite)
            print(f"wrote {len(samples)} samples to {run_dir}")

        elif args.command == "pretrain":
            samples = _corpus_from_args(args, cfg)
            out = run_pretrain(samples, cfg, run_dir, resume_from=args.resume)
            print(f"journal: {out['journal']}")
            print(f"encoder checkpoint: {out['encoder']}")

        elif args.command == "probe":
            samples = _corpus_from_args(args, cfg)
            backbone, _ = load_encoder(args.encoder)
            plan = make_folds(len(samples), cfg.eval.n_folds, cfg.eval.seed)
            result = linear_probe(backbone, samples, plan,
                                  max_iter=cfg.eval.probe_max_iter,
                                  seed=cfg.eval.seed)
            (run_dir / "probe.json").write_text(json.dumps(result, indent=2))
            print(json.dumps(result, indent=2))

        elif args.command == "segeval":
            samples = _corpus_from_args(args, cfg)
            backbone, _ = load_encoder(args.encoder)
            plan = make_folds(len(samples), cfg.eval.n_folds, cfg.eval.seed)
            thresholds = None
            if args.thresholds:
                thresholds = [float(t) for t in args.thresholds.split(",")]
            result = seg_head_eval(backbone, samples, plan, cfg,
                                   thresholds=thresholds, seed=cfg.eval.seed)
            (run_dir / "segeval.json").write_text(json.dumps(result, indent=2))
            print(json.dumps({t: r["mean"] for t, r in result.items()},
                             indent=2))

        elif args.command == "ablate":
            arm_files = {}
            if args.arms:
                arm_files.update(component_arm_plan(
                    [a.strip() for a in args.arms.split(",") if a.strip()]))
            if args.damage_arms:
                arm_files.update(damage_arm_plan(
                    [a.strip() for a in args.damage_arms.split(",") if a.strip()]))
            if not arm_files:
                raise ConfigError("no arms requested; pass --arms and/or "
                                  "--damage-arms")
            overlays = Path(args.overlays) if args.overlays else _repo_overlays()
            csv_path = run_ablation(cfg.to_dict(), arm_files,
                                    _parse_seeds(args.seeds), overlays, run_dir)
            print(f"merged CSV: {csv_path}")

        elif args.command == "sweep":
            csv_path = run_sweep(cfg.to_dict(), args.axis,
                                 _parse_values(args.values),
                                 _parse_seeds(args.seeds), run_dir)
            print(f"sweep CSV: {csv_path}")

        elif args.command == "plot":
            if bool(args.journal) == bool(args.csv):
                raise ConfigError("pass exactly one of --journal or --csv")
            out = Path(args.out)
            if out.is_dir():
                out = out / "plot.png"
            if args.journal:
                plot_journal(args.journal, out)
            else:
                plot_sweep(args.csv, out)
            print(f"plot: {out}")

        if args.command != "plot":
            seed = cfg.train.seed if cfg is not None else None
            _write_manifest(run_dir, args.command, argv, snapshot,
                            cfg.to_dict() if cfg is not None else {},
                            seed, "ok", started)
        return EXIT_OK

    except ConfigError as exc:
        for line in exc.diagnostics:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, StratificationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 4
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
