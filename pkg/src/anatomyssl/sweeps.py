"""Sweep and ablation orchestration: pretrain + probe per configuration,
merged CSV output, and line plots.

Identical resolved configurations (same seed) are executed once per process
and served from a cache — ablation grids contain overlapping arms.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ConfigError, merge_overlay, resolve_config, set_path
from .evaluation import linear_probe, make_folds
from .phantom import build_corpus
from .training import load_encoder, run_pretrain

# sweep axis -> (config paths to set, validator, human-readable valid range)
SWEEP_AXES = {
    "tau": (("loss.tau",), lambda v: v > 0, "(0, inf)"),
    "S": (("loss.scales",), lambda v: isinstance(v, int) and 1 <= v <= 4, "[1, 4]"),
    "lambda_ctx": (("loss.lambda_ctx",), lambda v: v >= 0, "[0, inf)"),
    "N": (("model.prompt_engine.rounds",),
          lambda v: isinstance(v, int) and v >= 1, "[1, inf)"),
    "alpha": (("augment.damage_alpha",), lambda v: 0 <= v <= 1, "[0, 1]"),
    "K": (("loss.masks_per_image",),
          lambda v: isinstance(v, int) and v >= 1, "[1, inf)"),
    "resolution": (("augment.out_size", "model.backbone.in_size"),
                   lambda v: isinstance(v, int) and v >= 64 and v % 32 == 0,
                   "multiples of 32 in [64, inf)"),
    "data_fraction": (("train.data_fraction",), lambda v: 0 < v <= 1, "(0, 1]"),
}

# ablation arm token -> overlay file in configs/ablations/
COMPONENT_ARM_FILES = {
    "symmetric": "off_symmetric.json",
    "lpe": "off_mask_prior.json",
    "multiscale": "off_multiscale.json",
    "cp": "off_context.json",
}
COMPONENT_PAIR_FILES = {
    frozenset(("lpe", "multiscale")): "off_mask_prior_multiscale.json",
    frozenset(("symmetric", "cp")): "off_symmetric_context.json",
}
DAMAGE_ARM_FILES = {
    "shuffle": "damage_no_shuffle.json",
    "noise": "damage_no_noise.json",
    "occlusion": "damage_no_occlusion.json",
    "all-off": "damage_all_off.json",
}
FULL_ARM_FILE = "full.json"

_corpus_cache: dict = {}
_experiment_cache: dict = {}


def corpus_for(cfg) -> list:
    """Generate (or reuse) the in-memory corpus described by cfg.corpus."""
    key = json.dumps(vars(cfg.corpus), sort_keys=True)
    if key not in _corpus_cache:
        c = cfg.corpus
        _corpus_cache[key] = build_corpus(
            c.n_samples, image_size=c.image_size,
            n_structures_range=(c.n_structures_min, c.n_structures_max),
            contrast_range=(c.contrast_min, c.contrast_max),
            speckle_strength=c.speckle_strength, n_classes=c.n_classes,
            seed=c.seed)
    return _corpus_cache[key]


def _experiment_key(cfg_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def run_experiment(cfg_dict: dict, workdir, samples=None) -> dict:
    """Pretrain + frozen linear probe for one resolved config dict.

    Returns probe metrics plus runtime; results are cached per resolved
    config within the process.
    """
    key = _experiment_key(cfg_dict)
    if key in _experiment_cache:
        return _experiment_cache[key]
    cfg = resolve_config(json.loads(json.dumps(cfg_dict)))
    if samples is None:
        samples = corpus_for(cfg)
    run_dir = Path(workdir) / key
    t0 = time.time()
    out = run_pretrain(samples, cfg, run_dir)
    backbone, _ = load_encoder(out["encoder"])
    plan = make_folds(len(samples), cfg.eval.n_folds, cfg.eval.seed)
    probe = linear_probe(backbone, samples, plan,
                         max_iter=cfg.eval.probe_max_iter, seed=cfg.eval.seed)
    result = {
        "key": key,
        "run_dir": str(run_dir),
        "encoder": str(out["encoder"]),
        "journal": str(out["journal"]),
        "runtime_s": time.time() - t0,
        **probe,
    }
    _experiment_cache[key] = result
    return result


def component_arm_plan(arms) -> dict:
    """Map arm names to overlay file names for the component grid."""
    plan = {"full": FULL_ARM_FILE}
    for arm in arms:
        if arm not in COMPONENT_ARM_FILES:
            raise ConfigError(
                f"unknown ablation arm {arm!r}; valid: "
                f"{sorted(COMPONENT_ARM_FILES)}")
        plan[f"off_{arm}"] = COMPONENT_ARM_FILES[arm]
    for pair, fname in COMPONENT_PAIR_FILES.items():
        if pair <= set(arms):
            plan["off_" + "_".join(sorted(pair))] = fname
    return plan


def damage_arm_plan(arms) -> dict:
    plan = {}
    for arm in arms:
        if arm not in DAMAGE_ARM_FILES:
            raise ConfigError(
                f"unknown damage arm {arm!r}; valid: {sorted(DAMAGE_ARM_FILES)}")
        plan[f"damage_{arm.replace('-', '_')}"] = DAMAGE_ARM_FILES[arm]
    return plan


def run_ablation(base_cfg: dict, arm_files: dict, seeds, overlay_dir,
                 outdir) -> Path:
    """Run every (arm, seed) experiment and write merged.csv under outdir."""
    overlay_dir = Path(overlay_dir)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for arm, fname in arm_files.items():
        overlay = json.loads((overlay_dir / fname).read_text())
        merged = merge_overlay(base_cfg, overlay)
        for seed in seeds:
            cfg_dict = set_path(merged, "train.seed", int(seed))
            resolved = resolve_config(cfg_dict).to_dict()
            result = run_experiment(resolved, outdir / "runs")
            rows.append({
                "arm": arm, "seed": int(seed),
                "probe_accuracy": result["mean_accuracy"],
                "probe_macro_f1": result["mean_macro_f1"],
                "runtime_s": round(result["runtime_s"], 3),
            })
    csv_path = outdir / "merged.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def validate_sweep(axis: str, values) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: "
                          f"{sorted(SWEEP_AXES)}")
    _, check, valid = SWEEP_AXES[axis]
    bad = [v for v in values if not check(v)]
    if bad:
        raise ConfigError(
            f"axis '{axis}': values {bad} outside valid range {valid}")


def run_sweep(base_cfg: dict, axis: str, values, seeds, outdir) -> Path:
    """Pretrain + probe for each axis value (shared seeds); CSV + line plot."""
    validate_sweep(axis, values)
    paths, _, _ = SWEEP_AXES[axis]
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg_dict = base_cfg
        for path in paths:
            cfg_dict = set_path(cfg_dict, path, value)
        for seed in seeds:
            with_seed = set_path(cfg_dict, "train.seed", int(seed))
            resolved = resolve_config(with_seed).to_dict()
            result = run_experiment(resolved, outdir / "runs")
            rows.append({
                "axis": axis, "value": value, "seed": int(seed),
                "probe_accuracy": result["mean_accuracy"],
                "probe_macro_f1": result["mean_macro_f1"],
                "runtime_s": round(result["runtime_s"], 3),
            })
    csv_path = outdir / f"sweep_{axis}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    plot_sweep(csv_path, outdir / f"sweep_{axis}.png")
    return csv_path


def plot_sweep(csv_path, out_path) -> Path:
    """Accuracy vs axis value: per-seed points plus the per-value mean line."""
    with Path(csv_path).open() as fh:
        rows = list(csv.DictReader(fh))
    axis = rows[0]["axis"] if "axis" in rows[0] else "arm"
    xs = sorted({float(r["value"]) for r in rows}) if "value" in rows[0] else None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if xs is not None:
        means = []
        for x in xs:
            ys = [float(r["probe_accuracy"]) for r in rows
                  if float(r["value"]) == x]
            ax.scatter([x] * len(ys), ys, color="tab:gray", s=12, zorder=2)
            means.append(sum(ys) / len(ys))
        ax.plot(xs, means, marker="o", color="tab:blue", zorder=3)
        ax.set_xlabel(axis)
    ax.set_ylabel("probe accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_journal(journal_path, out_path) -> Path:
    """Loss curves (total / region contrast / context) over steps."""
    steps, l_total, l_ana, l_ctx = [], [], [], []
    with Path(journal_path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "step" and not rec.get("skipped"):
                steps.append(rec["step"])
                l_total.append(rec["l_total"])
                l_ana.append(rec["l_ana"])
                l_ctx.append(rec["l_ctx"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, l_total, label="total", lw=1.2)
    ax.plot(steps, l_ana, label="region contrast", lw=0.9, alpha=0.8)
    ax.plot(steps, l_ctx, label="context", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
