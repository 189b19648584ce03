"""Experiment configuration: dataclass sections, JSON loading, strict validation.

A config file is a JSON object with sections {corpus, augment, model, loss,
train, eval}. Every field has a default, so an empty file ``{}`` resolves to
the full default experiment. Unknown keys are rejected in strict mode and
out-of-range values are reported with the valid interval, collecting all
diagnostics before raising.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for unparseable, unknown-key, or out-of-range configuration.

    ``diagnostics`` holds one human-readable line per offending field.
    """

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass
class CorpusConfig:
    n_samples: int = 500
    image_size: int = 224
    n_structures_min: int = 2
    n_structures_max: int = 5
    contrast_min: float = 0.15
    contrast_max: float = 0.5
    speckle_strength: float = 0.35
    n_classes: int = 3
    seed: int = 0


@dataclass
class AugmentConfig:
    out_size: int = 224
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    crop_aspect_min: float = 0.75
    crop_aspect_max: float = 1.3333333333333333
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    gamma_jitter: float = 0.2
    grayscale_prob: float = 0.2
    blur_prob_primary: float = 1.0
    blur_prob_secondary: float = 0.1
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    min_overlap_side: int = 32
    overlap_size: int = 64
    shuffle_patch: int = 4
    damage_alpha: float = 0.15
    damage_beta: float = 0.2
    damage_gamma: float = 0.05
    mask_min_pixels: int = 16


@dataclass
class BackboneConfig:
    in_size: int = 224
    stage_channels: tuple = (32, 64, 128, 256)
    fpn_channels: int = 64
    scales: int = 4
    stem_stride: int = 4  # 4 gives the {1/4..1/32} ladder; 2 supports tiny inputs

    @property
    def map_sizes(self) -> tuple:
        base = self.in_size // self.stem_stride
        return tuple(base // (2 ** i) for i in range(self.scales))


@dataclass
class HeadConfig:
    proj_dim: int = 128
    pred_hidden: int = 256
    per_scale: bool = True


@dataclass
class PromptEngineConfig:
    tokens: int = 8
    channels: int = 64
    heads: int = 4
    rounds: int = 4
    mlp_ratio: int = 2
    ln_eps: float = 1e-5


@dataclass
class AdapterConfig:
    d: int = 64
    d_prime: int = 16


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    prompt_engine: PromptEngineConfig = field(default_factory=PromptEngineConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda_ctx: float = 1.0
    seg_alpha: float = 0.5
    scales: int = 4
    masks_per_image: int = 16  # K
    symmetric: bool = True
    ctx_reduction: str = "mean"  # per-scale element reduction; "mean" or "sum"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 16
    base_lr: float = 0.3
    reference_batch: int = 192  # base_lr is scaled by batch / reference_batch
    warmup_epochs: int = 3
    ema_base: float = 0.996
    optimizer: str = "sgd_momentum"  # desk-scale default; "lars_sgd" selectable
    momentum: float = 0.9
    trust_coeff: float = 0.001
    weight_decay: float = 1e-6
    mask_source: str = "ground_truth"  # or "random_rect"
    data_fraction: float = 1.0
    checkpoint_every: int = 10
    seed: int = 0


@dataclass
class EvalConfig:
    n_folds: int = 5
    threshold: float = 0.5
    probe_max_iter: int = 1000
    seg_train_steps: int = 200
    seg_batch: int = 8
    seg_lr: float = 1e-3
    seed: int = 0


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _as_dict(self)


def _as_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _build(cls, data: dict, path: str, diags: list):
    """Construct a dataclass from a dict, collecting unknown-key diagnostics."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            diags.append(f"unknown key '{where}'")
            continue
        f = known[key]
        if dataclasses.is_dataclass(f.type) or (
            f.default_factory is not dataclasses.MISSING
            and dataclasses.is_dataclass(f.default_factory)
        ):
            sub_cls = f.default_factory
            if not isinstance(value, dict):
                diags.append(f"'{where}' must be an object")
                continue
            kwargs[key] = _build(sub_cls, value, where, diags)
        else:
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        diags.append(f"{path or cls.__name__}: {exc}")
        return cls()


def _check_range(diags, name, value, low, high, *, low_open=False, high_open=False,
                 integer=False):
    lo_br = "(" if low_open or low is None else "["
    hi_br = ")" if high_open or high is None else "]"
    lo_s = "-inf" if low is None else format(low, "g")
    hi_s = "inf" if high is None else format(high, "g")
    interval = f"{lo_br}{lo_s}, {hi_s}{hi_br}"
    if integer and not isinstance(value, int):
        diags.append(f"'{name}' must be an integer in {interval}, got {value!r}")
        return
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        diags.append(f"'{name}' must be a number in {interval}, got {value!r}")
        return
    ok = True
    if low is not None:
        ok = ok and (value > low if low_open else value >= low)
    if high is not None:
        ok = ok and (value < high if high_open else value <= high)
    if not ok:
        diags.append(f"'{name}' = {value!r} outside valid interval {interval}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Range- and cross-field-check a config, raising ConfigError with all findings."""
    d: list = []
    c = cfg.corpus
    _check_range(d, "corpus.n_samples", c.n_samples, 1, None, integer=True)
    _check_range(d, "corpus.image_size", c.image_size, 64, None, integer=True)
    if isinstance(c.image_size, int) and c.image_size % 32 != 0:
        d.append(f"'corpus.image_size' = {c.image_size} must be a multiple of 32")
    _check_range(d, "corpus.n_structures_min", c.n_structures_min, 1, None, integer=True)
    _check_range(d, "corpus.n_structures_max", c.n_structures_max, 1, None, integer=True)
    if c.n_structures_max < c.n_structures_min:
        d.append("'corpus.n_structures_max' must be >= 'corpus.n_structures_min'")
    _check_range(d, "corpus.contrast_min", c.contrast_min, 0.0, 1.0)
    _check_range(d, "corpus.contrast_max", c.contrast_max, 0.0, 1.0)
    if c.contrast_max < c.contrast_min:
        d.append("'corpus.contrast_max' must be >= 'corpus.contrast_min'")
    _check_range(d, "corpus.speckle_strength", c.speckle_strength, 0.0, 1.0)
    _check_range(d, "corpus.n_classes", c.n_classes, 1, 3, integer=True)

    a = cfg.augment
    _check_range(d, "augment.out_size", a.out_size, 64, None, integer=True)
    if isinstance(a.out_size, int) and a.out_size % 32 != 0:
        d.append(f"'augment.out_size' = {a.out_size} must be a multiple of 32")
    _check_range(d, "augment.crop_scale_min", a.crop_scale_min, 0.2, 1.0)
    _check_range(d, "augment.crop_scale_max", a.crop_scale_max, 0.2, 1.0)
    if a.crop_scale_max < a.crop_scale_min:
        d.append("'augment.crop_scale_max' must be >= 'augment.crop_scale_min'")
    for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "blur_prob_primary",
                 "blur_prob_secondary", "solarize_prob"):
        _check_range(d, f"augment.{name}", getattr(a, name), 0.0, 1.0)
    _check_range(d, "augment.damage_alpha", a.damage_alpha, 0.0, 1.0)
    _check_range(d, "augment.damage_beta", a.damage_beta, 0.0, None)
    _check_range(d, "augment.damage_gamma", a.damage_gamma, 0.0, 1.0)
    _check_range(d, "augment.shuffle_patch", a.shuffle_patch, 1, None, integer=True)
    _check_range(d, "augment.overlap_size", a.overlap_size, 32, None, integer=True)
    if isinstance(a.overlap_size, int) and a.overlap_size % 32 != 0:
        d.append(f"'augment.overlap_size' = {a.overlap_size} must be a multiple of 32")
    _check_range(d, "augment.min_overlap_side", a.min_overlap_side, 1, None, integer=True)
    _check_range(d, "augment.mask_min_pixels", a.mask_min_pixels, 1, None, integer=True)

    m = cfg.model
    _check_range(d, "model.backbone.fpn_channels", m.backbone.fpn_channels, 1, None,
                 integer=True)
    _check_range(d, "model.backbone.scales", m.backbone.scales, 1, 4, integer=True)
    if m.backbone.stem_stride not in (2, 4):
        d.append(f"'model.backbone.stem_stride' = {m.backbone.stem_stride} must be 2 or 4")
    if len(tuple(m.backbone.stage_channels)) != m.backbone.scales:
        d.append("'model.backbone.stage_channels' length must equal 'model.backbone.scales'")
    if isinstance(m.backbone.in_size, int) and isinstance(m.backbone.stem_stride, int):
        ratio = m.backbone.stem_stride * (2 ** (m.backbone.scales - 1))
        if m.backbone.in_size % ratio != 0:
            d.append(
                f"'model.backbone.in_size' = {m.backbone.in_size} must be divisible "
                f"by {ratio} for {m.backbone.scales} scales"
            )
    if m.backbone.in_size != a.out_size:
        d.append(
            f"'model.backbone.in_size' = {m.backbone.in_size} must equal "
            f"'augment.out_size' = {a.out_size}"
        )
    _check_range(d, "model.heads.proj_dim", m.heads.proj_dim, 1, None, integer=True)
    _check_range(d, "model.heads.pred_hidden", m.heads.pred_hidden, 1, None, integer=True)
    _check_range(d, "model.prompt_engine.tokens", m.prompt_engine.tokens, 1, None,
                 integer=True)
    _check_range(d, "model.prompt_engine.rounds", m.prompt_engine.rounds, 1, None,
                 integer=True)
    if m.prompt_engine.channels % max(1, m.prompt_engine.heads) != 0:
        d.append("'model.prompt_engine.channels' must be divisible by "
                 "'model.prompt_engine.heads'")
    if m.adapter.d_prime >= m.adapter.d:
        d.append("'model.adapter.d_prime' must be < 'model.adapter.d'")

    lo = cfg.loss
    _check_range(d, "loss.tau", lo.tau, 0.0, None, low_open=True)
    _check_range(d, "loss.lambda_ctx", lo.lambda_ctx, 0.0, None)
    _check_range(d, "loss.seg_alpha", lo.seg_alpha, 0.0, 1.0)
    _check_range(d, "loss.scales", lo.scales, 1, 4, integer=True)
    if isinstance(lo.scales, int) and lo.scales > m.backbone.scales:
        d.append("'loss.scales' must be <= 'model.backbone.scales'")
    _check_range(d, "loss.masks_per_image", lo.masks_per_image, 1, None, integer=True)
    if lo.ctx_reduction not in ("mean", "sum"):
        d.append(f"'loss.ctx_reduction' = {lo.ctx_reduction!r} must be 'mean' or 'sum'")

    t = cfg.train
    _check_range(d, "train.epochs", t.epochs, 1, None, integer=True)
    _check_range(d, "train.batch", t.batch, 1, None, integer=True)
    _check_range(d, "train.base_lr", t.base_lr, 0.0, None, low_open=True)
    _check_range(d, "train.warmup_epochs", t.warmup_epochs, 0, None, integer=True)
    if isinstance(t.warmup_epochs, int) and isinstance(t.epochs, int) \
            and t.warmup_epochs >= t.epochs:
        d.append("'train.warmup_epochs' must be < 'train.epochs'")
    _check_range(d, "train.ema_base", t.ema_base, 0.0, 1.0, low_open=True)
    if t.optimizer not in ("lars_sgd", "sgd_momentum"):
        d.append(f"'train.optimizer' = {t.optimizer!r} must be 'lars_sgd' or 'sgd_momentum'")
    if t.mask_source not in ("ground_truth", "random_rect"):
        d.append(f"'train.mask_source' = {t.mask_source!r} must be 'ground_truth' "
                 "or 'random_rect'")
    _check_range(d, "train.data_fraction", t.data_fraction, 0.0, 1.0, low_open=True)
    _check_range(d, "train.weight_decay", t.weight_decay, 0.0, None)

    e = cfg.eval
    _check_range(d, "eval.n_folds", e.n_folds, 2, None, integer=True)
    _check_range(d, "eval.threshold", e.threshold, 0.0, 1.0, low_open=True, high_open=True)
    _check_range(d, "eval.probe_max_iter", e.probe_max_iter, 1, None, integer=True)
    _check_range(d, "eval.seg_train_steps", e.seg_train_steps, 1, None, integer=True)

    if d:
        raise ConfigError(d)
    return cfg


def resolve_config(data: dict, strict: bool = True) -> ExperimentConfig:
    """Turn a raw config dict into a validated ExperimentConfig with defaults filled."""
    diags: list = []
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            diags.append(f"unknown section '{key}'")
    kwargs = {}
    for f in dataclasses.fields(ExperimentConfig):
        section = data.get(f.name, {})
        if not isinstance(section, dict):
            diags.append(f"section '{f.name}' must be an object")
            section = {}
        kwargs[f.name] = _build(f.default_factory, section, f.name, diags)
    if diags and strict:
        raise ConfigError(diags)
    return validate(ExperimentConfig(**kwargs))


def load_config(path, strict: bool = True) -> ExperimentConfig:
    """Load, resolve and validate a JSON config file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve_config(data, strict=strict)


def merge_overlay(base: dict, overlay: dict) -> dict:
    """Deep-merge an overlay dict onto a base config dict (overlay wins)."""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overlay(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_path(data: dict, dotted: str, value: Any) -> dict:
    """Return a copy of ``data`` with ``dotted`` key path set to ``value``."""
    out = copy.deepcopy(data)
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def config_diff(expected: dict, actual: dict, path: str = "") -> list:
    """Field-level diff between two nested config dicts (lists compared as values)."""
    diffs = []
    keys = sorted(set(expected) | set(actual))
    for key in keys:
        where = f"{path}.{key}" if path else key
        if key not in expected:
            diffs.append(f"{where}: missing in expected, actual={actual[key]!r}")
        elif key not in actual:
            diffs.append(f"{where}: expected={expected[key]!r}, missing in actual")
        elif isinstance(expected[key], dict) and isinstance(actual[key], dict):
            diffs.extend(config_diff(expected[key], actual[key], where))
        elif expected[key] != actual[key]:
            diffs.append(f"{where}: expected={expected[key]!r}, actual={actual[key]!r}")
    return diffs
