"""Downstream evaluation: pixel-overlap metrics, symmetric Hausdorff
distance, k-fold linear probing on frozen features, and a small trainable
segmentation head on top of a frozen encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score, f1_score
from sklearn.preprocessing import StandardScaler

from .augment import resize_bilinear
from .config import AdapterConfig, ExperimentConfig, PromptEngineConfig
from .losses import seg_adapt_loss
from .nets import SegmentationHead


class StratificationError(RuntimeError):
    """A training fold is missing at least one class."""


@dataclass
class SegMetrics:
    dice: float
    ppv: float
    sensitivity: float
    hd: float = math.nan
    undefined_sensitivity: bool = False
    undefined_ppv: bool = False
    hd_sentinel: bool = False


def confusion_metrics(pred: np.ndarray, gt: np.ndarray) -> SegMetrics:
    """Dice / PPV / sensitivity from the pixel confusion matrix.

    Empty gt with empty pred scores 1 across the board; an undefined ratio
    (zero denominator) is reported as 0 with the corresponding flag set.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    if tp + fp + fn == 0:
        return SegMetrics(dice=1.0, ppv=1.0, sensitivity=1.0)
    dice = 2.0 * tp / (2.0 * tp + fp + fn)
    und_p = (tp + fp) == 0
    und_s = (tp + fn) == 0
    ppv = 0.0 if und_p else tp / (tp + fp)
    sens = 0.0 if und_s else tp / (tp + fn)
    return SegMetrics(dice=dice, ppv=ppv, sensitivity=sens,
                      undefined_ppv=und_p, undefined_sensitivity=und_s)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor (the image
    border counts as background). Returns (N, 2) row/col coordinates."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray):
    """Symmetric Hausdorff distance between boundary sets, in pixels.

    If either mask is empty the image diagonal is returned with a sentinel
    flag. Returns (distance, sentinel_flag).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a = boundary_points(pred)
    b = boundary_points(gt)
    if len(a) == 0 or len(b) == 0:
        if len(a) == 0 and len(b) == 0:
            return 0.0, False
        h, w = pred.shape
        return float(math.hypot(h, w)), True
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba)), False


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray) -> SegMetrics:
    metrics = confusion_metrics(pred, gt)
    metrics.hd, metrics.hd_sentinel = hausdorff_distance(pred, gt)
    return metrics


@dataclass
class FoldPlan:
    n_folds: int
    folds: list = field(default_factory=list)  # (train_idx, test_idx) pairs
    seed: int = 0


def make_folds(n: int, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffled partition into n_folds groups with sizes differing by <= 1."""
    if n_folds < 2 or n_folds > n:
        raise ValueError(f"need 2 <= n_folds <= n, got {n_folds} for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, n_folds)
    folds = []
    for i, part in enumerate(parts):
        train = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != i]))
        folds.append((train, np.sort(part)))
    return FoldPlan(n_folds=n_folds, folds=folds, seed=seed)


def encode_features(backbone, samples, batch_size: int = 32) -> np.ndarray:
    """Concatenated global-average-pooled per-scale maps, one row per sample."""
    backbone.eval()
    in_size = backbone.cfg.in_size
    feats = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            imgs = []
            for s in chunk:
                img = s.image
                if img.shape[0] != in_size:
                    img = resize_bilinear(img, in_size, in_size)
                imgs.append(img)
            x = torch.from_numpy(np.stack(imgs)).float().unsqueeze(1)
            maps = backbone(x)
            feats.append(torch.cat([m.mean(dim=(2, 3)) for m in maps],
                                   dim=1).numpy())
    return np.concatenate(feats, axis=0)


def linear_probe(backbone, samples, plan: FoldPlan, max_iter: int = 1000,
                 seed: int = 0) -> dict:
    """Frozen-feature multinomial logistic probe; per-fold accuracy and
    macro-F1 plus their means and standard deviations."""
    features = encode_features(backbone, samples)
    labels = np.array([s.class_id for s in samples])
    accs, f1s = [], []
    for train_idx, test_idx in plan.folds:
        train_classes = set(labels[train_idx].tolist())
        if train_classes != set(labels.tolist()):
            missing = sorted(set(labels.tolist()) - train_classes)
            raise StratificationError(f"classes {missing} absent from a training fold")
        scaler = StandardScaler().fit(features[train_idx])
        clf = LogisticRegression(max_iter=max_iter, random_state=seed)
        clf.fit(scaler.transform(features[train_idx]), labels[train_idx])
        pred = clf.predict(scaler.transform(features[test_idx]))
        accs.append(accuracy_score(labels[test_idx], pred))
        f1s.append(f1_score(labels[test_idx], pred, average="macro"))
    return {
        "fold_accuracy": [float(a) for a in accs],
        "fold_macro_f1": [float(f) for f in f1s],
        "mean_accuracy": float(np.mean(accs)),
        "std_accuracy": float(np.std(accs)),
        "mean_macro_f1": float(np.mean(f1s)),
        "std_macro_f1": float(np.std(f1s)),
    }


def _foreground_targets(samples) -> np.ndarray:
    return np.stack([np.any(np.stack(s.masks), axis=0) if s.masks
                     else np.zeros_like(s.image, dtype=bool) for s in samples])


def _coarse_maps(backbone, samples, batch_size: int = 32) -> torch.Tensor:
    backbone.eval()
    in_size = backbone.cfg.in_size
    out = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            imgs = []
            for s in chunk:
                img = s.image
                if img.shape[0] != in_size:
                    img = resize_bilinear(img, in_size, in_size)
                imgs.append(img)
            x = torch.from_numpy(np.stack(imgs)).float().unsqueeze(1)
            out.append(backbone(x)[-1])
    return torch.cat(out, dim=0)


def train_seg_head(coarse_maps: torch.Tensor, targets: np.ndarray, idxs,
                   cfg: ExperimentConfig, steps: int | None = None,
                   seed: int = 0, return_losses: bool = False):
    """Fit the token decoder head on frozen encoder maps with BCE+Dice."""
    torch.manual_seed(seed)
    engine_cfg = PromptEngineConfig(**vars(cfg.model.prompt_engine))
    engine_cfg.channels = cfg.model.backbone.fpn_channels
    adapter_cfg = AdapterConfig(d=cfg.model.backbone.fpn_channels,
                                d_prime=max(cfg.model.backbone.fpn_channels // 4, 1))
    head = SegmentationHead(cfg.model.backbone.fpn_channels, engine_cfg,
                            adapter_cfg)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.eval.seg_lr)
    rng = np.random.default_rng(seed)
    gt = torch.from_numpy(targets).float()
    size = gt.shape[-1]
    steps = cfg.eval.seg_train_steps if steps is None else steps
    idxs = np.asarray(idxs)
    head.train()
    losses = []
    for _ in range(steps):
        pick = idxs[rng.integers(0, len(idxs), size=min(cfg.eval.seg_batch,
                                                        len(idxs)))]
        logits = head.foreground_logits(coarse_maps[pick])
        logits = torch.nn.functional.interpolate(
            logits, size=(size, size), mode="bilinear", align_corners=False)
        loss = seg_adapt_loss(logits.squeeze(1), gt[pick], cfg.loss.seg_alpha)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    head.eval()
    if return_losses:
        return head, losses
    return head


def predict_foreground(head: SegmentationHead, coarse_maps: torch.Tensor,
                       idxs, out_size: int, threshold: float) -> np.ndarray:
    with torch.no_grad():
        logits = head.foreground_logits(coarse_maps[np.asarray(idxs)])
        logits = torch.nn.functional.interpolate(
            logits, size=(out_size, out_size), mode="bilinear",
            align_corners=False)
        probs = torch.sigmoid(logits.squeeze(1)).numpy()
    return probs >= threshold


def seg_head_eval(backbone, samples, plan: FoldPlan, cfg: ExperimentConfig,
                  thresholds=None, seed: int = 0) -> dict:
    """Per-fold head training + SegMetrics on the held-out fold."""
    thresholds = [cfg.eval.threshold] if thresholds is None else list(thresholds)
    coarse = _coarse_maps(backbone, samples)
    targets = _foreground_targets(samples)
    size = targets.shape[-1]
    results = {f"{t:g}": [] for t in thresholds}
    for fold_i, (train_idx, test_idx) in enumerate(plan.folds):
        head = train_seg_head(coarse, targets, train_idx, cfg,
                              seed=seed + fold_i)
        for t in thresholds:
            preds = predict_foreground(head, coarse, test_idx, size, t)
            fold_metrics = [segmentation_metrics(p, targets[i])
                            for p, i in zip(preds, test_idx)]
            results[f"{t:g}"].append({
                "dice": float(np.mean([m.dice for m in fold_metrics])),
                "ppv": float(np.mean([m.ppv for m in fold_metrics])),
                "sensitivity": float(np.mean([m.sensitivity
                                              for m in fold_metrics])),
                "hd": float(np.mean([m.hd for m in fold_metrics])),
            })
    summary = {}
    for t, folds in results.items():
        summary[t] = {
            "per_fold": folds,
            "mean": {k: float(np.mean([f[k] for f in folds]))
                     for k in ("dice", "ppv", "sensitivity", "hd")},
        }
    return summary
