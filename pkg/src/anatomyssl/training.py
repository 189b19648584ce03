"""Pre-training loop: asymmetric online/target pair, EMA target updates,
warm-up + cosine LR, joint region-contrast + context-prediction objective,
JSONL run journal, and versioned checkpoints.

Per-sample data preparation is a pure function of (train seed, epoch, sample
index), so the pipeline is deterministic regardless of worker scheduling.
"""

from __future__ import annotations

import copy
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import (DamageParams, SkipSample, damage, downsample_ladder,
                      make_view_pair, random_rect_masks, sample_mask_indices,
                      sample_transform)
from .config import ExperimentConfig
from .losses import (AnatomyBatch, BatchSkip, aggregate_anatomy_loss,
                     mask_pool_batch, total_loss)
from .nets import (OnlineModel, TargetModel, load_checkpoint, save_checkpoint,
                   target_param_map)
from .optim import ema_momentum, ema_update, lr_schedule, make_optimizer

DEVIATION_FLAGS = ["random_init_instead_of_imagenet"]

# identity keys pack (sample uid, structure index); uids stay well below 2**40
_KEY_STRIDE = 64


@dataclass
class TrainState:
    online: OnlineModel
    target: TargetModel
    optimizer: object
    step: int
    epoch: int
    total_steps: int
    warmup_steps: int
    lr_base: float
    ema_pairs: list = None

    def pairs(self):
        if self.ema_pairs is None:
            self.ema_pairs = target_param_map(self.online, self.target)
        return self.ema_pairs


def init_train_state(cfg: ExperimentConfig, n_samples: int) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    online = OnlineModel(cfg.model)
    target = TargetModel(cfg.model)
    ema_update(target_param_map(online, target), m=0.0)  # hard copy at init
    optimizer = make_optimizer(online, cfg.train.optimizer, cfg.train.momentum,
                               cfg.train.weight_decay, cfg.train.trust_coeff)
    steps_per_epoch = max(1, n_samples // cfg.train.batch)
    total = steps_per_epoch * cfg.train.epochs
    warmup = steps_per_epoch * cfg.train.warmup_epochs
    lr_base = cfg.train.base_lr * cfg.train.batch / cfg.train.reference_batch
    return TrainState(online=online, target=target, optimizer=optimizer,
                      step=0, epoch=0, total_steps=total,
                      warmup_steps=warmup, lr_base=lr_base)


def _ladder(cfg: ExperimentConfig):
    sizes = list(cfg.model.backbone.map_sizes)
    return sizes[-cfg.loss.scales:]


def sample_stream(seed: int, epoch: int, uid: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, epoch, uid])
    return np.random.default_rng(ss)


def prepare_sample(sample, uid: int, epoch: int, cfg: ExperimentConfig):
    """Build one training example; raises SkipSample when unusable."""
    rng = sample_stream(cfg.train.seed, epoch, uid)
    masks = sample.masks
    if cfg.train.mask_source == "random_rect":
        masks = random_rect_masks(masks, rng)
    image = sample.image.astype(np.float32)  # training path runs single precision
    t1 = sample_transform(rng, "primary", cfg.augment, image.shape[0])
    t2 = sample_transform(rng, "secondary", cfg.augment, image.shape[0])
    pair = make_view_pair(image, masks, t1, t2, cfg.augment)
    idxs = sample_mask_indices(pair.masks_v1, pair.masks_v2,
                               cfg.loss.masks_per_image, rng,
                               min_pixels=cfg.augment.mask_min_pixels)
    ladder = _ladder(cfg)
    unique = sorted(set(int(i) for i in idxs))
    down1 = {i: downsample_ladder(pair.masks_v1[i], ladder) for i in unique}
    down2 = {i: downsample_ladder(pair.masks_v2[i], ladder) for i in unique}
    w1 = [np.stack([down1[int(i)][si] for i in idxs]) for si in range(len(ladder))]
    w2 = [np.stack([down2[int(i)][si] for i in idxs]) for si in range(len(ladder))]
    keys = np.array([uid * _KEY_STRIDE + int(i) for i in idxs], dtype=np.int64)

    damaged = intact = None
    if pair.overlap_crop is not None and cfg.loss.lambda_ctx > 0.0:
        params = DamageParams(alpha=cfg.augment.damage_alpha,
                              beta=cfg.augment.damage_beta,
                              gamma=cfg.augment.damage_gamma,
                              patch=cfg.augment.shuffle_patch)
        intact = pair.overlap_crop
        damaged = damage(intact, params, rng)
    return {
        "v1": pair.v1, "v2": pair.v2, "w1": w1, "w2": w2, "keys": keys,
        "damaged": damaged, "intact": intact,
    }


def _collate(prepared, n_scales):
    to_t = lambda arrs: torch.from_numpy(np.stack(arrs)).float()
    batch = {
        "views": to_t([p["v1"] for p in prepared]
                      + [p["v2"] for p in prepared]).unsqueeze(1),
        "w1": [to_t([p["w1"][s] for p in prepared]) for s in range(n_scales)],
        "w2": [to_t([p["w2"][s] for p in prepared]) for s in range(n_scales)],
        "keys": torch.from_numpy(np.concatenate([p["keys"] for p in prepared])),
        "n_images": len(prepared),
    }
    with_ctx = [p for p in prepared if p["damaged"] is not None]
    if with_ctx:
        batch["damaged"] = to_t([p["damaged"] for p in with_ctx]).unsqueeze(1)
        batch["intact"] = to_t([p["intact"] for p in with_ctx]).unsqueeze(1)
    else:
        batch["damaged"] = batch["intact"] = None
    return batch


def _ctx_terms(online_maps, target_maps, n_images, reduction):
    """Per-scale context terms, averaged over all images in the step (images
    without a usable overlap contribute zero)."""
    per_scale = []
    total = None
    for o, t in zip(online_maps, target_maps):
        diff = (o - t.detach()) ** 2
        per_image = diff.mean(dim=(1, 2, 3)) if reduction == "mean" \
            else diff.sum(dim=(1, 2, 3))
        term = per_image.sum() / n_images
        per_scale.append(term)
        total = term if total is None else total + term
    return total, per_scale


def prepare_batch(samples_with_uids, epoch: int, cfg: ExperimentConfig):
    """Pure data-side half of a step: per-sample prep + collation."""
    prepared = []
    n_skipped = 0
    for uid, sample in samples_with_uids:
        try:
            prepared.append(prepare_sample(sample, uid, epoch, cfg))
        except SkipSample:
            n_skipped += 1
    batch = _collate(prepared, cfg.loss.scales) if prepared else None
    return batch, n_skipped


def pretrain_step(samples_with_uids, state: TrainState, cfg: ExperimentConfig,
                  epoch: int) -> dict:
    """One optimization step over a list of (uid, PhantomSample).

    Builds the view pairs, pools sampled structures at each scale, computes
    the combined loss, updates the online parameters and then the EMA target.
    Returns the journal report; a fully skipped batch reports skipped=True
    and advances the step counter without touching parameters.
    """
    batch, n_skipped = prepare_batch(samples_with_uids, epoch, cfg)
    return step_on_batch(batch, n_skipped, state, cfg, epoch)


def step_on_batch(batch, n_skipped: int, state: TrainState,
                  cfg: ExperimentConfig, epoch: int) -> dict:
    lr = lr_schedule(state.step, state.total_steps, state.warmup_steps,
                     state.lr_base)
    m = ema_momentum(state.step, state.total_steps, cfg.train.ema_base)
    report = {"step": state.step, "epoch": epoch, "lr": lr, "ema_m": m,
              "n_images": 0 if batch is None else batch["n_images"],
              "n_skipped": n_skipped}
    if batch is None:
        report.update({"skipped": True, "l_total": None})
        state.step += 1
        return report

    n_scales = cfg.loss.scales
    online, target = state.online, state.target

    n_img = batch["n_images"]
    maps_online = online.backbone(batch["views"])[-n_scales:]
    maps_o1 = [m[:n_img] for m in maps_online]
    maps_o2 = [m[n_img:] for m in maps_online]
    with torch.no_grad():
        maps_target = target.backbone(batch["views"])[-n_scales:]
        maps_t1 = [m[:n_img] for m in maps_target]
        maps_t2 = [m[n_img:] for m in maps_target]

    def pool(maps, weights):
        return [mask_pool_batch(m, w).reshape(-1, m.shape[1])
                for m, w in zip(maps, weights)]

    anatomy = AnatomyBatch(
        online_v1=pool(maps_o1, batch["w1"]),
        online_v2=pool(maps_o2, batch["w2"]),
        target_v1=pool(maps_t1, batch["w1"]),
        target_v2=pool(maps_t2, batch["w2"]),
        keys=batch["keys"],
    )
    try:
        l_ana, ana_scales = aggregate_anatomy_loss(anatomy, online.heads,
                                                   target.heads, cfg.loss)
    except BatchSkip:
        report.update({"skipped": True, "l_total": None})
        state.step += 1
        return report

    if batch["damaged"] is not None:
        ctx_online = online.backbone(batch["damaged"])[-n_scales:]
        with torch.no_grad():
            ctx_target = target.backbone(batch["intact"])[-n_scales:]
        l_ctx, ctx_scales = _ctx_terms(ctx_online, ctx_target,
                                       batch["n_images"], cfg.loss.ctx_reduction)
    else:
        l_ctx = l_ana.new_zeros(())
        ctx_scales = [l_ana.new_zeros(()) for _ in range(n_scales)]

    l_total = total_loss(l_ana, l_ctx, cfg.loss)
    state.optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.pairs(), m)

    report.update({
        "skipped": False,
        "l_ana": float(l_ana.detach()),
        "l_ana_per_scale": [float(x.detach()) for x in ana_scales],
        "l_ctx": float(l_ctx.detach()),
        "l_ctx_per_scale": [float(x.detach()) for x in ctx_scales],
        "l_total": float(l_total.detach()),
        "n_ctx": 0 if batch["damaged"] is None else int(batch["damaged"].shape[0]),
    })
    state.step += 1
    return report


def select_training_subset(n_samples: int, fraction: float, seed: int):
    """Deterministic subset for the data-fraction axis (at least one sample)."""
    n_used = max(1, int(round(n_samples * fraction)))
    order = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xDA7A])
    ).permutation(n_samples)
    return np.sort(order[:n_used])


def run_pretrain(samples, cfg: ExperimentConfig, run_dir,
                 resume_from=None) -> dict:
    """Train for cfg.train.epochs; writes journal.jsonl plus periodic, final,
    and encoder-only checkpoints under ``run_dir``. Returns summary paths."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()

    used = select_training_subset(len(samples), cfg.train.data_fraction,
                                  cfg.train.seed)
    state = init_train_state(cfg, len(used))
    start_epoch = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_config=cfg_dict)
        state.online.load_state_dict(payload["state_dict"]["online"])
        state.target.load_state_dict(payload["state_dict"]["target"])
        state.optimizer.load_state_dict(payload["state_dict"]["optimizer"])
        state.step = payload["step"]
        start_epoch = payload["epoch"] + 1
        torch.set_rng_state(payload["torch_rng"])

    journal_path = run_dir / "journal.jsonl"
    mode = "a" if resume_from is not None else "w"
    t0 = time.time()

    # all (epoch, chunk) pairs up front so a worker thread can prefetch the
    # next batch's (pure, per-sample-seeded) data while the step computes
    epoch_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.train.seed & 0xFFFFFFFFFFFFFFFF, 0xE60C]))
    schedule = []
    for epoch in range(cfg.train.epochs):
        order = epoch_rng.permutation(len(used))
        if epoch < start_epoch:
            continue  # replayed for bitwise-identical resumed ordering
        steps = max(1, len(used) // cfg.train.batch)
        for b in range(steps):
            chunk = order[b * cfg.train.batch:(b + 1) * cfg.train.batch]
            if chunk.size:
                schedule.append((epoch, chunk))

    def fetch(item):
        epoch, chunk = item
        pairs = [(int(used[i]), samples[int(used[i])]) for i in chunk]
        return prepare_batch(pairs, epoch, cfg)

    # prefetching competes with the compute threads on very small machines
    try:
        n_cpus = len(os.sched_getaffinity(0))
    except AttributeError:
        n_cpus = os.cpu_count() or 1
    prefetch = n_cpus >= 4

    with journal_path.open(mode) as journal, \
            ThreadPoolExecutor(max_workers=1) as pool:
        if resume_from is None:
            journal.write(json.dumps({
                "type": "header", "config": cfg_dict,
                "deviation_flags": DEVIATION_FLAGS,
                "n_samples_total": len(samples), "n_samples_used": int(len(used)),
                "total_steps": state.total_steps,
            }) + "\n")
        pending = (pool.submit(fetch, schedule[0])
                   if prefetch and schedule else None)
        for i, (epoch, _) in enumerate(schedule):
            if prefetch:
                batch, n_skipped = pending.result()
                pending = (pool.submit(fetch, schedule[i + 1])
                           if i + 1 < len(schedule) else None)
            else:
                batch, n_skipped = fetch(schedule[i])
            state.epoch = epoch
            report = step_on_batch(batch, n_skipped, state, cfg, epoch)
            journal.write(json.dumps({"type": "step", **report}) + "\n")
            end_of_epoch = i + 1 == len(schedule) or schedule[i + 1][0] != epoch
            if end_of_epoch and (epoch + 1) % cfg.train.checkpoint_every == 0 \
                    and epoch + 1 < cfg.train.epochs:
                _save_train_ckpt(run_dir / f"ckpt_epoch_{epoch + 1:04d}.pt",
                                 cfg_dict, state)
        journal.write(json.dumps({
            "type": "footer", "steps": state.step,
            "wall_seconds": time.time() - t0,
        }) + "\n")

    final = _save_train_ckpt(run_dir / "final.pt", cfg_dict, state)
    encoder = save_checkpoint(
        run_dir / "encoder.pt", "encoder", cfg_dict,
        {"backbone": state.online.backbone.state_dict()},
        extra={"deviation_flags": DEVIATION_FLAGS},
    )
    return {"journal": journal_path, "final": final, "encoder": encoder,
            "state": state}


def _save_train_ckpt(path, cfg_dict, state: TrainState):
    return save_checkpoint(
        path, "train", cfg_dict,
        {
            "online": state.online.state_dict(),
            "target": state.target.state_dict(),
            "optimizer": state.optimizer.state_dict(),
        },
        extra={"step": state.step, "epoch": state.epoch,
               "torch_rng": torch.get_rng_state(),
               "deviation_flags": DEVIATION_FLAGS},
    )


def load_encoder(path, expected_config: dict | None = None):
    """Rebuild the backbone from an encoder(-bearing) checkpoint."""
    from .config import resolve_config
    from .nets import MultiScaleBackbone

    payload = load_checkpoint(path, expected_config=expected_config)
    cfg = resolve_config(copy.deepcopy(payload["config"]))
    backbone = MultiScaleBackbone(cfg.model.backbone)
    sd = payload["state_dict"]
    backbone.load_state_dict(sd["backbone"] if "backbone" in sd else sd)
    backbone.eval()
    return backbone, cfg
