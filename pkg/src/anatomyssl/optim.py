"""Optimization pieces: layer-wise adaptive LR scaling, warm-up + cosine
schedules for the learning rate and the EMA momentum, and the EMA update.
"""

from __future__ import annotations

import math

import torch
from torch.optim.optimizer import Optimizer

_EPS = 1e-9


def lars_scale(param_norm: float, grad_norm: float, weight_decay: float,
               trust_coeff: float) -> float:
    """Local learning-rate multiplier: trust * |p| / (|g| + wd * |p| + eps).

    Falls back to 1.0 when either norm is zero (covers fresh zero-init
    parameters and vanished gradients).
    """
    if param_norm <= 0.0 or grad_norm <= 0.0:
        return 1.0
    return trust_coeff * param_norm / (grad_norm + weight_decay * param_norm + _EPS)


class LarsSGD(Optimizer):
    """SGD with momentum plus a per-parameter trust ratio.

    Parameter groups carry an ``adapt`` flag; bias and normalization
    parameters (ndim <= 1) are placed in a non-adaptive, non-decayed group by
    ``build_param_groups``.
    """

    def __init__(self, params, lr=0.0, momentum=0.9, weight_decay=0.0,
                 trust_coeff=0.001):
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                        trust_coeff=trust_coeff, adapt=True)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            momentum = group["momentum"]
            wd = group["weight_decay"] if group["adapt"] else 0.0
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if wd != 0.0:
                    g = g.add(p, alpha=wd)
                if group["adapt"]:
                    local = lars_scale(p.norm().item(), p.grad.norm().item(),
                                       wd, group["trust_coeff"])
                else:
                    local = 1.0
                buf = self.state[p].get("momentum_buffer")
                if buf is None:
                    buf = torch.zeros_like(p)
                    self.state[p]["momentum_buffer"] = buf
                buf.mul_(momentum).add_(g, alpha=local)
                p.add_(buf, alpha=-group["lr"])
        return loss


def build_param_groups(model: torch.nn.Module, weight_decay: float):
    """Split parameters: weights get decay + adaptation, biases/norms neither."""
    decay, exempt = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (exempt if p.ndim <= 1 else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay, "adapt": True},
        {"params": exempt, "weight_decay": 0.0, "adapt": False},
    ]


def make_optimizer(model: torch.nn.Module, kind: str, momentum: float,
                   weight_decay: float, trust_coeff: float):
    groups = build_param_groups(model, weight_decay)
    if kind == "lars_sgd":
        return LarsSGD(groups, momentum=momentum, trust_coeff=trust_coeff)
    if kind == "sgd_momentum":
        return torch.optim.SGD(groups, lr=0.0, momentum=momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                base_lr: float) -> float:
    """Linear ramp 0 -> base over the warm-up, then cosine decay to 0."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside horizon [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_momentum(step: int, total_steps: int, base: float) -> float:
    """Cosine ramp of the target momentum from ``base`` at step 0 to 1."""
    progress = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return 1.0 - (1.0 - base) * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def ema_update(param_pairs, m: float):
    """xi <- m * xi + (1 - m) * theta, elementwise.

    m=0 copies theta exactly; m=1 leaves xi untouched. Intermediate values
    are clamped to the [min(xi, theta), max(xi, theta)] envelope so the
    betweenness contract holds even under floating-point rounding.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    for xi, theta in param_pairs:
        if m == 1.0:
            continue
        if m == 0.0:
            xi.copy_(theta)
            continue
        lo = torch.minimum(xi, theta)
        hi = torch.maximum(xi, theta)
        xi.mul_(m).add_(theta, alpha=1.0 - m)
        xi.clamp_(min=lo, max=hi)
