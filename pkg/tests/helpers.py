"""Shared test utilities: central finite-difference gradient checking.

All checks run in double precision with step 1e-5. The error metric is the
elementwise |analytic - numeric| / max(1, |analytic|, |numeric|), reported as
the maximum over every checked element (relative for large gradients,
absolute near zero).
"""

from __future__ import annotations

import torch

FD_STEP = 1e-5
FD_TOL = 1e-4


def max_rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = torch.maximum(torch.ones_like(a),
                          torch.maximum(a.abs(), b.abs()))
    return ((a - b).abs() / denom).max().item()


def fd_grad_tensor(tensor: torch.Tensor, scalar_fn, h: float = FD_STEP):
    """Central-difference gradient of scalar_fn() w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(scalar_fn())
            flat[i] = orig - h
            fm = float(scalar_fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_param_grads(module: torch.nn.Module, scalar_fn,
                      h: float = FD_STEP) -> float:
    """Max error between autograd and FD over every parameter of module."""
    for p in module.parameters():
        p.grad = None
    loss = scalar_fn()
    loss.backward()
    worst = 0.0
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        numeric = fd_grad_tensor(p, scalar_fn, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def check_input_grads(inputs, scalar_fn, h: float = FD_STEP) -> float:
    """Max error between autograd and FD over the given leaf input tensors."""
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    for x in inputs:
        x.grad = None
    loss = scalar_fn()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else torch.zeros_like(x)
        numeric = fd_grad_tensor(x, scalar_fn, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
