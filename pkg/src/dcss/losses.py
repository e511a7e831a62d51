"""Segmentation (Dice + CE) and asymmetric existence losses, plus finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import DegenerateInputError, ValidationError

EPS = 1e-7


@dataclass(frozen=True)
class ASLConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValidationError("ASL exponents must be non-negative")


def _t(x, like=None):
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if torch.is_tensor(like) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def dice_loss(p, g) -> torch.Tensor:
    """1 - 2 sum(p g) / sum(p^2 + g^2) over the last two axes, averaged over any leading axes."""
    p = _t(p)
    g = _t(g, p).to(p.dtype)
    inter = (p * g).sum(dim=(-2, -1))
    denom = (p * p + g * g).sum(dim=(-2, -1))
    if bool((denom == 0).any()):
        raise DegenerateInputError("dice loss undefined when prediction and target are both empty")
    return (1.0 - 2.0 * inter / denom).mean()


def ce_loss(p, y) -> torch.Tensor:
    """Mean over pixels of -sum_c y log p; p and y have the class axis last."""
    p = _t(p)
    y = _t(y, p).to(p.dtype)
    if p.shape != y.shape:
        raise ValidationError(f"probability shape {tuple(p.shape)} != label shape {tuple(y.shape)}")
    if bool(((p.detach().sum(dim=-1) - 1.0).abs() > 1e-6).any()):
        raise ValidationError("class probabilities must sum to 1 per pixel")
    logp = torch.log(p.clamp(EPS, 1.0 - EPS))
    return -(y * logp).sum(dim=-1).mean()


def binary_probs(p: torch.Tensor) -> torch.Tensor:
    return torch.stack([1.0 - p, p], dim=-1)


def seg_loss(p, g, y=None) -> torch.Tensor:
    """Dice on the foreground probability plus CE on (background, foreground) probabilities."""
    p = _t(p)
    g = _t(g, p).to(p.dtype)
    if y is None:
        y = binary_probs(g)
    return dice_loss(p, g) + ce_loss(binary_probs(p), y)


def seg_loss_from_logits(logits: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    return seg_loss(torch.sigmoid(logits), g)


def asymmetric_loss(r, y, cfg: ASLConfig = ASLConfig()) -> torch.Tensor:
    """Negated mean of (1-p)^g+ log p for positives and p^g- log(1-p) for negatives."""
    p = _t(r).clamp(EPS, 1.0 - EPS)
    y = _t(y, p).to(p.dtype)
    pos = (1.0 - p) ** cfg.gamma_pos * torch.log(p)
    neg = p ** cfg.gamma_neg * torch.log(1.0 - p)
    return -(y * pos + (1.0 - y) * neg).mean()


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], epsilon: float = 1e-4,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` recomputes the scalar from the current values of ``params``.  With
    ``max_elements`` only a seeded subset of coordinates per tensor is probed.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    value = fn()
    if value.numel() != 1:
        raise ValidationError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_elements]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = fn().item()
                flat[i] = orig - epsilon
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * epsilon)
                ana = a.view(-1)[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
