"""Task, distillation and the composed inner/outer objectives.

Inner (teacher side, train batch)::

    mean_i w_i * (BCE(p_t, y) + lambda_in * KD(z_t, stopgrad z_s)) + lambda_gate * R_gate

Outer (student side, validation batch)::

    mean_i w_i * (BCE(p_s, y) + lambda_out * KD(z_s, stopgrad z_t))
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError, StateError

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_in: float = 0.1
    lambda_out: float = 1.0
    lambda_gate: float = 5e-3
    tau: float = 4.0

    def __post_init__(self):
        if min(self.lambda_in, self.lambda_out, self.lambda_gate) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce(per_pixel, reduction):
    if reduction == "mean":
        return per_pixel.mean()
    if reduction == "none":
        # per sample: average the trailing (H, W)
        return per_pixel.flatten(-2).mean(-1)
    raise ValueError(f"unknown reduction {reduction!r}")


def task_loss(p, y, reduction="mean"):
    """Pixel-mean binary cross-entropy on clamped probabilities."""
    _same_shape(p, y)
    p = p.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype)
    return _reduce(-(y * torch.log(p) + (1 - y) * torch.log1p(-p)), reduction)


def kd_loss(z_a, z_b, tau=4.0, reduction="mean"):
    """Pixel-mean squared gap between temperature-scaled sigmoids."""
    _same_shape(z_a, z_b)
    return _reduce((torch.sigmoid(z_a / tau) - torch.sigmoid(z_b / tau)) ** 2, reduction)


def inner_loss(z_t, z_s, target, weights, r_gate, lw=None, use_kd=True):
    """Returns ``(total, parts)``; the student logits are detached."""
    lw = lw or LossWeights()
    if weights is None:
        raise StateError("sample weights missing for inner loss")
    task = task_loss(torch.sigmoid(z_t), target, reduction="none")
    kd = kd_loss(z_t, z_s.detach(), lw.tau, reduction="none")
    per_sample = task + (lw.lambda_in * kd if use_kd else 0.0)
    total = (weights * per_sample).mean() + lw.lambda_gate * r_gate
    parts = {"L_task_t": task.mean().detach(), "L_kd_in": kd.mean().detach(),
             "R_gate": torch.as_tensor(r_gate).detach(), "total_in": total.detach()}
    return total, parts


def outer_loss(z_s, z_t, target, weights, lw=None, use_kd=True):
    """Returns ``(total, parts)``; the teacher logits are detached."""
    lw = lw or LossWeights()
    if weights is None:
        raise StateError("sample weights missing for outer loss")
    task = task_loss(torch.sigmoid(z_s), target, reduction="none")
    kd = kd_loss(z_s, z_t.detach(), lw.tau, reduction="none")
    per_sample = task + (lw.lambda_out * kd if use_kd else 0.0)
    total = (weights * per_sample).mean()
    parts = {"L_task_s": task.mean().detach(), "L_kd_out": kd.mean().detach(), "total_out": total.detach()}
    return total, parts
