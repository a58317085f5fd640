"""Noise-prediction loss, triplet loss over instruction branches, and their gate.

Distances are the mean of squared differences per sample, then averaged over
the batch. With the mean convention the default margin (5e-3) does not depend
on image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import InvalidRangeError, ShapeMismatchError


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 5e-3
    weight: float = 1.0
    activation_step: int = 2000

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidRangeError(f"margin must be >= 0, got {self.margin}")
        if self.weight < 0:
            raise InvalidRangeError(f"weight must be >= 0, got {self.weight}")
        if self.activation_step < 0:
            raise InvalidRangeError("activation_step must be >= 0")


def _same_shape(*tensors):
    shape = tuple(tensors[0].shape)
    for other in tensors[1:]:
        if tuple(other.shape) != shape:
            raise ShapeMismatchError(
                f"shape mismatch: {shape} vs {tuple(other.shape)}"
            )


def per_sample_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all non-batch axes; shape ``(batch,)``."""
    _same_shape(a, b)
    diff = (a - b).reshape(a.shape[0], -1) if a.ndim > 1 else (a - b).reshape(1, -1)
    return diff.pow(2).mean(dim=1)


def pairwise_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance, mean-reduced.

    1-D inputs are a single sample. For batched inputs the per-sample means are
    averaged, which equals the global mean when samples share a shape.
    """
    _same_shape(a, b)
    if a.ndim <= 1:
        return (a - b).pow(2).mean()
    return per_sample_distance(a, b).mean()


def diffusion_loss(eps_hat: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    return pairwise_distance(eps_true, eps_hat)


def triplet_terms(eps_true, eps_pos, eps_neg, cfg: TripletConfig):
    """Per-sample hinge values plus the positive and negative distances."""
    _same_shape(eps_true, eps_pos, eps_neg)
    if eps_true.ndim <= 1:
        d_pos = (eps_true - eps_pos).pow(2).mean().reshape(1)
        d_neg = (eps_true - eps_neg).pow(2).mean().reshape(1)
    else:
        d_pos = per_sample_distance(eps_true, eps_pos)
        d_neg = per_sample_distance(eps_true, eps_neg)
    # relu has zero subgradient at the kink
    hinge = torch.relu(d_pos - d_neg + cfg.margin)
    return hinge, d_pos, d_neg


def triplet_loss(eps_true: torch.Tensor, eps_pos: torch.Tensor,
                 eps_neg: torch.Tensor, cfg: TripletConfig) -> torch.Tensor:
    hinge, _, _ = triplet_terms(eps_true, eps_pos, eps_neg, cfg)
    return hinge.mean()


def triplet_gate(cfg: TripletConfig, step: int) -> bool:
    if step < 0:
        raise InvalidRangeError(f"step must be >= 0, got {step}")
    return step >= cfg.activation_step


def total_loss(l_train, l_triplet, cfg: TripletConfig, step: int):
    if triplet_gate(cfg, step):
        return l_train + cfg.weight * l_triplet
    return l_train
