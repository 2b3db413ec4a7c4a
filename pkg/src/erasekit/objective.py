"""Negative-guidance erasure target and training loss.

The frozen denoiser supplies a classifier-free-guidance reference that
points away from the target concept:

    target = eps(z, t, empty) - gamma * (eps(z, t, e_c) - eps(z, t, empty))

and the trainable denoiser is regressed onto that target with a squared
error. The target never carries gradients; the prediction side
back-propagates into both the trainable denoiser and, through the fused
latent, the fusion transformer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import BackendContractError
from .fusion import FusedLatent


@dataclass
class GuidanceSpec:
    """Suppression strength and the empty-prompt embedding."""

    gamma: float
    uncond_embedding: torch.Tensor  # (L, d), normalized like bank entries


@dataclass
class NoisePredictionPair:
    trainable_pred: torch.Tensor
    target: torch.Tensor

    def __post_init__(self):
        if self.trainable_pred.shape != self.target.shape:
            raise BackendContractError(
                f"prediction shape {tuple(self.trainable_pred.shape)} != target shape {tuple(self.target.shape)}"
            )


def _batched_embedding(embedding: torch.Tensor, batch: int) -> torch.Tensor:
    if embedding.dim() == 2:
        return embedding.unsqueeze(0).expand(batch, -1, -1)
    return embedding


def build_target(
    frozen_model,
    z_fused: FusedLatent,
    timestep: int,
    concept_embedding: torch.Tensor,
    spec: GuidanceSpec,
) -> torch.Tensor:
    """Frozen-model CFG reference; exactly two forward passes, no grads.

    gamma = 0 degenerates to the unconditional prediction.
    """
    batch = z_fused.values.shape[0]
    cond = _batched_embedding(concept_embedding, batch)
    uncond = _batched_embedding(spec.uncond_embedding.to(concept_embedding.dtype), batch)
    with torch.no_grad():
        pred_uncond = frozen_model(z_fused.values, timestep, uncond)
        pred_cond = frozen_model(z_fused.values, timestep, cond)
    if pred_uncond.shape != pred_cond.shape:
        raise BackendContractError(
            f"conditional/unconditional prediction shapes differ: {tuple(pred_cond.shape)} vs {tuple(pred_uncond.shape)}"
        )
    if spec.gamma == 0.0:
        return pred_uncond.detach()
    target = pred_uncond - spec.gamma * (pred_cond - pred_uncond)
    return target.detach()


def erasure_loss(
    trainable_model,
    z_fused: FusedLatent,
    timestep: int,
    concept_embedding: torch.Tensor,
    target: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Squared error between the trainable prediction and the target.

    reduction "mean" averages over elements (batch-size independent);
    "sum" gives the raw squared norm.
    """
    batch = z_fused.values.shape[0]
    cond = _batched_embedding(concept_embedding, batch)
    pred = trainable_model(z_fused.values, timestep, cond)
    pair = NoisePredictionPair(trainable_pred=pred, target=target)
    sq = (pair.trainable_pred - pair.target) ** 2
    if reduction == "sum":
        return sq.sum()
    if reduction == "mean":
        return sq.mean()
    raise BackendContractError(f"unknown loss reduction {reduction!r}")
