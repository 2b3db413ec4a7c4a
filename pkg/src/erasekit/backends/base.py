"""Contract shared by every diffusion backend.

A backend bundles the pieces the trainer and evaluator need: a text
encoder with constant (L, d) output, an image-to-latent encoder, a
cumulative-alpha noise schedule, a denoiser reachable both as a frozen
snapshot and as the live trainable module, and prompt-conditional
sampling.
"""

from __future__ import annotations

import abc
from typing import Sequence

import numpy as np
import torch

from ..errors import BackendContractError


class DiffusionBackend(abc.ABC):
    """Minimal surface the erasure pipeline is written against."""

    dtype: torch.dtype

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of one latent."""

    @property
    @abc.abstractmethod
    def alphas_cumprod(self) -> Sequence[float]:
        """Cumulative alpha table, length T, entries in (0, 1], non-increasing."""

    @abc.abstractmethod
    def encode_text(self, prompt: str) -> torch.Tensor:
        """Raw (unnormalized) prompt embedding of shape (L, d)."""

    @abc.abstractmethod
    def encode_image(self, image) -> torch.Tensor:
        """Latent of shape (C, H, W) for one image."""

    @abc.abstractmethod
    def denoise(self, latent: torch.Tensor, timestep, embedding: torch.Tensor) -> torch.Tensor:
        """Noise prediction of the live denoiser, same shape as latent."""

    @abc.abstractmethod
    def snapshot(self):
        """Frozen value-copy of the current denoiser weights."""

    @abc.abstractmethod
    def trainable(self) -> torch.nn.Module:
        """The live, mutable denoiser module."""

    @abc.abstractmethod
    def make_denoiser(self, state_dict: dict | None = None) -> torch.nn.Module:
        """Fresh denoiser instance, optionally loaded from checkpoint weights."""

    @abc.abstractmethod
    def sample_with(
        self, denoiser, prompt: str, rng: np.random.Generator, n: int = 1
    ) -> np.ndarray:
        """Generate n images conditioned on prompt using a given denoiser."""

    @abc.abstractmethod
    def sample(self, prompt: str, seed: int) -> np.ndarray:
        """Generate one image with the backend's own denoiser."""

    @property
    def num_timesteps(self) -> int:
        return len(self.alphas_cumprod)


def check_contract(backend: DiffusionBackend, probe_prompts: Sequence[str] = ("a", "b c")) -> None:
    """Assert the backend honors its shape and schedule contracts.

    Runs identically against the toy backend and any external adapter;
    raises BackendContractError on the first violation.
    """
    shapes = [tuple(backend.encode_text(p).shape) for p in probe_prompts]
    if len(set(shapes)) != 1:
        raise BackendContractError(f"encode_text shape varies across prompts: {shapes}")
    schedule = np.asarray(list(backend.alphas_cumprod), dtype=np.float64)
    if schedule.ndim != 1 or len(schedule) < 1:
        raise BackendContractError("schedule must be a nonempty 1-D table")
    if not ((schedule > 0.0) & (schedule <= 1.0)).all():
        raise BackendContractError("schedule entries must lie in (0, 1]")
    if (np.diff(schedule) > 0).any():
        raise BackendContractError("schedule must be non-increasing in t")
    c, h, w = backend.latent_shape
    latent = torch.zeros(1, c, h, w, dtype=backend.dtype)
    emb = backend.encode_text(probe_prompts[0]).unsqueeze(0)
    pred = backend.denoise(latent, 0, emb)
    if tuple(pred.shape) != tuple(latent.shape):
        raise BackendContractError(
            f"denoise output shape {tuple(pred.shape)} != latent shape {tuple(latent.shape)}"
        )
    frozen = backend.snapshot()
    before = {k: v.clone() for k, v in frozen.state_dict().items()}
    saved = [p.detach().clone() for p in backend.trainable().parameters()]
    with torch.no_grad():
        for p in backend.trainable().parameters():
            p.add_(0.125)
    after = frozen.state_dict()
    try:
        for key, value in before.items():
            if not torch.equal(value, after[key]):
                raise BackendContractError("snapshot aliases trainable storage")
    finally:
        with torch.no_grad():
            for p, original in zip(backend.trainable().parameters(), saved):
                p.copy_(original)
