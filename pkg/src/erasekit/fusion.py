"""Multi-scale tokenization and transformer fusion of noised image latents.

A latent grid (B, C, H, W) is resized to each scale in a scale set,
flattened row-major into token sequences of width C, and concatenated
with the full-resolution block first. Sinusoidal positions over the whole
concatenated sequence are added, a small pre-norm transformer encoder
mixes the scales, and the first H*W output tokens are merged back into
the latent through a residual connection weighted by a scalar.

The transformer's final projection is zero-initialized, so an untrained
fusion branch is exactly the identity on the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackendContractError, ConfigurationError, ContractError
from .params import deterministic_init_


@dataclass
class LatentGrid:
    """A noised image latent plus the timestep it was noised to."""

    values: torch.Tensor  # (B, C, H, W)
    timestep: int
    source_id: str = ""

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ConfigurationError(f"latent must be (B, C, H, W), got {tuple(self.values.shape)}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class ScaleSet:
    """Ordered resize factors; 1.0 leads so full-resolution tokens sit at
    the sequence head."""

    scales: tuple[float, ...] = (1.0, 0.75, 0.5)

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if len(scales) == 0:
            raise ConfigurationError("scale set must be nonempty")
        if scales[0] != 1.0:
            raise ConfigurationError(f"scale set must start at 1.0, got {scales[0]}")
        for s in scales:
            if not 0.0 < s <= 1.0:
                raise ConfigurationError(f"scales must lie in (0, 1], got {s}")
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ConfigurationError(f"scales must be strictly decreasing, got {scales}")
        self.scales = scales

    def grid_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [
            (max(1, round(height * s)), max(1, round(width * s)))
            for s in self.scales
        ]


@dataclass
class TokenSequence:
    """Concatenated multi-scale tokens of shape (B, N, C)."""

    tokens: torch.Tensor
    per_scale_lengths: list[int]
    positional_added: bool = False

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class FusedLatent:
    """Residual merge of the fused tokens back into the latent."""

    values: torch.Tensor  # same (B, C, H, W) as the input latent
    lambda_used: float


def make_multiscale_tokens(z: LatentGrid, scales: ScaleSet) -> TokenSequence:
    """Resize the latent to every scale and flatten to one token sequence.

    Scale 1.0 is passed through untouched, so the head block of the
    sequence is exactly flatten(z) and reshaping it back recovers z.
    Other scales use bilinear interpolation without antialiasing.
    """
    values = z.values
    h, w = z.spatial
    tokens = []
    lengths = []
    for scale, (hs, ws) in zip(scales.scales, scales.grid_sizes(h, w)):
        if hs < 1 or ws < 1:
            raise ConfigurationError(f"scale {scale} collapses the {h}x{w} grid")
        if scale == 1.0:
            resized = values
        else:
            resized = F.interpolate(values, size=(hs, ws), mode="bilinear", align_corners=False)
        tokens.append(resized.flatten(2).transpose(1, 2))  # (B, Hs*Ws, C)
        lengths.append(hs * ws)
    return TokenSequence(
        tokens=torch.cat(tokens, dim=1),
        per_scale_lengths=lengths,
        positional_added=False,
    )


def sinusoid_table(n_positions: int, channels: int, dtype=torch.float64) -> torch.Tensor:
    """Interleaved sin/cos table of shape (1, n_positions, channels).

    Entry (pos, 2i) = sin(pos / 10000^(2i/C)) and (pos, 2i+1) the matching
    cos, indexed by absolute position over the whole concatenated
    sequence. Deterministic in (N, C).
    """
    position = torch.arange(n_positions, dtype=dtype).unsqueeze(1)
    pair_index = torch.arange(0, channels, 2, dtype=dtype)
    rates = torch.pow(10000.0, -pair_index / channels)
    angles = position * rates  # (N, ceil(C/2))
    table = torch.zeros(n_positions, channels, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : channels // 2])
    return table.unsqueeze(0)


def add_positional(tokens: TokenSequence) -> TokenSequence:
    """Add the fixed sinusoidal table to a token sequence, once."""
    if tokens.positional_added:
        raise ContractError("positional embeddings were already added to this sequence")
    table = sinusoid_table(tokens.length, tokens.tokens.shape[2], dtype=tokens.tokens.dtype)
    return TokenSequence(
        tokens=tokens.tokens + table.to(tokens.tokens.device),
        per_scale_lengths=list(tokens.per_scale_lengths),
        positional_added=True,
    )


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"model_dim {dim} must be divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: float):
        super().__init__()
        hidden = max(1, int(round(dim * ffn_ratio)))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


class FusionTransformer(nn.Module):
    """Pre-norm transformer encoder over multi-scale tokens.

    model_dim equals the latent channel count; sequence length is
    preserved. The output projection starts at zero so the fusion branch
    contributes nothing until trained.
    """

    def __init__(self, model_dim: int, depth: int = 2, heads: int = 4, ffn_ratio: float = 4.0):
        super().__init__()
        if depth < 1 or heads < 1:
            raise ConfigurationError("fusion transformer needs depth >= 1 and heads >= 1")
        self.model_dim = model_dim
        self.depth = depth
        self.heads = heads
        self.ffn_ratio = ffn_ratio
        self.blocks = nn.ModuleList(_EncoderBlock(model_dim, heads, ffn_ratio) for _ in range(depth))
        self.out_proj = nn.Linear(model_dim, model_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for block in self.blocks:
            x = block(x)
        return self.out_proj(x)

    def init_parameters(self, rng: np.random.Generator) -> None:
        """Deterministic re-init from an explicit stream; the output
        projection stays zero."""
        deterministic_init_(self, rng, zero_prefixes=("out_proj",))


def fuse(
    z: LatentGrid,
    tokens: TokenSequence,
    transformer: FusionTransformer,
    lam: float,
) -> FusedLatent:
    """Run the transformer, fold the head block back to a grid, and merge.

    Returns z + lam * fused where fused is the first H*W output tokens
    reshaped row-major to (B, C, H, W). Gradients flow into the
    transformer parameters.
    """
    if not tokens.positional_added:
        raise ContractError("add_positional must run before fuse")
    if transformer.model_dim != z.channels:
        raise ConfigurationError(
            f"transformer model_dim {transformer.model_dim} != latent channels {z.channels}"
        )
    h, w = z.spatial
    if tokens.length < h * w:
        raise ContractError(f"sequence length {tokens.length} shorter than H*W = {h * w}")
    out = transformer(tokens.tokens)
    if out.shape[1] != tokens.length:
        raise BackendContractError("fusion transformer changed the sequence length")
    head = out[:, : h * w, :]  # (B, H*W, C)
    fused = head.transpose(1, 2).reshape(z.values.shape[0], z.channels, h, w)
    return FusedLatent(values=z.values + lam * fused, lambda_used=float(lam))


def tokens_to_grid(tokens: TokenSequence, height: int, width: int) -> torch.Tensor:
    """Reshape the scale-1.0 head block back to (B, C, H, W)."""
    head = tokens.tokens[:, : height * width, :]
    return head.transpose(1, 2).reshape(tokens.tokens.shape[0], -1, height, width)


def noise_latent(
    clean_latent: torch.Tensor,
    timestep: int,
    scheduler,
    rng: np.random.Generator,
    source_id: str = "",
) -> LatentGrid:
    """Forward-diffuse a clean latent to a timestep of the schedule.

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps with eps standard
    normal from the supplied stream. The scheduler handle is anything with
    an alphas_cumprod sequence (or a bare sequence of cumulative alphas).
    """
    table = getattr(scheduler, "alphas_cumprod", scheduler)
    n_steps = len(table)
    if not 0 <= timestep < n_steps:
        raise ConfigurationError(f"timestep {timestep} outside schedule range [0, {n_steps})")
    abar = float(table[timestep])
    eps = torch.as_tensor(
        rng.standard_normal(size=tuple(clean_latent.shape)), dtype=clean_latent.dtype
    )
    values = math.sqrt(abar) * clean_latent + math.sqrt(1.0 - abar) * eps
    return LatentGrid(values=values, timestep=timestep, source_id=source_id)
