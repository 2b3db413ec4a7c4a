"""Self-contained toy diffusion stack for desk-scale verification.

A miniature world of 16x16 grayscale images showing one of three shapes
(square, circle, triangle) in a few sizes. Latents are 1x8x8 via a fixed
average-pool encoder with a matching unpool decoder; prompts are encoded
by hashing words to fixed Gaussian vectors; the denoiser is a small
FiLM-conditioned conv net trained with the usual DDPM objective plus
classifier-free dropout. Everything is float64 and driven by explicit
numpy streams, so runs are reproducible bit for bit.

Pretrained weights are cached on disk under a content-hash file name and
only retrained when the seed or configuration changes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, ToyPretrainError
from ..evaluation import ClassifierVerdict
from ..fusion import sinusoid_table
from ..manifold import layer_norm_tokens
from ..params import deterministic_init_
from ..rng import derive_rng, hash_json, hash_state_dict
from .base import DiffusionBackend

CONCEPTS = ("square", "circle", "triangle")
BLANK_LABEL = "blank"
BACKGROUND, FOREGROUND = 0.1, 0.9

PROMPT_TEMPLATES = (
    "{c}",
    "a photo of {c}",
    "a {c} on a plain background",
    "an image of {c}",
    "a small {c}",
)


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 16
    latent_size: int = 8
    text_len: int = 8
    text_dim: int = 32
    hidden: int = 64
    cond_dim: int = 64
    time_dim: int = 16
    timesteps: int = 50
    beta_start: float = 1e-4
    # With only 50 steps, beta must rise well past the usual 0.02 so the
    # terminal cumulative alpha (~2e-4) actually destroys the signal;
    # otherwise sampling from pure noise starts far out of distribution.
    beta_end: float = 0.3
    pretrain_steps: int = 3000
    pretrain_batch: int = 32
    pretrain_lr: float = 2e-3
    p_uncond: float = 0.15
    guidance_scale: float = 4.0
    gate_threshold: float = 0.9
    gate_samples: int = 100
    max_extra_rounds: int = 2


def concept_image(concept: str, variant: int, size: int = 16) -> np.ndarray:
    """Deterministic clean image of one concept variant, values in [0, 1]."""
    img = np.full((size, size), BACKGROUND)
    center = (size - 1) / 2.0
    if concept == "square":
        side = (9, 11, 13)[variant % 3]
        off = (size - side) // 2
        img[off : off + side, off : off + side] = FOREGROUND
    elif concept == "circle":
        radius = (2.6, 3.4, 4.2)[variant % 3]
        yy, xx = np.mgrid[0:size, 0:size]
        img[(yy - center) ** 2 + (xx - center) ** 2 <= radius**2] = FOREGROUND
    elif concept == "triangle":
        height = (8, 10, 12)[variant % 3]
        top = (size - height) // 2
        for row in range(height):
            half = row * (height // 2) / max(1, height - 1)
            c0 = int(math.ceil(center - half))
            c1 = int(math.floor(center + half))
            img[top + row, c0 : c1 + 1] = FOREGROUND
    else:
        raise ConfigurationError(f"unknown toy concept {concept!r}; expected one of {CONCEPTS}")
    return img


def concept_prompts(concept: str) -> list[str]:
    return [t.format(c=concept) for t in PROMPT_TEMPLATES]


def _word_vector(word: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    rng = np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:8], "little")))
    return rng.standard_normal(dim)


class HashTextEncoder:
    """Word-hash text encoder with constant (L, d) output.

    Each word maps to a fixed Gaussian vector; prompts are truncated or
    padded with a dedicated pad vector. Doubles as the synthetic encoder
    for manifold diagnostics: prompts sharing a concept word share that
    token's vector while their modifier tokens average out under convex
    mixing.
    """

    def __init__(self, seq_len: int = 8, dim: int = 16, dtype: torch.dtype = torch.float64):
        self.seq_len = seq_len
        self.dim = dim
        self.dtype = dtype
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, word: str) -> np.ndarray:
        if word not in self._cache:
            self._cache[word] = _word_vector(word, self.dim)
        return self._cache[word]

    def encode_text(self, prompt: str) -> torch.Tensor:
        words = prompt.lower().split()[: self.seq_len]
        rows = [self._vector(w) for w in words]
        rows += [self._vector("<pad>")] * (self.seq_len - len(rows))
        return torch.as_tensor(np.stack(rows), dtype=self.dtype)


class SyntheticVariationEncoder(HashTextEncoder):
    """Hash encoder that mimics a contextual sentence encoder.

    The first word keeps its pure hash vector; every following word
    blends that leading-concept direction (weight `relatedness`) with its
    own hash direction; padding positions repeat the sentence mean, the
    way contextual encoders' post-EOS tokens carry sentence semantics.
    Used for manifold diagnostics where the bank-size similarity curve
    depends on prompt variations staying adjacent to their concept.
    """

    def __init__(
        self,
        seq_len: int = 8,
        dim: int = 32,
        relatedness: float = 0.4,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__(seq_len, dim, dtype)
        if not 0.0 <= relatedness < 1.0:
            raise ConfigurationError(f"relatedness must lie in [0, 1), got {relatedness}")
        self.relatedness = relatedness

    def encode_text(self, prompt: str) -> torch.Tensor:
        words = prompt.lower().split()[: self.seq_len]
        if not words:
            return super().encode_text(prompt)
        alpha = self.relatedness
        beta = math.sqrt(1.0 - alpha**2)
        concept_vec = self._vector(words[0])
        rows = [concept_vec]
        rows += [alpha * concept_vec + beta * self._vector(w) for w in words[1:]]
        sentence_mean = np.mean(rows, axis=0)
        rows += [sentence_mean] * (self.seq_len - len(rows))
        return torch.as_tensor(np.stack(rows), dtype=self.dtype)


class ToyDenoiser(nn.Module):
    """Conv net predicting noise on 1x8x8 latents, conditioned through a
    single cross-attention read over the prompt tokens.

    A learned query attends over per-token keys, so near-orthogonal
    concept tokens route to near-orthogonal conditioning vectors; that
    token selectivity is what lets concept-targeted fine-tuning leave
    other concepts mostly untouched.
    """

    def __init__(self, config: ToyConfig):
        super().__init__()
        cfg = config
        self.conv_in = nn.Conv2d(1, cfg.hidden, 3, padding=1)
        self.conv_mid1 = nn.Conv2d(cfg.hidden, cfg.hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(cfg.hidden, cfg.hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(cfg.hidden, 1, 3, padding=1)
        self.time_proj = nn.Linear(cfg.time_dim, cfg.cond_dim)
        self.attn_query = nn.Parameter(torch.zeros(1, cfg.cond_dim))
        self.attn_key = nn.Linear(cfg.text_dim, cfg.cond_dim)
        self.attn_value = nn.Linear(cfg.text_dim, cfg.cond_dim)
        self.film1 = nn.Linear(cfg.cond_dim, cfg.hidden * 2)
        self.film2 = nn.Linear(cfg.cond_dim, cfg.hidden * 2)
        table = sinusoid_table(cfg.timesteps, cfg.time_dim, dtype=torch.float64)[0]
        self.register_buffer("time_table", table, persistent=False)
        self.double()

    def read_tokens(self, embedding: torch.Tensor) -> torch.Tensor:
        keys = self.attn_key(embedding)  # (B, L, cond)
        values = self.attn_value(embedding)
        # Unscaled logits keep the softmax sharp enough to single out the
        # discriminative token.
        logits = keys @ self.attn_query[0]
        weights = logits.softmax(dim=-1)  # (B, L)
        return (weights.unsqueeze(-1) * values).sum(dim=1)

    def forward(self, latent: torch.Tensor, timestep, embedding: torch.Tensor) -> torch.Tensor:
        batch = latent.shape[0]
        if isinstance(timestep, (int, np.integer)):
            t_idx = torch.full((batch,), int(timestep), dtype=torch.long)
        else:
            t_idx = torch.as_tensor(timestep, dtype=torch.long).reshape(-1)
        tvec = self.time_table[t_idx]
        cond = F.silu(self.time_proj(tvec) + self.read_tokens(embedding))
        h = F.silu(self.conv_in(latent))
        for film, conv in ((self.film1, self.conv_mid1), (self.film2, self.conv_mid2)):
            scale, shift = film(cond).chunk(2, dim=-1)
            h = F.silu(conv(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None])
        return self.conv_out(h)


def _block_pooled(image: np.ndarray) -> np.ndarray:
    """2x2 block-average then nearest upsample; the coarse view a pooling
    autoencoder can actually reproduce."""
    h, w = image.shape
    pooled = image.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return pooled.repeat(2, axis=0).repeat(2, axis=1)


class ToyClassifier:
    """Nearest-template concept classifier over the toy image world.

    Similarity to a label is exp(-sharpness * min-MSE) against that
    label's templates (each shape in both crisp and block-pooled form, so
    decoder-blocky generations are matched fairly); a concept is present
    when its similarity strictly beats every distractor. Fully
    deterministic.
    """

    classifier_id = "toy-template-nearest"

    def __init__(self, sharpness: float = 8.0, size: int = 16):
        self.sharpness = sharpness
        self.templates: dict[str, list[np.ndarray]] = {}
        for concept in CONCEPTS:
            crisp = [concept_image(concept, v, size) for v in range(3)]
            self.templates[concept] = crisp + [_block_pooled(t) for t in crisp]
        self.templates[BLANK_LABEL] = [np.full((size, size), level) for level in (0.1, 0.5, 0.9)]

    def label_score(self, image: np.ndarray, label: str) -> float:
        if label not in self.templates:
            raise ConfigurationError(f"toy classifier has no templates for label {label!r}")
        image = np.asarray(image, dtype=np.float64)
        mse = min(float(np.mean((image - t) ** 2)) for t in self.templates[label])
        return math.exp(-self.sharpness * mse)

    def classify(self, image, target_label, distractor_labels, image_id: str = "") -> ClassifierVerdict:
        labels = [target_label, *distractor_labels]
        scores = {label: self.label_score(image, label) for label in labels}
        ranking = sorted(labels, key=lambda lb: (-scores[lb], lb))
        present = all(scores[target_label] > scores[d] for d in distractor_labels)
        return ClassifierVerdict(
            image_id=image_id,
            concept_present=present,
            score=scores[target_label],
            label_ranking=ranking,
        )


class ToyFilter:
    """Reference-image filter: accept when the concept score clears a bar."""

    def __init__(self, classifier: ToyClassifier | None = None):
        self.classifier = classifier or ToyClassifier()
        self.classifier_id = self.classifier.classifier_id

    def score(self, image, concept: str) -> float:
        return self.classifier.label_score(image, concept)


class ToyBackend(DiffusionBackend):
    """Toy diffusion backend satisfying the full backend contract."""

    def __init__(self, seed: int, config: ToyConfig | None = None):
        self.seed = int(seed)
        self.config = config or ToyConfig()
        cfg = self.config
        self.dtype = torch.float64
        self.encoder = HashTextEncoder(cfg.text_len, cfg.text_dim, self.dtype)
        self.betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps)
        self.alphas = 1.0 - self.betas
        self._alphas_cumprod = np.cumprod(self.alphas)
        self._denoiser = ToyDenoiser(cfg)
        deterministic_init_(self._denoiser, derive_rng(self.seed, "toy-init"))
        self.guidance_scale = cfg.guidance_scale
        self.pretrain_info: dict = {}

    # -- contract surface ---------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.config.latent_size
        return (1, s, s)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return self._alphas_cumprod

    def encode_text(self, prompt: str) -> torch.Tensor:
        return self.encoder.encode_text(prompt)

    def encode_image(self, image) -> torch.Tensor:
        arr = np.asarray(image)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        tens = torch.as_tensor(arr, dtype=self.dtype).reshape(
            1, 1, self.config.image_size, self.config.image_size
        )
        pooled = F.avg_pool2d(tens, kernel_size=2)
        return (pooled * 2.0 - 1.0)[0]

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        grid = latent.reshape(1, self.config.latent_size, self.config.latent_size)
        img = grid.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
        img = ((img + 1.0) / 2.0).clamp(0.0, 1.0)
        return img[0].detach().cpu().numpy()

    def denoise(self, latent, timestep, embedding) -> torch.Tensor:
        return self._denoiser(latent, timestep, embedding)

    def snapshot(self) -> ToyDenoiser:
        frozen = copy.deepcopy(self._denoiser)
        frozen.requires_grad_(False)
        frozen.eval()
        return frozen

    def trainable(self) -> ToyDenoiser:
        return self._denoiser

    def make_denoiser(self, state_dict: dict | None = None) -> ToyDenoiser:
        denoiser = ToyDenoiser(self.config)
        denoiser.load_state_dict(state_dict if state_dict is not None else self._denoiser.state_dict())
        denoiser.requires_grad_(False)
        denoiser.eval()
        return denoiser

    def conditioning_param_patterns(self) -> tuple[str, ...]:
        return ("attn_", "film")

    # -- sampling -----------------------------------------------------------

    def _normalized_embedding(self, prompt: str) -> torch.Tensor:
        return layer_norm_tokens(self.encode_text(prompt))

    def sample_with(self, denoiser, prompt: str, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Ancestral DDPM sampling with classifier-free guidance."""
        cfg = self.config
        size = cfg.latent_size
        cond = self._normalized_embedding(prompt).unsqueeze(0).expand(n, -1, -1)
        uncond = self._normalized_embedding("").unsqueeze(0).expand(n, -1, -1)
        g = self.guidance_scale
        both = torch.cat([cond, uncond], dim=0)
        with torch.no_grad():
            z = torch.as_tensor(rng.standard_normal((n, 1, size, size)), dtype=self.dtype)
            for t in reversed(range(cfg.timesteps)):
                if g == 1.0:
                    eps = denoiser(z, t, cond)
                else:
                    pred = denoiser(torch.cat([z, z], dim=0), t, both)
                    eps_c, eps_u = pred[:n], pred[n:]
                    eps = eps_u + g * (eps_c - eps_u)
                abar = self._alphas_cumprod[t]
                mean = (z - self.betas[t] / math.sqrt(1.0 - abar) * eps) / math.sqrt(self.alphas[t])
                if t > 0:
                    abar_prev = self._alphas_cumprod[t - 1]
                    var = self.betas[t] * (1.0 - abar_prev) / (1.0 - abar)
                    noise = torch.as_tensor(rng.standard_normal(tuple(z.shape)), dtype=self.dtype)
                    z = mean + math.sqrt(var) * noise
                else:
                    z = mean
        return np.stack([self.decode_latent(z[i]) for i in range(n)])

    def sample(self, prompt: str, seed: int) -> np.ndarray:
        rng = derive_rng(seed, "toy-sample")
        return self.sample_with(self._denoiser, prompt, rng, n=1)[0]

    # -- fingerprints ---------------------------------------------------------

    def denoiser_hash(self) -> str:
        return hash_state_dict(self._denoiser.state_dict())


def _training_embeddings(backend: ToyBackend) -> dict[tuple[str, int] | str, torch.Tensor]:
    table: dict = {"": layer_norm_tokens(backend.encode_text(""))}
    for concept in CONCEPTS:
        for ti, prompt in enumerate(concept_prompts(concept)):
            table[(concept, ti)] = layer_norm_tokens(backend.encode_text(prompt))
    return table


def _gate_report(backend: ToyBackend, seed: int) -> dict:
    """Conditional-sampling accuracy per concept under the toy classifier."""
    classifier = ToyClassifier()
    cfg = backend.config
    report = {}
    for concept in CONCEPTS:
        rng = derive_rng(seed, "toy-gate", concept)
        images = backend.sample_with(
            backend.trainable(), f"a photo of {concept}", rng, n=cfg.gate_samples
        )
        distractors = [c for c in CONCEPTS if c != concept] + [BLANK_LABEL]
        hits = sum(
            classifier.classify(img, concept, distractors).concept_present for img in images
        )
        report[concept] = hits / cfg.gate_samples
    return report


def _pretrain(backend: ToyBackend, seed: int) -> dict:
    cfg = backend.config
    rng = derive_rng(seed, "toy-pretrain")
    denoiser = backend.trainable()
    denoiser.train()
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=cfg.pretrain_lr)
    embeddings = _training_embeddings(backend)
    latents = {
        (c, v): backend.encode_image(concept_image(c, v, cfg.image_size))
        for c in CONCEPTS
        for v in range(3)
    }
    abar = torch.as_tensor(backend.alphas_cumprod, dtype=backend.dtype)
    n_templates = len(PROMPT_TEMPLATES)

    def run_steps(n_steps: int) -> float:
        last = float("nan")
        for _ in range(n_steps):
            c_idx = rng.integers(0, len(CONCEPTS), size=cfg.pretrain_batch)
            v_idx = rng.integers(0, 3, size=cfg.pretrain_batch)
            t_idx = rng.integers(0, n_templates, size=cfg.pretrain_batch)
            drop = rng.random(cfg.pretrain_batch) < cfg.p_uncond
            t = rng.integers(0, cfg.timesteps, size=cfg.pretrain_batch)
            eps = torch.as_tensor(
                rng.standard_normal((cfg.pretrain_batch, 1, cfg.latent_size, cfg.latent_size)),
                dtype=backend.dtype,
            )
            x0 = torch.stack(
                [latents[(CONCEPTS[c], int(v))] for c, v in zip(c_idx, v_idx)]
            )
            a = abar[torch.as_tensor(t, dtype=torch.long)].reshape(-1, 1, 1, 1)
            z_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
            emb = torch.stack(
                [
                    embeddings[""] if d else embeddings[(CONCEPTS[c], int(ti))]
                    for c, ti, d in zip(c_idx, t_idx, drop)
                ]
            )
            pred = denoiser(z_t, t, emb)
            loss = F.mse_loss(pred, eps)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            last = float(loss.detach())
        return last

    last_loss = run_steps(cfg.pretrain_steps)
    rounds = 0
    while True:
        report = _gate_report(backend, seed)
        if all(acc >= cfg.gate_threshold for acc in report.values()):
            denoiser.eval()
            return {"gate": report, "final_loss": last_loss, "extra_rounds": rounds}
        rounds += 1
        if rounds > cfg.max_extra_rounds:
            raise ToyPretrainError(
                f"toy pretraining missed the sample-quality gate after {rounds - 1} extra rounds",
                diagnostics={"gate": report, "final_loss": last_loss},
            )
        last_loss = run_steps(cfg.pretrain_steps // 2)


def default_cache_dir() -> Path:
    env = os.environ.get("ERASEKIT_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "erasekit"


def pretrain_toy(
    seed: int,
    cache_dir: str | Path | None = None,
    config: ToyConfig | None = None,
    force: bool = False,
) -> ToyBackend:
    """Build (or load from cache) a pretrained toy backend for a seed.

    Training runs until conditional samples of every concept pass the
    classifier gate; the resulting weights are cached under a
    content-hash file name so identical seeds reuse identical weights.
    """
    torch.set_num_threads(1)  # keeps tiny-tensor reductions bit-reproducible
    cfg = config or ToyConfig()
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    key = hash_json({"seed": int(seed), "config": asdict(cfg), "format": 2})[:16]
    path = cache / f"toy-{key}.pt"
    backend = ToyBackend(seed, cfg)
    if path.exists() and not force:
        blob = torch.load(path, weights_only=False)
        backend.trainable().load_state_dict(blob["denoiser"])
        backend.trainable().eval()
        backend.pretrain_info = blob.get("metadata", {})
        return backend
    started = time.time()
    diagnostics = _pretrain(backend, seed)
    diagnostics["elapsed_seconds"] = time.time() - started
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    metadata = {
        "seed": int(seed),
        "config": asdict(cfg),
        "diagnostics": json.loads(json.dumps(diagnostics)),
        "weights_hash": backend.denoiser_hash(),
    }
    torch.save({"denoiser": backend.trainable().state_dict(), "metadata": metadata}, tmp)
    tmp.replace(path)
    backend.pretrain_info = metadata
    return backend
