"""Adapter wrapping an external pretrained latent diffusion model.

The locator is a local path or hub identifier of a Stable-Diffusion-style
model directory (tokenizer, text_encoder, vae, unet, scheduler). Loading
verifies every sub-component before anything is wrapped; a missing piece
raises a descriptive error and leaves no partial state. The heavyweight
libraries are imported lazily so the rest of the toolkit works without
the 'sd' extra installed.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import numpy as np
import torch

from ..errors import BackendLoadError
from ..manifold import layer_norm_tokens
from ..rng import derive_rng
from .base import DiffusionBackend

_REQUIRED_PARTS = ("tokenizer", "text_encoder", "vae", "unet", "scheduler")


class ExternalBackend(DiffusionBackend):
    """BackendContract view over diffusers/transformers components."""

    def __init__(self, tokenizer, text_encoder, vae, unet, scheduler, dtype=torch.float32):
        self.tokenizer = tokenizer
        self.text_encoder = text_encoder
        self.vae = vae
        self.unet = unet
        self.scheduler = scheduler
        self.dtype = dtype
        self.guidance_scale = 7.5
        self.text_encoder.requires_grad_(False)
        self.vae.requires_grad_(False)
        self._abar = np.asarray(scheduler.alphas_cumprod, dtype=np.float64)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        size = self.unet.config.sample_size
        return (self.unet.config.in_channels, size, size)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return self._abar

    def encode_text(self, prompt: str) -> torch.Tensor:
        tokens = self.tokenizer(
            prompt,
            padding="max_length",
            max_length=self.tokenizer.model_max_length,
            truncation=True,
            return_tensors="pt",
        )
        with torch.no_grad():
            emb = self.text_encoder(tokens.input_ids)[0]
        return emb[0].to(self.dtype)

    def encode_image(self, image) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float32)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        tens = torch.as_tensor(arr).permute(2, 0, 1).unsqueeze(0).to(self.dtype) * 2.0 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(tens).latent_dist
            latent = posterior.mode() * self.vae.config.scaling_factor
        return latent[0]

    def denoise(self, latent, timestep, embedding) -> torch.Tensor:
        t = torch.as_tensor(timestep)
        return self.unet(latent, t, encoder_hidden_states=embedding).sample

    def snapshot(self):
        frozen = copy.deepcopy(self.unet)
        frozen.requires_grad_(False)
        frozen.eval()

        def run(latent, timestep, embedding):
            t = torch.as_tensor(timestep)
            return frozen(latent, t, encoder_hidden_states=embedding).sample

        run.state_dict = frozen.state_dict
        run.module = frozen
        return run

    def trainable(self) -> torch.nn.Module:
        return self.unet

    def make_denoiser(self, state_dict: dict | None = None) -> torch.nn.Module:
        denoiser = copy.deepcopy(self.unet)
        if state_dict is not None:
            denoiser.load_state_dict(state_dict)
        denoiser.requires_grad_(False)
        denoiser.eval()
        return denoiser

    def conditioning_param_patterns(self) -> tuple[str, ...]:
        return ("attn2",)

    def _decode(self, latents: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            images = self.vae.decode(latents / self.vae.config.scaling_factor).sample
        images = ((images + 1.0) / 2.0).clamp(0, 1)
        return images.permute(0, 2, 3, 1).cpu().numpy()

    def sample_with(self, denoiser, prompt: str, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        c, h, w = self.latent_shape
        cond = layer_norm_tokens(self.encode_text(prompt)).unsqueeze(0).expand(n, -1, -1)
        uncond = layer_norm_tokens(self.encode_text("")).unsqueeze(0).expand(n, -1, -1)
        g = self.guidance_scale
        alphas = 1.0 - np.diff(np.concatenate([[1.0], self._abar])) / np.concatenate(
            [[1.0], self._abar[:-1]]
        )
        betas = 1.0 - alphas
        with torch.no_grad():
            z = torch.as_tensor(rng.standard_normal((n, c, h, w)), dtype=self.dtype)
            for t in reversed(range(len(self._abar))):
                if callable(denoiser) and not isinstance(denoiser, torch.nn.Module):
                    eps_c = denoiser(z, t, cond)
                    eps_u = denoiser(z, t, uncond)
                else:
                    tt = torch.as_tensor(t)
                    eps_c = denoiser(z, tt, encoder_hidden_states=cond).sample
                    eps_u = denoiser(z, tt, encoder_hidden_states=uncond).sample
                eps = eps_u + g * (eps_c - eps_u)
                abar = self._abar[t]
                mean = (z - betas[t] / math.sqrt(1.0 - abar) * eps) / math.sqrt(alphas[t])
                if t > 0:
                    var = betas[t] * (1.0 - self._abar[t - 1]) / (1.0 - abar)
                    z = mean + math.sqrt(var) * torch.as_tensor(
                        rng.standard_normal(tuple(z.shape)), dtype=self.dtype
                    )
                else:
                    z = mean
        return self._decode(z)

    def sample(self, prompt: str, seed: int) -> np.ndarray:
        rng = derive_rng(seed, "sd-sample")
        return self.sample_with(self.unet, prompt, rng, n=1)[0]


def adapter_load(model_locator: str, dtype: torch.dtype = torch.float32) -> ExternalBackend:
    """Resolve a locator into a wrapped external backend.

    Fails with a descriptive BackendLoadError when the 'sd' extra is
    missing, the locator does not resolve, or any sub-component cannot be
    loaded; never returns a partial wrap.
    """
    try:
        from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:
        raise BackendLoadError(
            "external backends need the 'sd' extra (pip install erasekit[sd]): " f"{exc}"
        ) from exc

    locator = str(model_locator)
    local = Path(locator)
    if local.exists():
        missing = [part for part in _REQUIRED_PARTS if not (local / part).exists()]
        if missing:
            raise BackendLoadError(
                f"model at {locator} is missing sub-components: {', '.join(missing)}"
            )
    loaders = {
        "tokenizer": lambda: CLIPTokenizer.from_pretrained(locator, subfolder="tokenizer"),
        "text_encoder": lambda: CLIPTextModel.from_pretrained(locator, subfolder="text_encoder"),
        "vae": lambda: AutoencoderKL.from_pretrained(locator, subfolder="vae"),
        "unet": lambda: UNet2DConditionModel.from_pretrained(locator, subfolder="unet"),
        "scheduler": lambda: DDPMScheduler.from_pretrained(locator, subfolder="scheduler"),
    }
    parts = {}
    for name, loader in loaders.items():
        try:
            parts[name] = loader()
        except Exception as exc:  # noqa: BLE001 - any load failure is terminal here
            raise BackendLoadError(f"could not load {name} from {locator!r}: {exc}") from exc
    backend = ExternalBackend(dtype=dtype, **parts)
    backend.unet.to(dtype)
    backend.text_encoder.to(dtype)
    backend.vae.to(dtype)
    return backend
