"""Diffusion backends: the deterministic toy world and the external adapter.

Locator grammar: ``toy:<seed>`` builds (or loads from cache) a pretrained
toy backend; anything else is treated as an external latent-diffusion
model path or identifier.
"""

from __future__ import annotations

from pathlib import Path

from ..errors import BackendLoadError
from .base import DiffusionBackend, check_contract
from .toy import (
    BLANK_LABEL,
    CONCEPTS,
    PROMPT_TEMPLATES,
    HashTextEncoder,
    SyntheticVariationEncoder,
    ToyBackend,
    ToyClassifier,
    ToyConfig,
    ToyFilter,
    concept_image,
    concept_prompts,
    pretrain_toy,
)


def load_backend(locator: str, cache_dir: str | Path | None = None) -> DiffusionBackend:
    locator = str(locator)
    if locator.startswith("toy:"):
        seed_text = locator.split(":", 1)[1]
        try:
            seed = int(seed_text)
        except ValueError:
            raise BackendLoadError(f"toy locator needs an integer seed, got {locator!r}")
        return pretrain_toy(seed, cache_dir=cache_dir)
    from .adapter import adapter_load

    return adapter_load(locator)


__all__ = [
    "BLANK_LABEL",
    "CONCEPTS",
    "PROMPT_TEMPLATES",
    "DiffusionBackend",
    "HashTextEncoder",
    "SyntheticVariationEncoder",
    "ToyBackend",
    "ToyClassifier",
    "ToyConfig",
    "ToyFilter",
    "check_contract",
    "concept_image",
    "concept_prompts",
    "load_backend",
    "pretrain_toy",
]
