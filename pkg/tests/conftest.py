import time
from pathlib import Path

import pytest
import torch

from erasekit.backends import BLANK_LABEL, ToyFilter, concept_prompts, pretrain_toy
from erasekit.rng import derive_rng
from erasekit.trainer import generate_reference_set

torch.set_num_threads(1)

REPO_ROOT = Path(__file__).resolve().parent.parent
TOY_CACHE = REPO_ROOT / ".toy_cache"
TOY_SEED = 1

# Distractor label sets for the toy concepts, used across test modules.
TOY_DISTRACTORS = {
    "square": ["circle", "triangle", BLANK_LABEL],
    "circle": ["square", "triangle", BLANK_LABEL],
    "triangle": ["square", "circle", BLANK_LABEL],
}


@pytest.fixture(scope="session")
def toy_backend_factory():
    """Returns a zero-arg factory for pristine pretrained toy backends.

    The first call trains and caches; later calls load the cached
    weights, so every test starts from identical pristine weights.
    """
    timing = {}

    def factory():
        t0 = time.time()
        backend = pretrain_toy(TOY_SEED, cache_dir=TOY_CACHE)
        timing.setdefault("first_load_seconds", time.time() - t0)
        return backend

    factory.timing = timing
    return factory


@pytest.fixture(scope="session")
def toy_backend(toy_backend_factory):
    return toy_backend_factory()


@pytest.fixture(scope="session")
def toy_world(toy_backend_factory, tmp_path_factory):
    """Prompt bank files and a filtered reference set for the toy concepts."""
    root = tmp_path_factory.mktemp("toy_world")
    backend = toy_backend_factory()
    banks = {}
    for concept in ("square", "circle", "triangle"):
        path = root / f"{concept}_bank.txt"
        path.write_text("\n".join(concept_prompts(concept)) + "\n", encoding="utf-8")
        banks[concept] = path
    refs = {}
    for concept in ("square", "triangle"):
        ref_dir = root / f"refs_{concept}"
        generate_reference_set(
            backend,
            concept,
            "a photo of {c}",
            n=12,
            out_dir=ref_dir,
            filter=ToyFilter(),
            rng=derive_rng(TOY_SEED, "refgen", concept),
        )
        refs[concept] = ref_dir
    return {"root": root, "banks": banks, "refs": refs}
