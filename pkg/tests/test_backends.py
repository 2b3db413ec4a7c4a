import numpy as np
import pytest
import torch

from conftest import TOY_DISTRACTORS, TOY_SEED
from erasekit.backends import (
    BLANK_LABEL,
    CONCEPTS,
    HashTextEncoder,
    ToyBackend,
    ToyClassifier,
    ToyConfig,
    ToyFilter,
    check_contract,
    concept_image,
    concept_prompts,
    load_backend,
    pretrain_toy,
)
from erasekit.backends.adapter import adapter_load
from erasekit.errors import BackendLoadError, ConfigurationError
from erasekit.rng import hash_state_dict


class TestContract:
    def test_conformance_suite_on_toy(self, toy_backend):
        check_contract(toy_backend)

    def test_schedule_shape(self, toy_backend):
        table = np.asarray(toy_backend.alphas_cumprod)
        assert len(table) == 50
        assert ((table > 0) & (table <= 1)).all()
        assert (np.diff(table) <= 0).all()
        # abar_0 is the entry closest to 1
        assert np.argmin(np.abs(table - 1.0)) == 0

    def test_encode_text_constant_shape(self, toy_backend):
        shapes = {tuple(toy_backend.encode_text(p).shape) for p in ("a", "a photo of square", "")}
        assert len(shapes) == 1

    def test_encode_decode_roundtrip_on_block_images(self, toy_backend):
        image = concept_image("square", 1)
        latent = toy_backend.encode_image(image)
        assert tuple(latent.shape) == toy_backend.latent_shape
        decoded = toy_backend.decode_latent(latent)
        pooled = image.reshape(8, 2, 8, 2).mean(axis=(1, 3)).repeat(2, 0).repeat(2, 1)
        assert np.allclose(decoded, pooled, atol=1e-12)

    def test_snapshot_is_value_copy(self):
        backend = ToyBackend(seed=8)  # un-pretrained weights suffice here
        frozen = backend.snapshot()
        before = hash_state_dict(frozen.state_dict())
        with torch.no_grad():
            next(backend.trainable().parameters()).add_(1.0)
        assert hash_state_dict(frozen.state_dict()) == before
        assert hash_state_dict(backend.trainable().state_dict()) != before

    def test_sample_deterministic(self, toy_backend):
        a = toy_backend.sample("a photo of circle", seed=5)
        b = toy_backend.sample("a photo of circle", seed=5)
        assert np.array_equal(a, b)
        assert a.shape == (16, 16)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_uint8_image_accepted(self, toy_backend):
        image = (concept_image("circle", 0) * 255).astype(np.uint8)
        latent = toy_backend.encode_image(image)
        assert tuple(latent.shape) == toy_backend.latent_shape


class TestHashEncoder:
    def test_deterministic_across_instances(self):
        a = HashTextEncoder().encode_text("a photo of gun")
        b = HashTextEncoder().encode_text("a photo of gun")
        assert torch.equal(a, b)

    def test_empty_prompt_is_all_pads(self):
        enc = HashTextEncoder(seq_len=4, dim=8)
        emb = enc.encode_text("")
        assert emb.shape == (4, 8)
        assert torch.equal(emb[0], emb[3])

    def test_long_prompt_truncated(self):
        enc = HashTextEncoder(seq_len=3, dim=8)
        assert enc.encode_text("a b c d e f").shape == (3, 8)


class TestToyClassifier:
    def test_clean_samples_classified_perfectly(self):
        clf = ToyClassifier()
        hits = 0
        for concept in CONCEPTS:
            for variant in range(3):
                verdict = clf.classify(
                    concept_image(concept, variant), concept, TOY_DISTRACTORS[concept]
                )
                hits += verdict.concept_present
        assert hits == 9

    def test_verdict_deterministic_and_ranked(self):
        clf = ToyClassifier()
        image = concept_image("triangle", 1)
        a = clf.classify(image, "triangle", TOY_DISTRACTORS["triangle"], image_id="x")
        b = clf.classify(image, "triangle", TOY_DISTRACTORS["triangle"], image_id="x")
        assert a == b
        assert a.label_ranking[0] == "triangle"
        assert 0.0 <= a.score <= 1.0

    def test_blank_image_not_a_concept(self):
        clf = ToyClassifier()
        verdict = clf.classify(np.full((16, 16), 0.5), "square", TOY_DISTRACTORS["square"])
        assert verdict.concept_present is False
        assert verdict.label_ranking[0] == BLANK_LABEL

    def test_unknown_label_rejected(self):
        clf = ToyClassifier()
        with pytest.raises(ConfigurationError):
            clf.classify(concept_image("square", 0), "square", ["hexagon"])

    def test_filter_scores(self):
        filt = ToyFilter()
        assert filt.score(concept_image("square", 1), "square") > 0.9
        assert filt.score(np.full((16, 16), 0.5), "square") < 0.6


class TestPretrain:
    def test_cached_load_matches_metadata_hash(self, toy_backend):
        info = toy_backend.pretrain_info
        assert info, "cached toy backend should carry pretrain metadata"
        assert info["weights_hash"] == toy_backend.denoiser_hash()
        gate = info["diagnostics"]["gate"]
        assert all(acc >= toy_backend.config.gate_threshold for acc in gate.values())

    def test_short_pretrain_deterministic(self, tmp_path):
        # Two from-scratch runs of a short budget produce identical weights.
        cfg = ToyConfig(pretrain_steps=60, gate_threshold=0.0, gate_samples=2)
        a = pretrain_toy(9, cache_dir=tmp_path / "a", config=cfg, force=True)
        b = pretrain_toy(9, cache_dir=tmp_path / "b", config=cfg, force=True)
        assert a.denoiser_hash() == b.denoiser_hash()

    def test_cache_reuse(self, tmp_path):
        cfg = ToyConfig(pretrain_steps=40, gate_threshold=0.0, gate_samples=2)
        first = pretrain_toy(4, cache_dir=tmp_path, config=cfg)
        files = list(tmp_path.glob("toy-*.pt"))
        assert len(files) == 1
        second = pretrain_toy(4, cache_dir=tmp_path, config=cfg)
        assert first.denoiser_hash() == second.denoiser_hash()

    def test_different_seeds_differ(self, tmp_path):
        cfg = ToyConfig(pretrain_steps=20, gate_threshold=0.0, gate_samples=2)
        a = pretrain_toy(1, cache_dir=tmp_path, config=cfg)
        b = pretrain_toy(2, cache_dir=tmp_path, config=cfg)
        assert a.denoiser_hash() != b.denoiser_hash()


class TestLocators:
    def test_toy_locator(self, tmp_path):
        cfg = ToyConfig(pretrain_steps=1, gate_threshold=0.0, gate_samples=1)
        backend = pretrain_toy(TOY_SEED, cache_dir=tmp_path, config=cfg)
        assert isinstance(backend, ToyBackend)
        assert load_backend.__module__ == "erasekit.backends"

    def test_bad_toy_seed_rejected(self):
        with pytest.raises(BackendLoadError):
            load_backend("toy:not-a-seed")

    def test_missing_external_model_rejected(self, tmp_path):
        with pytest.raises(BackendLoadError):
            adapter_load(str(tmp_path / "does-not-exist"))

    def test_load_backend_external_path_error(self, tmp_path):
        with pytest.raises(BackendLoadError):
            load_backend(str(tmp_path / "nope"))


class TestToyWorld:
    def test_concept_prompts_templates(self):
        prompts = concept_prompts("square")
        assert "a photo of square" in prompts
        assert len(prompts) == 5

    def test_unknown_concept_image_rejected(self):
        with pytest.raises(ConfigurationError):
            concept_image("hexagon", 0)

    def test_concept_images_distinct(self):
        images = [concept_image(c, v) for c in CONCEPTS for v in range(3)]
        flat = {img.tobytes() for img in images}
        assert len(flat) == 9
