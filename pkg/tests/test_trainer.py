import json

import pytest
import torch

from conftest import TOY_SEED
from erasekit.backends import ToyFilter, pretrain_toy
from erasekit.errors import (
    ConfigurationError,
    PartialReferenceSetError,
    TrainingDivergedError,
)
from erasekit.rng import derive_rng, hash_state_dict
from erasekit.trainer import (
    Checkpoint,
    ErasureConfig,
    checkpoint_hash,
    config_from_dict,
    erase,
    generate_reference_set,
    load_checkpoint,
    load_config,
    load_reference_latents,
    multi_concept_erase,
    save_checkpoint,
)
from conftest import TOY_CACHE


def fresh_backend():
    return pretrain_toy(TOY_SEED, cache_dir=TOY_CACHE)


def toy_config(world, concept="square", **overrides):
    base = dict(
        concept_name=concept,
        prompt_bank_path=str(world["banks"][concept]),
        reference_set_path=str(world["refs"][concept]),
        steps=4,
        seed=11,
        learning_rate=3e-4,
    )
    base.update(overrides)
    return ErasureConfig(**base)


class TestConfig:
    def test_paper_defaults(self):
        cfg = ErasureConfig(concept_name="gun")
        assert cfg.tau == 0.7
        assert cfg.gamma == 1.0
        assert cfg.residual_weight == 0.5
        assert cfg.noise_std == 0.01
        assert cfg.scales == (1.0, 0.75, 0.5)
        assert cfg.learning_rate == 1e-5
        assert cfg.batch_size == 1
        assert cfg.n_reference_images == 200

    def test_lambda_alias_accepted(self):
        cfg = config_from_dict({"concept_name": "gun", "lambda": 0.25})
        assert cfg.residual_weight == 0.25
        assert cfg.to_dict()["lambda"] == 0.25

    @pytest.mark.parametrize(
        "bad",
        [
            {"tau": 0.0},
            {"noise_std": -1.0},
            {"steps": -1},
            {"learning_rate": 0.0},
            {"batch_size": 0},
            {"loss_reduction": "median"},
            {"trainable_scope": "half"},
            {"scales": (0.5, 1.0)},
        ],
    )
    def test_invalid_values_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            ErasureConfig(concept_name="gun", **bad)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"concept_name": "gun", "temperature": 1.0})

    def test_file_roundtrip_with_overrides(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("concept_name: square\nlambda: 0.5\nsteps: 7\nseed: 3\n", encoding="utf-8")
        cfg = load_config(path, overrides={"steps": 9})
        assert cfg.steps == 9  # CLI flag wins over the file value
        assert cfg.seed == 3

    def test_config_hash_stability(self):
        a = ErasureConfig(concept_name="gun").config_hash()
        b = ErasureConfig(concept_name="gun").config_hash()
        assert a == b

    def test_resolve_heads(self):
        cfg = ErasureConfig(concept_name="gun")
        assert cfg.resolve_heads(1) == 1
        assert cfg.resolve_heads(4) == 4
        assert cfg.resolve_heads(6) == 2
        cfg = ErasureConfig(concept_name="gun", fusion_heads=3)
        with pytest.raises(ConfigurationError):
            cfg.resolve_heads(4)


class TestReferenceSet:
    def test_zero_requested_is_vacuous(self, toy_backend, tmp_path):
        manifest = generate_reference_set(
            toy_backend, "square", "a photo of {c}", 0, tmp_path, rng=derive_rng(0, "r")
        )
        assert manifest["n_accepted"] == 0
        assert manifest["images"] == []
        assert (tmp_path / "manifest.json").exists()

    def test_deterministic_generation(self, toy_backend, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        manifests = [
            generate_reference_set(
                toy_backend, "square", "a photo of {c}", 3, d,
                filter=ToyFilter(), rng=derive_rng(1, "r"),
            )
            for d in dirs
        ]
        assert manifests[0] == manifests[1]
        for entry in manifests[0]["images"]:
            a = (dirs[0] / entry["file"]).read_bytes()
            b = (dirs[1] / entry["file"]).read_bytes()
            assert a == b

    def test_budget_exhaustion_keeps_partial_manifest(self, toy_backend, tmp_path):
        class RejectAll:
            def score(self, image, concept):
                return 0.0

        with pytest.raises(PartialReferenceSetError) as err:
            generate_reference_set(
                toy_backend, "square", "a photo of {c}", 2, tmp_path,
                filter=RejectAll(), rng=derive_rng(2, "r"), budget_factor=2,
            )
        assert err.value.manifest["n_accepted"] == 0
        assert err.value.manifest["n_candidates"] == 4
        assert (tmp_path / "manifest.json").exists()

    def test_template_must_mention_concept(self, toy_backend, tmp_path):
        with pytest.raises(ConfigurationError):
            generate_reference_set(
                toy_backend, "square", "a photo of a cat", 1, tmp_path, rng=derive_rng(0, "r")
            )

    def test_manifest_scores_recorded(self, toy_backend, tmp_path):
        manifest = generate_reference_set(
            toy_backend, "triangle", "an image of triangle", 2, tmp_path,
            filter=ToyFilter(), rng=derive_rng(3, "r"),
        )
        assert all(0 <= e["score"] <= 1 for e in manifest["images"])
        assert all(e["prompt"] == "an image of triangle" for e in manifest["images"])

    def test_load_latents_follow_manifest_order(self, toy_backend, toy_world):
        latents = load_reference_latents(toy_backend, toy_world["refs"]["square"])
        manifest = json.loads((toy_world["refs"]["square"] / "manifest.json").read_text())
        assert [name for name, _ in latents] == [e["file"] for e in manifest["images"]]
        assert all(tuple(z.shape) == toy_backend.latent_shape for _, z in latents)

    def test_missing_reference_dir_rejected(self, toy_backend, tmp_path):
        with pytest.raises(ConfigurationError):
            load_reference_latents(toy_backend, tmp_path / "nope")


class TestEraseLoop:
    def test_zero_steps_checkpoint_is_initialization(self, toy_world):
        backend = fresh_backend()
        pristine = hash_state_dict(backend.trainable().state_dict())
        ckpt = erase(toy_config(toy_world, steps=0), backend)
        assert ckpt.step == 0
        assert hash_state_dict(ckpt.denoiser_state) == pristine
        assert ckpt.frozen_hash == pristine
        assert "step0" in ckpt.probe and "final" in ckpt.probe

    def test_log_records_valid_and_monotone(self, toy_world, tmp_path):
        backend = fresh_backend()
        log_path = tmp_path / "train.log.jsonl"
        erase(toy_config(toy_world, steps=5), backend, log_path=log_path)
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        steps = [r["step"] for r in records]
        assert steps == sorted(steps)
        train_records = [r for r in records if "event" not in r]
        assert [r["step"] for r in train_records] == [1, 2, 3, 4, 5]
        for r in train_records:
            assert isinstance(r["loss"], float) and r["seed"] == 11
            assert 0 <= r["timestep"] < backend.num_timesteps
        probes = [r for r in records if r.get("event") == "probe"]
        assert [p["step"] for p in probes] == [0, 5]

    def test_missing_inputs_rejected_before_side_effects(self, toy_world, tmp_path):
        backend = fresh_backend()
        cfg = toy_config(toy_world)
        cfg.prompt_bank_path = str(tmp_path / "missing.txt")
        with pytest.raises(ConfigurationError):
            erase(cfg, backend)

    def test_frozen_snapshot_immutable_across_run(self, toy_world):
        backend = fresh_backend()
        pristine = hash_state_dict(backend.trainable().state_dict())
        ckpt = erase(toy_config(toy_world, steps=5), backend)
        assert ckpt.frozen_hash == pristine
        assert hash_state_dict(ckpt.denoiser_state) != pristine

    def test_determinism_across_fresh_backends(self, toy_world):
        hashes = set()
        for _ in range(2):
            ckpt = erase(toy_config(toy_world, steps=5), fresh_backend())
            hashes.add(ckpt.hash())
        assert len(hashes) == 1

    def test_seed_changes_checkpoint(self, toy_world):
        a = erase(toy_config(toy_world, steps=3), fresh_backend())
        b = erase(toy_config(toy_world, steps=3, seed=12), fresh_backend())
        assert a.hash() != b.hash()

    def test_non_finite_loss_aborts_with_record(self, toy_world, tmp_path):
        backend = fresh_backend()
        with torch.no_grad():
            backend.trainable().conv_out.weight.fill_(float("inf"))
        log_path = tmp_path / "diverged.log.jsonl"
        with pytest.raises(TrainingDivergedError) as err:
            erase(toy_config(toy_world, steps=2), backend, log_path=log_path)
        assert err.value.record["event"] == "aborted"
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert lines[-1]["event"] == "aborted"

    def test_batch_size_two_runs(self, toy_world):
        ckpt = erase(toy_config(toy_world, steps=2, batch_size=2), fresh_backend())
        assert ckpt.step == 2

    def test_cond_scope_trains_only_conditioning(self, toy_world):
        backend = fresh_backend()
        before = {k: v.clone() for k, v in backend.trainable().state_dict().items()}
        erase(toy_config(toy_world, steps=3, trainable_scope="cond"), backend)
        after = backend.trainable().state_dict()
        for name in before:
            moved = not torch.equal(before[name], after[name])
            if any(pat in name for pat in ("attn_", "film")):
                assert moved, f"{name} should have trained"
            else:
                assert not moved, f"{name} should be untouched"


class TestCheckpointArchive:
    def test_roundtrip(self, toy_world, tmp_path):
        ckpt = erase(toy_config(toy_world, steps=2), fresh_backend())
        path = save_checkpoint(ckpt, tmp_path / "c.ckpt.zip")
        loaded = load_checkpoint(path)
        assert loaded.step == ckpt.step
        assert loaded.config_snapshot == ckpt.config_snapshot
        assert loaded.frozen_hash == ckpt.frozen_hash
        for key, value in ckpt.denoiser_state.items():
            assert torch.equal(loaded.denoiser_state[key], value)
        assert checkpoint_hash(path) == ckpt.hash()

    def test_archive_bytes_deterministic(self, toy_world, tmp_path):
        ckpt = erase(toy_config(toy_world, steps=2), fresh_backend())
        a = save_checkpoint(ckpt, tmp_path / "a.zip").read_bytes()
        b = save_checkpoint(ckpt, tmp_path / "b.zip").read_bytes()
        assert a == b

    def test_missing_checkpoint_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "nope.zip")


class TestResume:
    def test_resume_matches_uninterrupted_run(self, toy_world, tmp_path):
        cfg = toy_config(toy_world, steps=8)
        full_log = tmp_path / "full.log.jsonl"
        full = erase(cfg, fresh_backend(), log_path=full_log)

        part_cfg = toy_config(toy_world, steps=3)
        erase(part_cfg, fresh_backend(), checkpoint_path=tmp_path / "mid.zip")
        resumed_log = tmp_path / "resumed.log.jsonl"
        backend = fresh_backend()
        resumed = erase(cfg, backend, resume_from=tmp_path / "mid.zip", log_path=resumed_log)

        assert resumed.hash() == full.hash()
        full_lines = full_log.read_text().splitlines()
        resumed_lines = resumed_log.read_text().splitlines()
        # uninterrupted: probe0, steps 1..8, probe8; resumed: steps 4..8, probe8
        assert resumed_lines == full_lines[4:]

    def test_resume_allows_extending_steps_only(self, toy_world):
        mid = erase(toy_config(toy_world, steps=2), fresh_backend())
        other = toy_config(toy_world, steps=5, tau=0.9)
        with pytest.raises(ConfigurationError):
            erase(other, fresh_backend(), resume_from=mid)
        with pytest.raises(ConfigurationError):
            # resuming backwards is a configuration mistake
            erase(toy_config(toy_world, steps=1), fresh_backend(), resume_from=mid)

    def test_resume_requires_matching_frozen_weights(self, toy_world, tmp_path):
        cfg = toy_config(toy_world, steps=3)
        mid = erase(toy_config(toy_world, steps=2), fresh_backend())
        drifted = fresh_backend()
        with torch.no_grad():
            next(drifted.trainable().parameters()).add_(0.5)
        with pytest.raises(ConfigurationError):
            erase(cfg, drifted, resume_from=mid)


class TestMultiConcept:
    def test_single_stage_equals_erase(self, toy_world, tmp_path):
        cfg = toy_config(toy_world, steps=3)
        chained = multi_concept_erase([cfg], fresh_backend(), out_dir=tmp_path)
        direct = erase(cfg, fresh_backend())
        assert chained.hash() == direct.hash()
        assert (tmp_path / "stage00_square.ckpt.zip").exists()

    def test_empty_chain_rejected(self):
        with pytest.raises(ConfigurationError):
            multi_concept_erase([], fresh_backend())

    def test_second_stage_freezes_first_stage_weights(self, toy_world, tmp_path):
        cfgs = [
            toy_config(toy_world, steps=2),
            toy_config(toy_world, concept="triangle", steps=2),
        ]
        backend = fresh_backend()
        multi_concept_erase(cfgs, backend, out_dir=tmp_path)
        stage0 = load_checkpoint(tmp_path / "stage00_square.ckpt.zip")
        stage1 = load_checkpoint(tmp_path / "stage01_triangle.ckpt.zip")
        assert stage1.frozen_hash == hash_state_dict(stage0.denoiser_state)

    def test_chain_erases_both_concepts(self, toy_world, tmp_path):
        # Erase "square" then "triangle"; both ASRs stay low after stage 2.
        # Triangle needs a stronger suppression weight than the default.
        from conftest import TOY_DISTRACTORS
        from erasekit.backends import ToyClassifier, concept_prompts
        from erasekit.evaluation import PromptSuite, compute_asr

        cfgs = [
            toy_config(toy_world, steps=500),
            toy_config(toy_world, concept="triangle", steps=500, gamma=2.0),
        ]
        backend = fresh_backend()
        final = multi_concept_erase(cfgs, backend, out_dir=tmp_path)
        classifier = ToyClassifier()
        for concept in ("square", "triangle"):
            suite = PromptSuite(concept, concept_prompts(concept), "target-inductive")
            report = compute_asr(
                backend, final, suite, classifier, n_per_prompt=4, seed=7,
                distractors=TOY_DISTRACTORS[concept],
            )
            assert report.value <= 0.2, f"chain ASR({concept}) = {report.value}"


class TestOptimizationOracle:
    def test_loss_halves_within_200_steps(self, toy_world):
        ckpt = erase(toy_config(toy_world, steps=200, gamma=1.0), fresh_backend())
        assert ckpt.probe["final"] <= 0.5 * ckpt.probe["step0"]
