"""Joint erasure training loop and its artifacts.

Each step samples one reference image, noises its latent at a random
timestep, draws a concept embedding from the convex manifold, fuses the
latent across scales, builds the negative-guidance target from a frozen
snapshot taken at run start, and takes one Adam step over the denoiser
and fusion transformer jointly. All randomness comes from a single
run-level stream, so runs are reproducible and resumable bit for bit.

Checkpoints are single zip archives holding raw weight blobs plus a JSON
metadata record; frozen weights are referenced by content hash, never
duplicated.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (
    ConfigurationError,
    PartialReferenceSetError,
    TrainingDivergedError,
)
from .fusion import FusionTransformer, ScaleSet, add_positional, fuse, make_multiscale_tokens, noise_latent
from .manifold import (
    DirichletSpec,
    build_prompt_bank,
    layer_norm_tokens,
    load_prompt_file,
    sample_concept_embedding,
)
from .objective import GuidanceSpec, build_target, erasure_loss
from .rng import derive_rng, hash_json, hash_state_dict, restore_rng, rng_state

DEFAULT_FILTER_THRESHOLD = 0.6
CONFIG_KEY_ALIASES = {"lambda": "residual_weight"}


@dataclass
class ErasureConfig:
    """Flat run configuration; file keys match field names, with "lambda"
    accepted for the residual weight."""

    concept_name: str
    prompt_bank_path: str = ""
    reference_set_path: str = ""
    steps: int = 500
    seed: int = 0
    tau: float = 0.7
    gamma: float = 1.0
    residual_weight: float = 0.5
    noise_std: float = 0.01
    scales: tuple[float, ...] = (1.0, 0.75, 0.5)
    learning_rate: float = 1e-5
    batch_size: int = 1
    n_reference_images: int = 200
    loss_reduction: str = "mean"
    trainable_scope: str = "all"
    fusion_depth: int = 2
    fusion_heads: int | None = None  # None: largest of 4/2/1 dividing C
    fusion_ffn_ratio: float = 4.0
    probe_size: int = 8

    def __post_init__(self):
        if not self.concept_name:
            raise ConfigurationError("concept_name is required")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.trainable_scope not in ("all", "cond"):
            raise ConfigurationError(f"trainable_scope must be 'all' or 'cond', got {self.trainable_scope!r}")
        self.scales = tuple(float(s) for s in self.scales)
        ScaleSet(self.scales)  # validates ordering and range

    def resolve_heads(self, channels: int) -> int:
        if self.fusion_heads is not None:
            if channels % self.fusion_heads != 0:
                raise ConfigurationError(
                    f"fusion_heads={self.fusion_heads} does not divide latent channels {channels}"
                )
            return self.fusion_heads
        for heads in (4, 2, 1):
            if channels % heads == 0:
                return heads
        return 1

    def to_dict(self) -> dict:
        record = asdict(self)
        record["lambda"] = record.pop("residual_weight")
        record["scales"] = list(self.scales)
        return record

    def config_hash(self) -> str:
        return hash_json(self.to_dict())


def config_from_dict(raw: dict, overrides: dict | None = None) -> ErasureConfig:
    """Build a config from a flat mapping; unknown keys are rejected."""
    data = dict(raw)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    for alias, target in CONFIG_KEY_ALIASES.items():
        if alias in data:
            data[target] = data.pop(alias)
    known = {f.name for f in fields(ErasureConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(
            f"unknown config keys: {sorted(unknown)}; allowed: {sorted(known | set(CONFIG_KEY_ALIASES))}"
        )
    return ErasureConfig(**data)


def load_config(path: str | Path, overrides: dict | None = None) -> ErasureConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        raw = yaml.safe_load(text)
    else:
        raw = json.loads(text)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a flat key-value mapping")
    return config_from_dict(raw, overrides)


# -- checkpoint archive -------------------------------------------------------


@dataclass
class Checkpoint:
    denoiser_state: dict
    fusion_state: dict
    optimizer_state: dict
    config_snapshot: dict
    step: int
    rng_state: dict
    frozen_hash: str = ""
    probe: dict = field(default_factory=dict)

    def hash(self) -> str:
        return hash_json(
            {
                "denoiser": hash_state_dict(self.denoiser_state),
                "fusion": hash_state_dict(self.fusion_state),
                "step": self.step,
                "config": self.config_snapshot,
            }
        )


def _pack_tree(obj, entries: dict[str, bytes], prefix: str):
    """Replace tensors in a nested structure with archive references."""
    if isinstance(obj, torch.Tensor):
        buf = io.BytesIO()
        np.save(buf, obj.detach().cpu().numpy())
        key = f"{prefix}/{len(entries)}.npy"
        entries[key] = buf.getvalue()
        return {"__tensor__": key}
    if isinstance(obj, dict):
        return {str(k): _pack_tree(v, entries, prefix) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pack_tree(v, entries, prefix) for v in obj]
    return obj


def _unpack_tree(obj, archive: zipfile.ZipFile):
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            arr = np.load(io.BytesIO(archive.read(obj["__tensor__"])))
            return torch.as_tensor(arr)
        return {k: _unpack_tree(v, archive) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack_tree(v, archive) for v in obj]
    return obj


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write a checkpoint as a deterministic zip archive.

    Entries are stored uncompressed with a fixed timestamp so identical
    checkpoints produce identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, bytes] = {}
    skeleton = {
        "denoiser_state": _pack_tree(checkpoint.denoiser_state, entries, "weights/denoiser"),
        "fusion_state": _pack_tree(checkpoint.fusion_state, entries, "weights/fusion"),
        "optimizer_state": _pack_tree(checkpoint.optimizer_state, entries, "optimizer"),
    }
    metadata = {
        "config": checkpoint.config_snapshot,
        "step": checkpoint.step,
        "rng_state": checkpoint.rng_state,
        "frozen_hash": checkpoint.frozen_hash,
        "probe": checkpoint.probe,
        "checkpoint_hash": checkpoint.hash(),
        "skeleton": skeleton,
        "format": 1,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        items = [("metadata.json", json.dumps(metadata, indent=2, sort_keys=True).encode("utf-8"))]
        items += sorted(entries.items())
        for name, data in items:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        metadata = json.loads(zf.read("metadata.json"))
        skeleton = metadata["skeleton"]
        denoiser_state = _unpack_tree(skeleton["denoiser_state"], zf)
        fusion_state = _unpack_tree(skeleton["fusion_state"], zf)
        optimizer_state = _unpack_tree(skeleton["optimizer_state"], zf)
    if "state" in optimizer_state and isinstance(optimizer_state["state"], dict):
        optimizer_state["state"] = {int(k): v for k, v in optimizer_state["state"].items()}
    return Checkpoint(
        denoiser_state=denoiser_state,
        fusion_state=fusion_state,
        optimizer_state=optimizer_state,
        config_snapshot=metadata["config"],
        step=int(metadata["step"]),
        rng_state=metadata["rng_state"],
        frozen_hash=metadata.get("frozen_hash", ""),
        probe=metadata.get("probe", {}),
    )


def checkpoint_hash(source: Checkpoint | str | Path) -> str:
    if isinstance(source, Checkpoint):
        return source.hash()
    return load_checkpoint(source).hash()


# -- reference images ---------------------------------------------------------


def _save_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def _resolve_template(template: str, concept: str) -> str:
    if "{c}" in template:
        return template.format(c=concept)
    if concept in template:
        return template
    raise ConfigurationError(
        f"template {template!r} must mention the concept {concept!r} (or use a '{{c}}' placeholder)"
    )


def generate_reference_set(
    backend,
    concept: str,
    template: str,
    n: int,
    out_dir: str | Path,
    filter=None,
    rng: np.random.Generator | None = None,
    threshold: float = DEFAULT_FILTER_THRESHOLD,
    budget_factor: int = 4,
) -> dict:
    """Sample candidate images until n pass the filter; write a manifest.

    The filter scores concept presence; candidates below threshold are
    discarded. When the candidate budget (budget_factor * n) runs out
    first, the manifest of accepted images is preserved inside the raised
    error.
    """
    if n < 0:
        raise ConfigurationError(f"n must be >= 0, got {n}")
    prompt = _resolve_template(template, concept)
    rng = rng if rng is not None else derive_rng(0, "refgen", concept)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "concept": concept,
        "template": template,
        "prompt": prompt,
        "n_requested": n,
        "threshold": threshold,
        "images": [],
    }
    accepted = 0
    candidates = 0
    budget = n * max(1, budget_factor)
    while accepted < n and candidates < budget:
        seed = int(rng.integers(0, 2**31 - 1))
        image = backend.sample(prompt, seed)
        candidates += 1
        score = float(filter.score(image, concept)) if filter is not None else 1.0
        if score < threshold:
            continue
        filename = f"{concept}_{accepted:05d}.png"
        _save_png(image, out_dir / filename)
        manifest["images"].append(
            {"file": filename, "prompt": prompt, "seed": seed, "score": score}
        )
        accepted += 1
    manifest["n_accepted"] = accepted
    manifest["n_candidates"] = candidates
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if accepted < n:
        raise PartialReferenceSetError(
            f"candidate budget {budget} exhausted with {accepted}/{n} accepted", manifest
        )
    return manifest


def load_reference_latents(backend, reference_dir: str | Path) -> list[tuple[str, torch.Tensor]]:
    """Encode every reference image in a directory to a latent.

    Uses the manifest ordering when present, otherwise sorted *.png.
    """
    reference_dir = Path(reference_dir)
    if not reference_dir.is_dir():
        raise ConfigurationError(f"reference set directory not found: {reference_dir}")
    manifest_path = reference_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        names = [entry["file"] for entry in manifest.get("images", [])]
    else:
        names = sorted(p.name for p in reference_dir.glob("*.png"))
    if not names:
        raise ConfigurationError(f"reference set at {reference_dir} contains no images")
    latents = []
    for name in names:
        image = _load_image(reference_dir / name)
        latents.append((name, backend.encode_image(image)))
    return latents


# -- training loop ------------------------------------------------------------


class JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")
        else:
            self._fh = None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _select_parameters(module: torch.nn.Module, scope: str, patterns: Sequence[str]) -> list:
    if scope == "all":
        return list(module.parameters())
    selected = [p for name, p in module.named_parameters() if any(pat in name for pat in patterns)]
    if not selected:
        raise ConfigurationError(
            f"trainable_scope 'cond' matched no parameters (patterns {tuple(patterns)})"
        )
    return selected


@dataclass
class _ProbeItem:
    grid_values: torch.Tensor
    timestep: int
    embedding: torch.Tensor
    source_id: str


class _EraseRun:
    """Wiring shared by fresh runs and resumes."""

    def __init__(self, config: ErasureConfig, backend):
        torch.set_num_threads(1)  # tiny tensors; keeps reductions bit-reproducible
        self.config = config
        self.backend = backend
        prompts = load_prompt_file(config.prompt_bank_path)
        self.bank = build_prompt_bank(prompts, backend, concept_name=config.concept_name)
        self.dirichlet = DirichletSpec(config.tau)
        uncond = layer_norm_tokens(backend.encode_text(""))
        self.guidance = GuidanceSpec(config.gamma, uncond)
        self.references = load_reference_latents(backend, config.reference_set_path)
        self.scales = ScaleSet(config.scales)
        channels = backend.latent_shape[0]
        self.fusion = FusionTransformer(
            model_dim=channels,
            depth=config.fusion_depth,
            heads=config.resolve_heads(channels),
            ffn_ratio=config.fusion_ffn_ratio,
        ).to(backend.dtype)
        self.fusion.init_parameters(derive_rng(config.seed, "fusion-init"))
        self.frozen = backend.snapshot()
        self.frozen_hash = hash_state_dict(self.frozen.state_dict())
        self.trainable = backend.trainable()
        patterns = getattr(backend, "conditioning_param_patterns", lambda: ("attn2",))()
        self.parameters = _select_parameters(self.trainable, config.trainable_scope, patterns) + list(
            self.fusion.parameters()
        )
        self.optimizer = torch.optim.Adam(
            self.parameters, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
        )
        self.rng = derive_rng(config.seed, "train")
        self.probe_items = self._build_probe()

    def _build_probe(self) -> list[_ProbeItem]:
        """Fixed held-out batch used to measure objective progress."""
        rng = derive_rng(self.config.seed, "probe")
        items = []
        n_steps = self.backend.num_timesteps
        for _ in range(self.config.probe_size):
            name, latent = self.references[int(rng.integers(0, len(self.references)))]
            t = int(rng.integers(0, n_steps))
            grid = noise_latent(latent.unsqueeze(0), t, self.backend, rng, source_id=name)
            emb = sample_concept_embedding(self.bank, self.dirichlet, self.config.noise_std, rng)
            items.append(_ProbeItem(grid.values, t, emb.values, name))
        return items

    def probe_loss(self) -> float:
        from .fusion import LatentGrid

        total = 0.0
        with torch.no_grad():
            for item in self.probe_items:
                grid = LatentGrid(item.grid_values, item.timestep, item.source_id)
                tokens = add_positional(make_multiscale_tokens(grid, self.scales))
                fused = fuse(grid, tokens, self.fusion, self.config.residual_weight)
                target = build_target(self.frozen, fused, item.timestep, item.embedding, self.guidance)
                loss = erasure_loss(
                    self.trainable, fused, item.timestep, item.embedding, target,
                    self.config.loss_reduction,
                )
                total += float(loss)
        return total / len(self.probe_items)

    def train_step(self) -> tuple[float, list[int]]:
        config = self.config
        item_losses = []
        timesteps = []
        for _ in range(config.batch_size):
            name, latent = self.references[int(self.rng.integers(0, len(self.references)))]
            t = int(self.rng.integers(0, self.backend.num_timesteps))
            timesteps.append(t)
            grid = noise_latent(latent.unsqueeze(0), t, self.backend, self.rng, source_id=name)
            emb = sample_concept_embedding(self.bank, self.dirichlet, config.noise_std, self.rng)
            tokens = add_positional(make_multiscale_tokens(grid, self.scales))
            fused = fuse(grid, tokens, self.fusion, config.residual_weight)
            target = build_target(self.frozen, fused, t, emb.values, self.guidance)
            item_losses.append(
                erasure_loss(self.trainable, fused, t, emb.values, target, config.loss_reduction)
            )
        loss = torch.stack(item_losses).mean() if config.loss_reduction == "mean" else torch.stack(item_losses).sum()
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return float(loss.detach()), timesteps

    def make_checkpoint(self, step: int, probe: dict) -> Checkpoint:
        return Checkpoint(
            denoiser_state={k: v.detach().clone() for k, v in self.trainable.state_dict().items()},
            fusion_state={k: v.detach().clone() for k, v in self.fusion.state_dict().items()},
            optimizer_state=self.optimizer.state_dict(),
            config_snapshot=self.config.to_dict(),
            step=step,
            rng_state=rng_state(self.rng),
            frozen_hash=self.frozen_hash,
            probe=probe,
        )


def erase(
    config: ErasureConfig,
    backend,
    resume_from: str | Path | Checkpoint | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> Checkpoint:
    """Run the full erasure loop and return (and optionally save) the
    final checkpoint."""
    run = _EraseRun(config, backend)
    start_step = 0
    probe: dict = {}
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        saved = {k: v for k, v in ckpt.config_snapshot.items() if k != "steps"}
        current = {k: v for k, v in config.to_dict().items() if k != "steps"}
        if saved != current:
            raise ConfigurationError("resume checkpoint was produced with a different configuration")
        if ckpt.step > config.steps:
            raise ConfigurationError(
                f"checkpoint is at step {ckpt.step}, beyond the requested {config.steps} steps"
            )
        if ckpt.frozen_hash and ckpt.frozen_hash != run.frozen_hash:
            raise ConfigurationError(
                "resume checkpoint references different frozen weights; backend mismatch"
            )
        run.trainable.load_state_dict(ckpt.denoiser_state)
        run.fusion.load_state_dict(ckpt.fusion_state)
        if ckpt.optimizer_state.get("state"):
            run.optimizer.load_state_dict(ckpt.optimizer_state)
        run.rng = restore_rng(ckpt.rng_state)
        start_step = ckpt.step
        probe = dict(ckpt.probe)
    log = JsonlLogger(log_path)
    try:
        if start_step == 0:
            probe["step0"] = run.probe_loss()
            log.write({"event": "probe", "step": 0, "probe_loss": probe["step0"], "seed": config.seed})
        for step in range(start_step, config.steps):
            loss, timesteps = run.train_step()
            if not math.isfinite(loss):
                record = {
                    "event": "aborted",
                    "step": step + 1,
                    "loss": str(loss),
                    "timestep": timesteps if len(timesteps) > 1 else timesteps[0],
                    "seed": config.seed,
                }
                log.write(record)
                raise TrainingDivergedError(f"non-finite loss at step {step + 1}", record)
            log.write(
                {
                    "step": step + 1,
                    "loss": loss,
                    "timestep": timesteps if len(timesteps) > 1 else timesteps[0],
                    "seed": config.seed,
                }
            )
        probe["final"] = run.probe_loss()
        log.write(
            {"event": "probe", "step": config.steps, "probe_loss": probe["final"], "seed": config.seed}
        )
    finally:
        log.close()
    checkpoint = run.make_checkpoint(config.steps, probe)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint, checkpoint_path)
    return checkpoint


def multi_concept_erase(
    configs: Sequence[ErasureConfig],
    backend,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Erase several concepts sequentially on one backend.

    Each stage starts from the previous stage's weights (the backend's
    trainable denoiser is updated in place) and takes its own frozen
    snapshot, so earlier erasures stay anchored. Returns the final
    checkpoint; per-stage checkpoints and logs are written when out_dir
    is given.
    """
    if not configs:
        raise ConfigurationError("multi_concept_erase needs at least one config")
    out = Path(out_dir) if out_dir is not None else None
    checkpoint = None
    for i, config in enumerate(configs):
        log_path = out / f"stage{i:02d}_{config.concept_name}.log.jsonl" if out else None
        ckpt_path = out / f"stage{i:02d}_{config.concept_name}.ckpt.zip" if out else None
        checkpoint = erase(config, backend, log_path=log_path, checkpoint_path=ckpt_path)
    return checkpoint
