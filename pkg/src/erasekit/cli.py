"""Command-line entry point.

Subcommands: gen-refs, erase, chain, eval, sample-embed, report. Every
command writes exactly one run manifest into its output directory and
prints a JSON result to stdout. Exit codes: 0 success, 2 configuration
error, 3 runtime failure. All randomness funnels through --seed (or the
config seed); sub-streams are derived per stage as documented in
erasekit.rng.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import yaml

from . import __version__
from .backends import ToyBackend, ToyClassifier, ToyFilter, load_backend
from .errors import ConfigurationError, EraseKitError
from .evaluation import (
    MetricReport,
    category_failure_report,
    compute_asr,
    compute_mcp,
    ingest_fid,
    load_prompt_suite,
    score_adversarial_file,
    write_reports,
)
from .manifold import (
    TAU_SEMANTICS_NOTE,
    build_prompt_bank,
    load_prompt_file,
    sweep_manifold,
)
from .rng import derive_rng, hash_json
from .trainer import (
    erase,
    generate_reference_set,
    load_config,
    multi_concept_erase,
)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(
    out_dir: Path, command: str, config_hash: str, seed: int, started: float, artifacts: list[str]
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "started_at": started,
        "finished_at": time.time(),
        "artifacts": sorted(artifacts),
        "version": __version__,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _default_classifier(backend):
    if isinstance(backend, ToyBackend):
        return ToyClassifier()
    raise ConfigurationError(
        "no built-in classifier for this backend; run evaluation through the Python API "
        "with your own classifier handle"
    )


def _parse_overrides(pairs: list[str] | None) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


# -- commands -----------------------------------------------------------------


def cmd_gen_refs(args) -> int:
    started = time.time()
    backend = load_backend(args.backend, args.cache_dir)
    out_dir = Path(args.out_dir)
    image_filter = None if args.no_filter else (ToyFilter() if isinstance(backend, ToyBackend) else None)
    rng = derive_rng(args.seed, "refgen", args.concept)
    manifest = generate_reference_set(
        backend,
        args.concept,
        args.template,
        args.n,
        out_dir,
        filter=image_filter,
        rng=rng,
        threshold=args.threshold,
        budget_factor=args.budget_factor,
    )
    config_hash = hash_json(
        {"concept": args.concept, "template": args.template, "n": args.n, "threshold": args.threshold}
    )
    artifacts = [str(out_dir / e["file"]) for e in manifest["images"]]
    artifacts.append(str(out_dir / "manifest.json"))
    _write_manifest(out_dir, "gen-refs", config_hash, args.seed, started, artifacts)
    _emit(
        {
            "out_dir": str(out_dir),
            "n_accepted": manifest["n_accepted"],
            "n_candidates": manifest["n_candidates"],
        }
    )
    return 0


def cmd_erase(args) -> int:
    started = time.time()
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    config = load_config(args.config, overrides)
    out_dir = Path(args.out_dir) if args.out_dir else Path("runs") / config.concept_name
    backend = load_backend(args.backend, args.cache_dir)
    log_path = out_dir / "train.log.jsonl"
    ckpt_path = out_dir / "checkpoint.ckpt.zip"
    checkpoint = erase(
        config, backend, resume_from=args.resume, log_path=log_path, checkpoint_path=ckpt_path
    )
    _write_manifest(
        out_dir, "erase", config.config_hash(), config.seed, started, [str(log_path), str(ckpt_path)]
    )
    _emit(
        {
            "checkpoint": str(ckpt_path),
            "checkpoint_hash": checkpoint.hash(),
            "steps": checkpoint.step,
            "probe": checkpoint.probe,
            "log": str(log_path),
        }
    )
    return 0


def cmd_chain(args) -> int:
    started = time.time()
    configs = [load_config(p) for p in args.configs]
    out_dir = Path(args.out_dir)
    backend = load_backend(args.backend, args.cache_dir)
    final = multi_concept_erase(configs, backend, out_dir=out_dir)
    artifacts = [str(p) for p in sorted(out_dir.glob("stage*"))]
    reports: list[MetricReport] = []
    if args.retest:
        classifier = _default_classifier(backend)
        for spec in args.retest:
            if "=" not in spec:
                raise ConfigurationError(f"--retest expects concept=suite_path, got {spec!r}")
            concept, suite_path = spec.split("=", 1)
            suite = load_prompt_suite(suite_path, concept=concept, kind="target-inductive")
            reports.append(
                compute_asr(backend, final, suite, classifier, args.n_per_prompt, args.seed)
            )
        write_reports(reports, out_dir / "report.json", out_dir / "report.csv")
        artifacts += [str(out_dir / "report.json"), str(out_dir / "report.csv")]
    config_hash = hash_json([c.to_dict() for c in configs])
    _write_manifest(out_dir, "chain", config_hash, configs[0].seed, started, artifacts)
    _emit(
        {
            "stages": len(configs),
            "final_checkpoint_hash": final.hash(),
            "retests": {r.concept: r.value for r in reports},
        }
    )
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()] if args.metrics else []
    known = {"asr", "mcp", "categories"}
    unknown = set(metrics) - known
    if unknown:
        raise ConfigurationError(f"unknown metrics {sorted(unknown)}; choose from {sorted(known)}")
    out_dir = Path(args.out_dir)
    backend = load_backend(args.backend, args.cache_dir)
    checkpoint = args.checkpoint
    if checkpoint is not None and not Path(checkpoint).exists():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    reports: list[MetricReport] = []
    classifier = None
    if metrics or args.ingest_adversarial:
        classifier = _default_classifier(backend)
    if "asr" in metrics:
        if not args.suite or not args.concept:
            raise ConfigurationError("asr needs --suite and --concept")
        suite = load_prompt_suite(args.suite, concept=args.concept, kind="target-inductive")
        reports.append(
            compute_asr(backend, checkpoint, suite, classifier, args.n_per_prompt, args.seed)
        )
    if "mcp" in metrics:
        if not args.related:
            raise ConfigurationError("mcp needs at least one --related concept=suite_path")
        suites = []
        for spec in args.related:
            if "=" not in spec:
                raise ConfigurationError(f"--related expects concept=suite_path, got {spec!r}")
            concept, suite_path = spec.split("=", 1)
            suites.append(load_prompt_suite(suite_path, concept=concept, kind="related-preservation"))
        reports.extend(
            compute_mcp(backend, checkpoint, suites, classifier, args.n_per_prompt, args.seed)
        )
    if "categories" in metrics:
        if not args.detections:
            raise ConfigurationError("categories needs --detections (per-image detection JSON)")
        payload = json.loads(Path(args.detections).read_text(encoding="utf-8"))
        entries = payload["images"] if isinstance(payload, dict) else payload
        detections = {e["id"]: [tuple(d) for d in e["detections"]] for e in entries}

        def detector(image_id):
            return detections[image_id]

        detector.classifier_id = str(payload.get("detector", "ingested")) if isinstance(payload, dict) else "ingested"
        reports.append(
            category_failure_report(
                sorted(detections), detector, threshold=args.threshold,
                concept=args.concept or "nudity", seed=args.seed,
            )
        )
    for adv_path in args.ingest_adversarial or []:
        reports.append(
            score_adversarial_file(
                backend, checkpoint, adv_path, classifier, seed=args.seed,
                concept=args.concept, n_per_prompt=args.n_per_prompt,
            )
        )
    if args.ingest_fid:
        reports.append(ingest_fid(args.ingest_fid, concept=args.concept or ""))
    if not reports:
        raise ConfigurationError("nothing to evaluate: pass --metrics and/or --ingest-* inputs")
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    write_reports(reports, json_path, csv_path)
    config_hash = hash_json(
        {"metrics": metrics, "checkpoint": str(checkpoint), "n_per_prompt": args.n_per_prompt}
    )
    _write_manifest(out_dir, "eval", config_hash, args.seed, started, [str(json_path), str(csv_path)])
    _emit({"report": str(json_path), "csv": str(csv_path), "metrics": {f"{r.concept}:{r.metric}": r.value for r in reports if not isinstance(r.value, dict)}})
    return 0


def cmd_sample_embed(args) -> int:
    started = time.time()
    backend = load_backend(args.backend, args.cache_dir)
    prompts = load_prompt_file(args.bank)
    sizes = [int(s) for s in args.sweep_sizes.split(",")] if args.sweep_sizes else [len(prompts)]
    taus = [float(t) for t in args.sweep_tau.split(",")] if args.sweep_tau else [args.tau]
    target_prompt = args.target or prompts[0]
    target = build_prompt_bank([target_prompt], backend).embeddings[0]
    series = sweep_manifold(
        prompts,
        backend,
        target,
        bank_sizes=sizes,
        taus=taus,
        n_samples=args.n_samples,
        seed=args.seed,
        noise_std=args.noise_std,
        concept_name=target_prompt,
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "series": series,
        "target_prompt": target_prompt,
        "notes": {"tau_semantics": TAU_SEMANTICS_NOTE},
    }
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config_hash = hash_json({"bank": str(args.bank), "sizes": sizes, "taus": taus, "n": args.n_samples})
    _write_manifest(out_path.parent, "sample-embed", config_hash, args.seed, started, [str(out_path)])
    _emit({"series": str(out_path), "points": len(series)})
    return 0


def cmd_report(args) -> int:
    started = time.time()
    from .reporting import render_report_dir

    written = render_report_dir(args.run_dir, args.out_dir)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.run_dir) / "report"
    _write_manifest(out_dir, "report", hash_json(str(args.run_dir)), 0, started, [str(p) for p in written])
    _emit({"written": [str(p) for p in written]})
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="erasekit",
        description="Concept erasure for latent diffusion models, with an evaluation harness.",
    )
    parser.add_argument("--version", action="version", version=f"erasekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_backend(p):
        p.add_argument("--backend", required=True, help="'toy:<seed>' or an external model path/id")
        p.add_argument("--cache-dir", default=None, help="toy pretrain cache directory")

    p = sub.add_parser("gen-refs", help="generate a filtered reference-image set")
    add_backend(p)
    p.add_argument("--concept", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--template", default="a photo of {c}")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--budget-factor", type=int, default=4)
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_refs)

    p = sub.add_parser("erase", help="run the erasure training loop")
    add_backend(p)
    p.add_argument("--config", required=True, help="flat YAML/JSON run configuration")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--steps", type=int, default=None, help="overrides the config steps")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_erase)

    p = sub.add_parser("chain", help="erase several concepts sequentially")
    add_backend(p)
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--retest", action="append", metavar="CONCEPT=SUITE", help="re-test earlier concepts")
    p.add_argument("--n-per-prompt", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("eval", help="compute metrics and/or ingest external scores")
    add_backend(p)
    p.add_argument("--checkpoint", default=None, help="erased checkpoint (omit for the clean model)")
    p.add_argument("--metrics", default="", help="comma list from {asr,mcp,categories}")
    p.add_argument("--concept", default=None)
    p.add_argument("--suite", default=None, help="target-inductive prompt suite file")
    p.add_argument("--related", action="append", metavar="CONCEPT=SUITE")
    p.add_argument("--detections", default=None, help="per-image category detections JSON")
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--ingest-adversarial", action="append", metavar="FILE")
    p.add_argument("--ingest-fid", default=None, metavar="FILE")
    p.add_argument("--n-per-prompt", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-embed", help="manifold similarity diagnostics")
    add_backend(p)
    p.add_argument("--bank", required=True, help="prompt bank file")
    p.add_argument("--target", default=None, help="target prompt (default: first bank prompt)")
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--sweep-sizes", default=None, help="comma list of bank sizes")
    p.add_argument("--sweep-tau", default=None, help="comma list of tau values")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output series JSON path")
    p.set_defaults(func=cmd_sample_embed)

    p = sub.add_parser("report", help="render figures and CSV from run artifacts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        sys.stderr.write(json.dumps({"error": "configuration", "message": str(exc)}) + "\n")
        return 2
    except EraseKitError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if hasattr(exc, "manifest"):
            record["manifest"] = exc.manifest
        if hasattr(exc, "record"):
            record["record"] = exc.record
        sys.stderr.write(json.dumps(record) + "\n")
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
