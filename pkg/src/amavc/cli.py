"""Command-line entry point: ``amavc <subcommand> [options]``.

Every invocation writes into a fresh timestamped run directory under
``--out`` and finishes by recording the SHA-256 of each produced file in
``files.json``. Exit status is 0 on success, 2 for configuration or
validation problems and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .archive import write_json
from .embedder import EmbedderCheckpoint, pretrain_embedder, verify_frozen
from .errors import AmavcError, InvalidConfig, MissingFile, NonFiniteLoss, ValidationError
from .evaluation import comparison_table, evaluate_system
from .experiment import ExperimentConfig, execution_plan, run_ablation, write_file_manifest
from .features import FeatureKind, load_manifest
from .model import ConversionCheckpoint
from .runtime import SpeakerProfile, build_profile, convert_utterance
from .synthetic import generate, speaker_separation_score
from .training import adapt, needs_embedder, train_average, uses_speaker_embedding

log = logging.getLogger("amavc")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
SUBCOMMANDS = ("synth-corpus", "pretrain-embedder", "train-average", "adapt", "convert", "eval", "ablation")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config; flags override it")
    common.add_argument("--seed", type=int, help="global seed (also the corpus seed)")
    common.add_argument("--out", metavar="DIR", help="parent directory for run directories")
    common.add_argument("--system", type=str.lower, choices=["ama-r", "ama-rc", "ama-se-r", "ama-se-rc"])
    common.add_argument("--alpha", type=float, help="cycle-consistency weight for RC systems")
    common.add_argument("--include-c0", action="store_true", default=None, help="include c0 in MCD")
    common.add_argument("--dtw", action="store_true", default=None, help="DTW-align frames before MCD")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    common.add_argument("--steps", type=int, help="training steps for this stage")
    common.add_argument("--manifest", metavar="PATH", help="corpus manifest.json")
    common.add_argument("--embedder", dest="embedder_ckpt", metavar="PATH", help="loss-network checkpoint")
    common.add_argument(
        "--measurement-embedder", dest="measurement_embedder_ckpt", metavar="PATH", help="embedder used for CCD"
    )
    common.add_argument("--checkpoint", metavar="PATH", help="conversion checkpoint")
    common.add_argument("--target", metavar="SPEAKER", help="target speaker id")
    common.add_argument("--source", metavar="SPEAKER", help="source speaker id (convert)")
    common.add_argument("--source-profile", metavar="PATH")
    common.add_argument("--target-profile", metavar="PATH")

    parser = argparse.ArgumentParser(prog="amavc", description="Average-model voice conversion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "synth-corpus": "generate a synthetic multi-speaker corpus",
        "pretrain-embedder": "pretrain and freeze the speaker embedder",
        "train-average": "train a multi-speaker average model",
        "adapt": "adapt an average model to one target speaker",
        "convert": "convert a source speaker's utterances with an adapted model",
        "eval": "score an adapted model on the target's eval split (MCD, CCD)",
        "ablation": "run all four systems end to end and write the comparison report",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.corpus.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.system is not None:
        cfg.system = args.system
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.include_c0:
        cfg.evaluation.include_c0 = True
    if args.dtw:
        cfg.evaluation.dtw = True
    for name in (
        "steps",
        "manifest",
        "embedder_ckpt",
        "measurement_embedder_ckpt",
        "checkpoint",
        "target",
        "source",
        "source_profile",
        "target_profile",
    ):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if cfg.steps is not None and cfg.steps < 1:
        raise InvalidConfig("steps must be >= 1")
    cfg.validate()
    return cfg


FLAGS = {"embedder_ckpt": "--embedder", "measurement_embedder_ckpt": "--measurement-embedder"}


def _require(cfg: ExperimentConfig, *fields: str) -> None:
    for name in fields:
        if getattr(cfg, name) is None:
            flag = FLAGS.get(name, "--" + name.replace("_", "-"))
            raise InvalidConfig(f"{name}: required for this subcommand (config key or {flag})")


def _require_path(cfg: ExperimentConfig, name: str, *suffixes: str) -> Path:
    _require(cfg, name)
    path = Path(getattr(cfg, name))
    candidates = [path] if not suffixes else [path.with_suffix(s) for s in suffixes]
    missing = [str(p) for p in candidates if not p.exists()]
    if missing:
        raise MissingFile(f"{name}: file not found: {', '.join(missing)}")
    return path


def _check_paths(command: str, cfg: ExperimentConfig) -> None:
    """Fail fast on missing inputs, before any run directory exists."""
    ckpt = (".json", ".npz")
    if command in ("pretrain-embedder", "train-average", "adapt", "convert", "eval"):
        _require_path(cfg, "manifest")
    if command == "train-average":
        _require(cfg, "system")
        if needs_embedder(cfg.system):
            _require_path(cfg, "embedder_ckpt", *ckpt)
    if command in ("adapt", "convert", "eval"):
        _require_path(cfg, "checkpoint", *ckpt)
    if command == "adapt":
        _require(cfg, "target")
    if command == "convert":
        _require(cfg, "source")
    if command == "eval" and cfg.measurement_embedder_ckpt is None:
        # CCD falls back to the loss network when no measurement embedder is given
        _require_path(cfg, "embedder_ckpt", *ckpt)
    for name in ("embedder_ckpt", "measurement_embedder_ckpt"):
        if getattr(cfg, name) is not None and command != "ablation":
            _require_path(cfg, name, *ckpt)
    for name in ("source_profile", "target_profile"):
        if getattr(cfg, name) is not None:
            _require_path(cfg, name)


def plan(command: str, cfg: ExperimentConfig) -> list[str]:
    if command == "ablation":
        return execution_plan(cfg)
    steps = {
        "synth-corpus": [f"generate corpus {cfg.corpus.corpus_name!r} (seed {cfg.corpus.seed})"],
        "pretrain-embedder": [f"pretrain embedder on {cfg.embedder.splits} for {cfg.embedder.steps} steps"],
        "train-average": [f"train {cfg.system} average model for {cfg.steps or cfg.average.steps} steps"],
        "adapt": [f"adapt {cfg.checkpoint} to {cfg.target} for {cfg.steps or cfg.adaptation.steps} steps"],
        "convert": [f"convert {cfg.source}'s utterances with {cfg.checkpoint}"],
        "eval": [f"evaluate {cfg.checkpoint} on the eval split"],
    }
    return steps[command] + ["write files.json"]


def new_run_dir(out: str, command: str) -> Path:
    """A fresh directory ``<out>/<command>-<UTC timestamp>[-n]``; existing runs are never reused."""
    parent = Path(out)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = parent / f"{command}-{stamp}"
    path, n = base, 0
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = base.with_name(f"{base.name}-{n}")


def _train_config(cfg: ExperimentConfig, stage: str):
    tc = cfg.train_config(cfg.system, stage)
    if cfg.steps is not None:
        tc = dataclasses.replace(tc, steps=cfg.steps)
    return tc


def _load_embedder(path):
    return EmbedderCheckpoint.load(path) if path else None


def cmd_synth_corpus(cfg, run_dir: Path) -> None:
    manifest = generate(cfg.corpus, run_dir / "corpus")
    score = speaker_separation_score(manifest)
    write_json({"separation_score": score, "n_utterances": len(manifest.utterances)}, run_dir / "corpus_stats.json")
    print(f"corpus written to {run_dir / 'corpus'} ({len(manifest.utterances)} utterances, separation {score:.2f})")


def cmd_pretrain_embedder(cfg, run_dir: Path) -> None:
    manifest = load_manifest(cfg.manifest, strict=cfg.strict_dims)
    ckpt = pretrain_embedder(manifest, cfg.embedder.model_config(manifest.dims.mcc), cfg.embedder.train_config(cfg.seed))
    path = ckpt.save(run_dir / "embedder")
    print(f"embedder saved to {path} (held-out accuracy {ckpt.metadata['heldout_accuracy']:.3f})")


def _frozen_check(embedder, before, run_dir: Path) -> None:
    if embedder is None:
        return
    frozen = verify_frozen(before, embedder)
    write_json({"embedder_hash": embedder.parameter_hash, "embedder_frozen": frozen}, run_dir / "freeze_check.json")
    if not frozen:
        raise AmavcError("embedder parameters changed during training")


def cmd_train_average(cfg, run_dir: Path) -> None:
    manifest = load_manifest(cfg.manifest, strict=cfg.strict_dims)
    embedder = _load_embedder(cfg.embedder_ckpt)
    before = embedder.snapshot() if embedder is not None else None
    ckpt, train_log = train_average(manifest, _train_config(cfg, "average"), embedder=embedder)
    path = ckpt.save(run_dir / f"{cfg.system.lower()}_average")
    train_log.save(run_dir / "train_log.jsonl")
    _frozen_check(embedder, before, run_dir)
    print(f"average model saved to {path} ({ckpt.n_parameters} parameters)")


def cmd_adapt(cfg, run_dir: Path) -> None:
    manifest = load_manifest(cfg.manifest, strict=cfg.strict_dims)
    avg = ConversionCheckpoint.load(cfg.checkpoint)
    if cfg.system is None:
        cfg.system = avg.system
    embedder = _load_embedder(cfg.embedder_ckpt)
    before = embedder.snapshot() if embedder is not None else None
    target = manifest.subset([cfg.target], ["adapt"])
    ckpt, train_log = adapt(avg, target, _train_config(cfg, "adapt"), embedder=embedder)
    path = ckpt.save(run_dir / f"{cfg.system.lower()}_{cfg.target}")
    train_log.save(run_dir / "train_log.jsonl")
    use_se = uses_speaker_embedding(cfg.system)
    profile = build_profile(target.utterances, embedder if use_se else None, with_embedding=use_se)
    profile.save(run_dir / f"{cfg.target}_profile.json")
    _frozen_check(embedder, before, run_dir)
    print(f"adapted model saved to {path}")


def _target_profile(cfg, manifest, ckpt, embedder) -> SpeakerProfile:
    if cfg.target_profile:
        return SpeakerProfile.load(cfg.target_profile)
    target = cfg.target or ckpt.metadata.get("target_speaker")
    if target is None:
        raise InvalidConfig("target: required when no target_profile is given")
    use_se = ckpt.config.use_speaker_embedding
    return build_profile(manifest.subset([target], ["adapt"]).utterances, embedder if use_se else None, use_se)


def cmd_convert(cfg, run_dir: Path) -> None:
    manifest = load_manifest(cfg.manifest, strict=cfg.strict_dims)
    ckpt = ConversionCheckpoint.load(cfg.checkpoint)
    embedder = _load_embedder(cfg.embedder_ckpt)
    tgt = _target_profile(cfg, manifest, ckpt, embedder)
    records = [r for r in manifest.utterances if r.speaker_id == cfg.source]
    if not records:
        raise InvalidConfig(f"source: speaker {cfg.source!r} has no utterances in the manifest")
    src = SpeakerProfile.load(cfg.source_profile) if cfg.source_profile else build_profile(records)
    out_dir = run_dir / "converted"
    for rec in records:
        convert_utterance(rec.load(FeatureKind.PPG), rec.load(FeatureKind.LF0), src, tgt, ckpt, out_dir=out_dir)
    print(f"converted {len(records)} utterances into {out_dir}")


def cmd_eval(cfg, run_dir: Path) -> None:
    manifest = load_manifest(cfg.manifest, strict=cfg.strict_dims)
    ckpt = ConversionCheckpoint.load(cfg.checkpoint)
    embedder = _load_embedder(cfg.embedder_ckpt)
    meter = _load_embedder(cfg.measurement_embedder_ckpt) or embedder
    tgt = _target_profile(cfg, manifest, ckpt, embedder)
    eval_manifest = manifest.subset([tgt.speaker_id], ["eval"])
    report = evaluate_system(
        eval_manifest,
        ckpt,
        meter,
        {tgt.speaker_id: tgt},
        include_c0=cfg.evaluation.include_c0,
        use_dtw=cfg.evaluation.dtw,
        system=cfg.system or ckpt.system,
    )
    report.save(run_dir / "report")
    print(comparison_table([report]), end="")


def cmd_ablation(cfg, run_dir: Path) -> None:
    result = run_ablation(cfg, run_dir)
    print(comparison_table(list(result["reports"].values())), end="")


HANDLERS = {
    "synth-corpus": cmd_synth_corpus,
    "pretrain-embedder": cmd_pretrain_embedder,
    "train-average": cmd_train_average,
    "adapt": cmd_adapt,
    "convert": cmd_convert,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
}


def configure_logging() -> None:
    name = os.environ.get("VCC_LOG_LEVEL", "warn").lower()
    if name not in LOG_LEVELS:
        raise InvalidConfig(f"VCC_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        cfg = resolve_config(args)
        if args.command == "ablation" and cfg.system is not None:
            cfg.systems = [cfg.system]
        _check_paths(args.command, cfg)
        if args.dry_run:
            for i, step in enumerate(plan(args.command, cfg), 1):
                print(f"{i}. {step}")
            return 0
        run_dir = new_run_dir(cfg.out, args.command)
        write_json(cfg.to_dict(), run_dir / "config.json")
        HANDLERS[args.command](cfg, run_dir)
        write_file_manifest(run_dir)
        log.info("run directory %s", run_dir)
        return 0
    except ValidationError as exc:
        print(f"amavc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"amavc: NonFiniteLoss: {exc}; last batch: {', '.join(exc.batch_ids)}", file=sys.stderr)
        return 1
    except AmavcError as exc:
        print(f"amavc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"amavc: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
