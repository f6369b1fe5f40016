"""Experiment configuration and the end-to-end four-system ablation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

from .archive import file_sha256, write_json
from .embedder import EmbedderCheckpoint, EmbedderConfig, EmbedderTrainConfig, pretrain_embedder, verify_frozen
from .errors import InvalidConfig
from .evaluation import EvalReport, comparison_table, evaluate_system
from .features import CorpusManifest, load_manifest
from .runtime import SpeakerProfile, build_profile
from .synthetic import SynthesisConfig, generate, speaker_separation_score
from .training import (
    SYSTEMS,
    TrainConfig,
    adapt,
    initial_average_model,
    normalize_system,
    train_average,
    uses_speaker_embedding,
)

log = logging.getLogger(__name__)


def _from_dict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InvalidConfig(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad value in {where}: {exc}") from exc


@dataclasses.dataclass
class EmbedderSection:
    n_res_blocks: int = 5
    channels: int = 64
    embedding_dim: int = 128
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    splits: list[str] = dataclasses.field(default_factory=lambda: ["train"])
    seed_offset: int = 0

    def model_config(self, input_dim: int) -> EmbedderConfig:
        return EmbedderConfig(input_dim, self.n_res_blocks, self.channels, self.embedding_dim)

    def train_config(self, seed: int) -> EmbedderTrainConfig:
        return EmbedderTrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=seed + self.seed_offset,
            splits=tuple(self.splits),
        )


@dataclasses.dataclass
class StageSection:
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 3e-3


@dataclasses.dataclass
class ModelSection:
    # desk scale: a 4-layer stack of this width trains far too slowly on one CPU
    hidden: int = 64
    n_recurrent_layers: int = 2


@dataclasses.dataclass
class EvaluationSection:
    include_c0: bool = False
    dtw: bool = False
    # measure CCD with a separately trained embedder (other seed, train+adapt
    # data) instead of the loss network the RC systems were optimised through
    independent_embedder: bool = False


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 7
    out: str = "runs"
    alpha: float = 0.2
    corpus: SynthesisConfig = dataclasses.field(default_factory=SynthesisConfig)
    manifest: str | None = None
    strict_dims: bool = True
    embedder: EmbedderSection = dataclasses.field(default_factory=EmbedderSection)
    measurement_embedder: EmbedderSection = dataclasses.field(
        default_factory=lambda: EmbedderSection(splits=["train", "adapt"], seed_offset=1000)
    )
    model: ModelSection = dataclasses.field(default_factory=ModelSection)
    average: StageSection = dataclasses.field(default_factory=StageSection)
    adaptation: StageSection = dataclasses.field(default_factory=lambda: StageSection(steps=150, learning_rate=1e-3))
    systems: list[str] = dataclasses.field(default_factory=lambda: list(SYSTEMS))
    targets: list[str] | None = None
    evaluation: EvaluationSection = dataclasses.field(default_factory=EvaluationSection)
    # paths consumed by the single-stage subcommands
    embedder_ckpt: str | None = None
    measurement_embedder_ckpt: str | None = None
    checkpoint: str | None = None
    target: str | None = None
    source: str | None = None
    source_profile: str | None = None
    target_profile: str | None = None
    system: str | None = None
    steps: int | None = None

    _SECTIONS = {
        "corpus": SynthesisConfig,
        "embedder": EmbedderSection,
        "measurement_embedder": EmbedderSection,
        "model": ModelSection,
        "average": StageSection,
        "adaptation": StageSection,
        "evaluation": EvaluationSection,
    }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("experiment config must be a JSON object")
        base = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, val in doc.items():
            section = cls._SECTIONS.get(key)
            if section is None:
                values[key] = val
                continue
            merged = {**_section_dict(getattr(base, key)), **val} if isinstance(val, dict) else val
            values[key] = _from_dict(section, merged, key)
        cfg = dataclasses.replace(base, **values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise InvalidConfig(f"config: file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config: {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        self.systems = [normalize_system(s) for s in self.systems]
        if not self.systems:
            raise InvalidConfig("systems: at least one system is required")
        if self.system is not None:
            self.system = normalize_system(self.system)
        if self.alpha < 0:
            raise InvalidConfig("alpha must be non-negative")
        for name in ("average", "adaptation"):
            sec = getattr(self, name)
            if sec.steps < 1 or sec.batch_size < 1 or sec.learning_rate <= 0:
                raise InvalidConfig(f"{name}: steps/batch_size must be >= 1 and learning_rate > 0")
        if self.manifest is None:
            self.corpus.validate()

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["corpus"] = self.corpus.to_dict()
        return doc

    def train_config(self, system: str, stage: str) -> TrainConfig:
        sec = self.average if stage == "average" else self.adaptation
        return TrainConfig(
            system=system,
            alpha=self.alpha,
            steps=sec.steps,
            batch_size=sec.batch_size,
            learning_rate=sec.learning_rate,
            seed=self.seed,
            embedder_ckpt=self.embedder_ckpt,
            hidden=self.model.hidden,
            n_recurrent_layers=self.model.n_recurrent_layers,
        )


def _section_dict(obj) -> dict:
    if isinstance(obj, SynthesisConfig):
        return obj.to_dict()
    return dataclasses.asdict(obj)


def prepare_corpus(cfg: ExperimentConfig, run_dir: Path) -> CorpusManifest:
    if cfg.manifest:
        return load_manifest(cfg.manifest, strict=cfg.strict_dims)
    generate(cfg.corpus, run_dir / "corpus")
    return load_manifest(run_dir / "corpus" / "manifest.json", strict=cfg.strict_dims)


def target_list(cfg: ExperimentConfig, manifest: CorpusManifest) -> list[str]:
    targets = cfg.targets or manifest.speakers_in("adapt")
    missing = [t for t in targets if t not in manifest.speakers_in("adapt")]
    if missing or not targets:
        raise InvalidConfig(f"targets: no adapt split for {missing or 'any speaker'}")
    return targets


def execution_plan(cfg: ExperimentConfig) -> list[str]:
    plan = ["generate synthetic corpus" if not cfg.manifest else f"load manifest {cfg.manifest}"]
    plan.append(f"pretrain loss-network embedder ({cfg.embedder.steps} steps, splits {cfg.embedder.splits})")
    if cfg.evaluation.independent_embedder:
        plan.append(f"pretrain measurement embedder ({cfg.measurement_embedder.steps} steps)")
    for system in cfg.systems:
        plan.append(f"{system}: average training {cfg.average.steps} steps, alpha {cfg.train_config(system, 'average').effective_alpha}")
        plan.append(f"{system}: adapt to each target for {cfg.adaptation.steps} steps, evaluate eval split")
    plan.append("write comparison report")
    return plan


def run_ablation(cfg: ExperimentConfig, run_dir) -> dict:
    """Train, adapt and evaluate every configured system; write reports under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest = prepare_corpus(cfg, run_dir)
    targets = target_list(cfg, manifest)
    separation = speaker_separation_score(manifest)
    log.info("corpus %s: %d utterances, separation score %.2f", manifest.corpus_name, len(manifest.utterances), separation)

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    loss_net = pretrain_embedder(
        manifest, cfg.embedder.model_config(manifest.dims.mcc), cfg.embedder.train_config(cfg.seed)
    )
    loss_net.save(ckpt_dir / "embedder")
    pristine = loss_net.snapshot()
    if cfg.evaluation.independent_embedder:
        meter = pretrain_embedder(
            manifest,
            cfg.measurement_embedder.model_config(manifest.dims.mcc),
            cfg.measurement_embedder.train_config(cfg.seed),
        )
        meter.save(ckpt_dir / "measurement_embedder")
    else:
        meter = loss_net

    profiles_plain = {t: build_profile(manifest.subset([t], ["adapt"]).utterances) for t in targets}
    profiles_se = {t: build_profile(manifest.subset([t], ["adapt"]).utterances, loss_net) for t in targets}
    profile_dir = run_dir / "profiles"
    profile_dir.mkdir(exist_ok=True)
    for t, p in profiles_se.items():
        p.save(profile_dir / f"{t}.json")

    eval_manifest = manifest.subset(targets, ["eval"])
    # reference point for reconstruction quality: an AMA-R network before any update
    untrained, *_ = initial_average_model(manifest, cfg.train_config("AMA-R", "average"))
    untrained_report = evaluate_system(
        eval_manifest, untrained, meter, profiles_plain, cfg.evaluation.include_c0, cfg.evaluation.dtw, "untrained"
    )
    reports: dict[str, EvalReport] = {}
    freeze_checks: dict[str, bool] = {}
    hashes: dict[str, str] = {"embedder": loss_net.parameter_hash, "measurement_embedder": meter.parameter_hash}
    logs_dir = run_dir / "logs"
    logs_dir.mkdir(exist_ok=True)
    for system in cfg.systems:
        avg, avg_log = train_average(manifest, cfg.train_config(system, "average"), embedder=loss_net)
        slug = system.lower()
        avg.save(ckpt_dir / f"{slug}_average")
        avg_log.save(logs_dir / f"{slug}_average.jsonl")
        hashes[f"{slug}_average"] = avg.parameter_hash
        adapted = {}
        for t in targets:
            ckpt, ad_log = adapt(avg, manifest.subset([t], ["adapt"]), cfg.train_config(system, "adapt"), embedder=loss_net)
            ckpt.save(ckpt_dir / f"{slug}_{t}")
            ad_log.save(logs_dir / f"{slug}_{t}.jsonl")
            hashes[f"{slug}_{t}"] = ckpt.parameter_hash
            adapted[t] = ckpt
        freeze_checks[system] = verify_frozen(pristine, loss_net)
        profiles = profiles_se if uses_speaker_embedding(system) else profiles_plain
        report = evaluate_system(
            eval_manifest,
            adapted,
            meter,
            profiles,
            include_c0=cfg.evaluation.include_c0,
            use_dtw=cfg.evaluation.dtw,
            system=system,
        )
        (run_dir / "reports").mkdir(exist_ok=True)
        report.save(run_dir / "reports" / slug)
        reports[system] = report
        log.info("%s: MCD %.3f dB, CCD %.4f", system, report.average_mcd, report.average_ccd)

    summary = {
        "seed": cfg.seed,
        "targets": targets,
        "separation_score": separation,
        "embedder_heldout_accuracy": loss_net.metadata["heldout_accuracy"],
        "measurement_embedder_heldout_accuracy": meter.metadata["heldout_accuracy"],
        "embedder_frozen": freeze_checks,
        "untrained_mcd": untrained_report.average_mcd,
        "checkpoint_hashes": hashes,
        "systems": {s: {"average_mcd": r.average_mcd, "average_ccd": r.average_ccd, "n_utterances": r.n_utterances} for s, r in reports.items()},
    }
    write_json(summary, run_dir / "ablation_report.json")
    (run_dir / "ablation_report.txt").write_text(comparison_table(list(reports.values())), encoding="utf-8")
    log.info("ablation finished in %.1f s", time.perf_counter() - t0)
    return {"reports": reports, "summary": summary, "manifest": manifest, "embedder": loss_net, "meter": meter}


def write_file_manifest(run_dir) -> dict:
    """Record every produced file under ``run_dir`` with its SHA-256."""
    run_dir = Path(run_dir)
    files = {
        p.relative_to(run_dir).as_posix(): file_sha256(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "files.json"
    }
    write_json(files, run_dir / "files.json")
    return files
