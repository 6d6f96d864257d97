"""Config-driven orchestration of the augmentation and synthetic-only runs.

A run is a DAG of stages (world generation, filtering, generator
training, sampling, extraction, SGG training, evaluation, reporting).
Every stage writes into its own content-addressed directory under
``<output>/stages/<name>-<key>`` where the key hashes the stage's
configuration fragment and the content hashes of its input artifacts;
re-running with identical inputs verifies the recorded output hashes and
skips the work. The ledger file records inputs, outputs, wall-clock and
seed per stage, and every file under the output root is reachable from
it.

Generator quality differs, so sampling overshoots the requested synthetic
dataset size and extraction truncates back to it, keeping the synthetic
dataset size equal across generators whenever survival rates allow.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .captions import CaptionTooLong, build_caption
from .conditioner import ConditionerConfig
from .detect import TemplateDetector, extract_annotations, oracle_detect, NoiseParams
from .diffusion import DiffusionModel, DiffusionSchedule, SampleRequest
from .filters import FilterPolicy, apply_filters
from .graphs import canonical_json
from .manifest import (
    GENERATOR_LABELS,
    DatasetManifest,
    ManifestRecord,
    save_png,
)
from .metrics import RecallAccumulator
from .report import EvalReport, build_report, render_tables
from .sgg import SggHyper, SggModel, train_sgg
from .world import WorldSpec, default_vocab, generate_world, to_model_array

OUTPUT_ROOT_ENV = "SGAUG_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class StageFailure(RuntimeError):
    """A pipeline stage raised; partial results stay on disk."""


def _label_to_config(label: str) -> ConditionerConfig:
    try:
        if label == "baseline":
            return ConditionerConfig("baseline")
        if label.startswith("config-"):
            return ConditionerConfig(int(label.split("-", 1)[1]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown generator label {label!r}")


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seeds: tuple[int, ...] = (0,)
    scenario: str = "augmentation"  # or "synthetic-only"
    world: WorldSpec = field(default_factory=WorldSpec)
    filter_policy: FilterPolicy = field(default_factory=FilterPolicy)
    generators: tuple[str, ...] = GENERATOR_LABELS
    real_size: int = 1000
    test_size: int = 500
    synthetic_size: int = 2000
    oversample: float = 1.25
    generator_training: dict = field(
        default_factory=lambda: {
            "steps": 2000, "batch_size": 8, "lr": 2e-3, "dim": 64,
            "base_channels": 32, "p_drop": 0.1, "schedule_T": 200,
        }
    )
    sampling: dict = field(
        default_factory=lambda: {"steps": 50, "guidance_scale": 2.0, "batch_size": 8}
    )
    extraction_threshold: float = 0.3
    extraction_detector: str = "template"  # or "oracle" (trust the requests)
    sgg: SggHyper = field(default_factory=SggHyper)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.generators = tuple(self.generators)
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.scenario not in ("augmentation", "synthetic-only"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for g in self.generators:
            _label_to_config(g)
        if self.scenario == "synthetic-only" and "baseline" not in self.generators:
            raise ConfigError("synthetic-only scenario needs the baseline generator row")
        if self.extraction_detector not in ("template", "oracle"):
            raise ConfigError(
                f"extraction_detector must be template or oracle, "
                f"got {self.extraction_detector!r}"
            )
        for name in ("real_size", "test_size", "synthetic_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return ExperimentConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        known = {
            "output_dir", "seeds", "scenario", "world", "filter", "generators",
            "real_size", "test_size", "synthetic_size", "oversample",
            "generator_training", "sampling", "extraction_threshold",
            "extraction_detector", "sgg",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict = {}
        for key in ("output_dir", "seeds", "scenario", "generators", "real_size",
                    "test_size", "synthetic_size", "oversample",
                    "extraction_threshold", "extraction_detector"):
            if key in raw:
                kwargs[key] = raw[key]
        try:
            if "world" in raw:
                world = dict(raw["world"])
                if "image_size" in world:
                    world["image_size"] = tuple(world["image_size"])
                kwargs["world"] = WorldSpec(**world)
            if "filter" in raw:
                kwargs["filter_policy"] = FilterPolicy(**raw["filter"])
            if "sgg" in raw:
                kwargs["sgg"] = SggHyper(**raw["sgg"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if "generator_training" in raw:
            base = ExperimentConfig().generator_training
            extra = set(raw["generator_training"]) - set(base)
            if extra:
                raise ConfigError(f"unknown generator_training keys: {sorted(extra)}")
            base.update(raw["generator_training"])
            kwargs["generator_training"] = base
        if "sampling" in raw:
            base = ExperimentConfig().sampling
            extra = set(raw["sampling"]) - set(base)
            if extra:
                raise ConfigError(f"unknown sampling keys: {sorted(extra)}")
            base.update(raw["sampling"])
            kwargs["sampling"] = base
        try:
            return ExperimentConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved_output(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def fragment(self, *names) -> dict:
        """Config fragment for stage keys; only what the stage depends on."""
        data = {
            "world": asdict(self.world),
            "filter": asdict(self.filter_policy),
            "generator_training": self.generator_training,
            "sampling": self.sampling,
            "extraction_threshold": self.extraction_threshold,
            "sgg": self.sgg.to_dict(),
            "real_size": self.real_size,
            "test_size": self.test_size,
            "synthetic_size": self.synthetic_size,
            "oversample": self.oversample,
        }
        return {k: data[k] for k in names}


def stage_seed(base_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{stage}".encode()).hexdigest()
    return int(digest[:8], 16) % (2**31 - 1)


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): _hash_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class RunLedger:
    """Persistent record of executed stages with content-addressed caching."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "ledger.json"
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def _save(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True))

    def run_stage(self, name: str, key_parts: dict, seed: int, builder) -> Path:
        """Execute ``builder(stage_dir)`` unless an identical run is cached.

        The stage key hashes ``key_parts`` (configuration fragment plus
        upstream artifact hashes). A cached stage is verified against its
        recorded output hashes before being trusted.
        """
        key = hashlib.sha256(canonical_json(key_parts).encode()).hexdigest()[:16]
        stage_id = f"{name}-{key}"
        stage_dir = self.out_dir / "stages" / stage_id
        entry = self.entries.get(stage_id)
        if entry and entry.get("status") == "done":
            outputs = entry.get("outputs", {})
            if all(
                (stage_dir / rel).exists() and _hash_file(stage_dir / rel) == digest
                for rel, digest in outputs.items()
            ):
                entry["cache_hits"] = entry.get("cache_hits", 0) + 1
                self._save()
                return stage_dir
        if stage_dir.exists():
            # Incomplete or stale stage: rebuild from scratch.
            import shutil

            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True, exist_ok=True)
        started = time.time()
        try:
            builder(stage_dir)
        except Exception as exc:
            self.entries[stage_id] = {
                "stage": name,
                "key_parts": key_parts,
                "seed": seed,
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
                "wall_clock": time.time() - started,
            }
            self._save()
            raise StageFailure(f"stage {name} failed: {exc}") from exc
        self.entries[stage_id] = {
            "stage": name,
            "key_parts": key_parts,
            "seed": seed,
            "status": "done",
            "outputs": _hash_tree(stage_dir),
            "wall_clock": time.time() - started,
        }
        self._save()
        return stage_dir

    def output_files(self) -> set[Path]:
        files = {self.path}
        for stage_id, entry in self.entries.items():
            for rel in entry.get("outputs", {}):
                files.add(self.out_dir / "stages" / stage_id / rel)
        return files


def _rebase(manifest: DatasetManifest, new_dir: Path) -> DatasetManifest:
    """Rewrite record image paths so they resolve from ``new_dir``."""
    records = []
    for rec in manifest.records:
        resolved = manifest.resolve(rec).resolve()
        rel = os.path.relpath(resolved, new_dir.resolve())
        records.append(
            ManifestRecord(rel, rec.graph, rec.caption, rec.freeform,
                           rec.provenance, rec.seed)
        )
    out = DatasetManifest(manifest.vocab, manifest.image_size, records, new_dir)
    return out


class ExperimentRunner:
    """Shared stage logic for one (config, seed) pipeline."""

    def __init__(self, cfg: ExperimentConfig, seed: int, ledger: RunLedger):
        self.cfg = cfg
        self.seed = seed
        self.ledger = ledger
        self.vocab = default_vocab()

    def _world_stage(self, role: str, n: int) -> Path:
        seed = stage_seed(self.seed, f"world-{role}")
        key = {"cfg": self.cfg.fragment("world"), "n": n, "seed": seed, "role": role}

        def build(stage_dir: Path):
            generate_world(n, self.cfg.world, seed, stage_dir, self.vocab)

        stage_dir = self.ledger.run_stage(f"world-{role}-s{self.seed}", key, seed, build)
        return stage_dir / "manifest.jsonl"

    def _filter_stage(self, role: str, manifest_path: Path) -> Path:
        key = {
            "cfg": self.cfg.fragment("filter"),
            "input": _hash_file(manifest_path),
            "role": role,
        }

        def build(stage_dir: Path):
            manifest = DatasetManifest.load(manifest_path)
            filtered, report = apply_filters(manifest, self.cfg.filter_policy)
            rebased = _rebase(filtered, stage_dir)
            rebased.save(stage_dir / "manifest.jsonl")
            (stage_dir / "filter-report.json").write_text(
                canonical_json(report.to_dict())
            )

        stage_dir = self.ledger.run_stage(f"filter-{role}-s{self.seed}", key,
                                          self.seed, build)
        return stage_dir / "manifest.jsonl"

    def _train_generator(self, label: str, train_manifest_path: Path) -> Path:
        gt = self.cfg.generator_training
        seed = stage_seed(self.seed, f"train-gen-{label}")
        key = {
            "cfg": self.cfg.fragment("world", "generator_training"),
            "label": label,
            "input": _hash_file(train_manifest_path),
            "seed": seed,
        }

        def build(stage_dir: Path):
            train_manifest = DatasetManifest.load(train_manifest_path)
            cfg_id = _label_to_config(label)
            model = DiffusionModel(
                self.vocab,
                cfg_id,
                sched=DiffusionSchedule(T=int(gt["schedule_T"])),
                dim=int(gt["dim"]),
                base_channels=int(gt["base_channels"]),
                p_drop=float(gt["p_drop"]),
                seed=seed,
            )
            images, graphs, caps = [], [], []
            for rec in train_manifest.records:
                img = train_manifest.load_image(rec)
                images.append(to_model_array(img))
                graphs.append(rec.graph)
                if cfg_id.uses_freeform_captions or rec.caption is None:
                    caps.append(None)  # model builds the right caption kind
                else:
                    caps.append(rec.caption)
            history = model.fit(
                images, graphs, caps,
                steps=int(gt["steps"]), batch_size=int(gt["batch_size"]),
                lr=float(gt["lr"]), seed=seed,
            )
            model.save(stage_dir / "generator.ckpt")
            (stage_dir / "history.json").write_text(canonical_json(history))

        return self.ledger.run_stage(
            f"train-gen-{label}-s{self.seed}", key, seed, build
        ) / "generator.ckpt"

    def _sample_stage(self, label: str, ckpt_path: Path,
                      request_manifest_path: Path) -> Path:
        smp = self.cfg.sampling
        seed = stage_seed(self.seed, f"sample-{label}")
        n_request = int(round(self.cfg.synthetic_size * self.cfg.oversample))
        key = {
            "cfg": self.cfg.fragment("sampling", "synthetic_size", "oversample"),
            "label": label,
            "ckpt": _hash_file(ckpt_path),
            "requests": _hash_file(request_manifest_path),
            "seed": seed,
        }

        def build(stage_dir: Path):
            model = DiffusionModel.load(ckpt_path)
            request_graphs = [
                r.graph for r in DatasetManifest.load(request_manifest_path).records
            ]
            graphs = [request_graphs[i % len(request_graphs)] for i in range(n_request)]
            req = SampleRequest(
                count=n_request,
                graphs=graphs,
                image_size=self.cfg.world.image_size,
                steps=int(smp["steps"]),
                guidance_scale=float(smp["guidance_scale"]),
                seed=seed,
                batch_size=int(smp["batch_size"]),
                caption_seed=seed,
            )
            images = model.sample(req)
            records = []
            for i, (img, graph) in enumerate(zip(images, graphs)):
                rel = f"images/{i:06d}.png"
                save_png(img, stage_dir / rel)
                caption = freeform = None
                if model.cfg.uses_freeform_captions:
                    from .captions import freeform_caption

                    freeform = freeform_caption(graph, self.vocab, seed)
                else:
                    try:
                        caption = build_caption(graph, self.vocab)
                    except CaptionTooLong:
                        caption = None
                records.append(
                    ManifestRecord(rel, graph, caption, freeform,
                                   f"synthetic:{label}", seed)
                )
            DatasetManifest(self.vocab, self.cfg.world.image_size, records).save(
                stage_dir / "manifest.jsonl"
            )

        stage_dir = self.ledger.run_stage(
            f"sample-{label}-s{self.seed}", key, seed, build
        )
        return stage_dir / "manifest.jsonl"

    def _extract_stage(self, label: str, sampled_path: Path) -> Path:
        key = {
            "cfg": self.cfg.fragment("extraction_threshold", "synthetic_size"),
            "detector": self.cfg.extraction_detector,
            "label": label,
            "input": _hash_file(sampled_path),
        }

        def build(stage_dir: Path):
            sampled = DatasetManifest.load(sampled_path)
            detector = TemplateDetector(self.vocab)
            records = []
            kept = dropped = 0
            for rec in sampled.records:
                if kept >= self.cfg.synthetic_size:
                    break
                img = sampled.load_image(rec)
                if self.cfg.extraction_detector == "oracle":
                    detections = oracle_detect(img, rec.graph, NoiseParams.pure())
                else:
                    detections = detector.detect(img, rec.graph)
                extracted = extract_annotations(
                    img, rec.graph, detections, self.cfg.extraction_threshold
                )
                if not extracted.relations:
                    dropped += 1
                    continue
                try:
                    caption = build_caption(extracted, self.vocab)
                except CaptionTooLong:
                    caption = None
                resolved = sampled.resolve(rec).resolve()
                rel = os.path.relpath(resolved, stage_dir.resolve())
                records.append(
                    ManifestRecord(rel, extracted, caption, rec.freeform,
                                   rec.provenance, rec.seed)
                )
                kept += 1
            DatasetManifest(self.vocab, sampled.image_size, records,
                            stage_dir).save(stage_dir / "manifest.jsonl")
            (stage_dir / "extract-report.json").write_text(
                canonical_json({"kept": kept, "dropped_no_relations": dropped,
                                "target": self.cfg.synthetic_size})
            )

        stage_dir = self.ledger.run_stage(
            f"extract-{label}-s{self.seed}", key, self.seed, build
        )
        return stage_dir / "manifest.jsonl"

    def _train_sgg_stage(self, tag: str, manifest_paths: list[Path]) -> Path:
        seed = stage_seed(self.seed, f"train-sgg-{tag}")
        key = {
            "cfg": self.cfg.fragment("sgg"),
            "tag": tag,
            "inputs": [_hash_file(p) for p in manifest_paths],
            "seed": seed,
        }

        def build(stage_dir: Path):
            manifests = [DatasetManifest.load(p) for p in manifest_paths]
            base = manifests[0]
            records = []
            for m in manifests:
                rebased = _rebase(m, stage_dir)
                records.extend(rebased.records)
            combined = DatasetManifest(base.vocab, base.image_size, records, stage_dir)
            hyper_dict = self.cfg.sgg.to_dict()
            hyper_dict["seed"] = seed
            model = train_sgg(combined, SggHyper(**hyper_dict))
            model.save(stage_dir / "sgg.ckpt")
            (stage_dir / "history.json").write_text(canonical_json(model.history))

        return self.ledger.run_stage(
            f"train-sgg-{tag}-s{self.seed}", key, seed, build
        ) / "sgg.ckpt"

    def _eval_stage(self, tag: str, model_path: Path,
                    test_manifest_path: Path) -> dict:
        key = {
            "model": _hash_file(model_path),
            "test": _hash_file(test_manifest_path),
            "tag": tag,
        }

        def build(stage_dir: Path):
            test_manifest = DatasetManifest.load(test_manifest_path)
            model = SggModel.load(model_path)
            acc = RecallAccumulator(self.vocab)
            for rec in test_manifest.records:
                if not rec.graph.relations:
                    continue
                img = test_manifest.load_image(rec)
                detections = oracle_detect(img, rec.graph, NoiseParams.pure())
                boxes = [d.bbox for d in detections]
                preds = model.predict(img, boxes, rec.graph.image_size
                                      or test_manifest.image_size)
                acc.add_image(preds, rec.graph)
            (stage_dir / "metrics.json").write_text(canonical_json(acc.results()))

        stage_dir = self.ledger.run_stage(
            f"eval-{tag}-s{self.seed}", key, self.seed, build
        )
        return json.loads((stage_dir / "metrics.json").read_text())


def _run_scenario(cfg: ExperimentConfig, seed: int,
                  ledger: RunLedger) -> dict[str, EvalReport]:
    runner = ExperimentRunner(cfg, seed, ledger)
    real = runner._world_stage("real", cfg.real_size)
    test = runner._world_stage("test", cfg.test_size)
    real_f = runner._filter_stage("real", real)
    test_f = runner._filter_stage("test", test)

    synthetic: dict[str, Path] = {}
    for label in cfg.generators:
        ckpt_path = runner._train_generator(label, real_f)
        sampled = runner._sample_stage(label, ckpt_path, real_f)
        synthetic[label] = runner._extract_stage(label, sampled)

    metrics: dict[str, dict] = {}
    if cfg.scenario == "augmentation":
        model_path = runner._train_sgg_stage("real-only", [real_f])
        metrics["real-only"] = runner._eval_stage("real-only", model_path, test_f)
        for label in cfg.generators:
            tag = f"aug-{label}"
            model_path = runner._train_sgg_stage(tag, [real_f, synthetic[label]])
            metrics[tag] = runner._eval_stage(tag, model_path, test_f)
        baseline_row = "real-only"
    else:
        for label in cfg.generators:
            tag = f"syn-{label}"
            model_path = runner._train_sgg_stage(tag, [synthetic[label]])
            metrics[tag] = runner._eval_stage(tag, model_path, test_f)
        baseline_row = "syn-baseline"

    def build_reports(stage_dir: Path):
        base_report = build_report(baseline_row, metrics[baseline_row])
        reports = []
        for tag, m in metrics.items():
            if tag == baseline_row:
                reports.append(base_report)
            else:
                reports.append(build_report(tag, m, base_report))
        for r in reports:
            (stage_dir / f"report-{r.name}.json").write_text(r.to_json())
        render_tables(reports, baseline_row, stage_dir)

    key = {"metrics": metrics, "baseline": baseline_row, "seed": seed,
           "scenario": cfg.scenario}
    stage_dir = ledger.run_stage(f"report-s{seed}", key, seed, build_reports)
    out = {}
    for tag in metrics:
        out[tag] = EvalReport.load(stage_dir / f"report-{tag}.json")
    return out


def run_augmentation_experiment(cfg: ExperimentConfig) -> dict[int, dict[str, EvalReport]]:
    """Real-only baseline plus real+synthetic training per generator, per seed."""
    if cfg.scenario != "augmentation":
        cfg = ExperimentConfig(**{**_cfg_kwargs(cfg), "scenario": "augmentation"})
    return _run_seeds(cfg)


def run_synthetic_only_experiment(cfg: ExperimentConfig) -> dict[int, dict[str, EvalReport]]:
    """Purely synthetic training sets; the plain-diffusion row is the baseline."""
    if cfg.scenario != "synthetic-only":
        cfg = ExperimentConfig(**{**_cfg_kwargs(cfg), "scenario": "synthetic-only"})
    return _run_seeds(cfg)


def _cfg_kwargs(cfg: ExperimentConfig) -> dict:
    return {
        "output_dir": cfg.output_dir,
        "seeds": cfg.seeds,
        "scenario": cfg.scenario,
        "world": cfg.world,
        "filter_policy": cfg.filter_policy,
        "generators": cfg.generators,
        "real_size": cfg.real_size,
        "test_size": cfg.test_size,
        "synthetic_size": cfg.synthetic_size,
        "oversample": cfg.oversample,
        "generator_training": cfg.generator_training,
        "sampling": cfg.sampling,
        "extraction_threshold": cfg.extraction_threshold,
        "sgg": cfg.sgg,
    }


def _run_seeds(cfg: ExperimentConfig) -> dict[int, dict[str, EvalReport]]:
    out_dir = cfg.resolved_output()
    ledger = RunLedger(out_dir)
    results: dict[int, dict[str, EvalReport]] = {}
    for seed in cfg.seeds:
        results[seed] = _run_scenario(cfg, seed, ledger)
    return results


def run_experiment(cfg: ExperimentConfig) -> dict[int, dict[str, EvalReport]]:
    if cfg.scenario == "augmentation":
        return run_augmentation_experiment(cfg)
    return run_synthetic_only_experiment(cfg)
