"""Command-line interface.

Exit codes: 0 on success, 2 on configuration/usage errors, 3 when a
pipeline stage fails partway (partial artifacts stay on disk for
inspection). The ``SGAUG_OUTPUT_ROOT`` environment variable prefixes
relative experiment output directories.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .conditioner import ConditionerConfig
from .detect import NoiseParams, TemplateDetector, extract_annotations, oracle_detect
from .diffusion import DiffusionModel, DiffusionSchedule, SampleRequest
from .experiment import (
    ConfigError,
    ExperimentConfig,
    StageFailure,
    run_experiment,
)
from .filters import FilterPolicy, apply_filters
from .graphs import canonical_json
from .manifest import DatasetManifest, ManifestRecord, save_png
from .metrics import RecallAccumulator
from .report import EvalReport, build_report, render_tables
from .sgg import SggHyper, SggModel, train_sgg
from .world import WorldSpec, default_vocab, generate_world, to_model_array

EXIT_CONFIG = 2
EXIT_STAGE = 3


@click.group()
def main():
    """Scene-graph-conditioned generation and SGG evaluation pipeline."""


@main.group()
def world():
    """Synthetic world commands."""


@world.command("gen")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "n_scenes", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--min-objects", default=2, show_default=True)
@click.option("--max-objects", default=4, show_default=True)
def world_gen(out_dir, n_scenes, seed, image_size, min_objects, max_objects):
    """Render scenes with ground-truth graphs into OUT."""
    spec = WorldSpec(image_size=(image_size, image_size),
                     min_objects=min_objects, max_objects=max_objects)
    manifest = generate_world(n_scenes, spec, seed, out_dir)
    click.echo(f"wrote {len(manifest)} scenes to {out_dir}")


@main.command("filter")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--min-image-side", default=48, show_default=True)
@click.option("--min-bbox-side", default=6, show_default=True)
@click.option("--max-relations", default=20, show_default=True)
@click.option("--max-caption-tokens", default=77, show_default=True)
@click.option("--paper-scale", is_flag=True,
              help="Use the full-scale thresholds (500/32) instead.")
def filter_cmd(manifest_path, out_path, min_image_side, min_bbox_side,
               max_relations, max_caption_tokens, paper_scale):
    """Apply the dataset filtering criteria to a manifest."""
    if paper_scale:
        policy = FilterPolicy.paper_scale(max_relations=max_relations,
                                          max_caption_tokens=max_caption_tokens)
    else:
        policy = FilterPolicy(min_image_side=min_image_side,
                              min_bbox_side=min_bbox_side,
                              max_relations=max_relations,
                              max_caption_tokens=max_caption_tokens)
    manifest = DatasetManifest.load(manifest_path)
    filtered, report = apply_filters(manifest, policy)
    from .experiment import _rebase

    out_path = Path(out_path)
    _rebase(filtered, out_path.parent).save(out_path)
    click.echo(canonical_json(report.to_dict()))


@main.command("train-gen")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "ckpt_path", required=True, type=click.Path())
@click.option("--config-id", default="baseline", show_default=True,
              help="baseline or 1..4")
@click.option("--steps", default=2000, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--base-channels", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_gen(manifest_path, ckpt_path, config_id, steps, batch_size, lr, dim,
              base_channels, seed):
    """Train the diffusion generator on a manifest."""
    cfg = ConditionerConfig(config_id if config_id == "baseline" else int(config_id))
    manifest = DatasetManifest.load(manifest_path)
    model = DiffusionModel(manifest.vocab, cfg, dim=dim,
                           base_channels=base_channels, seed=seed)
    images, graphs, caps = [], [], []
    for rec in manifest.records:
        images.append(to_model_array(manifest.load_image(rec)))
        graphs.append(rec.graph)
        caps.append(None if cfg.uses_freeform_captions else rec.caption)
    history = model.fit(images, graphs, caps, steps=steps, batch_size=batch_size,
                        lr=lr, seed=seed)
    Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt_path)
    click.echo(f"final loss {history[-1][1]:.4f}; checkpoint at {ckpt_path}")


@main.command("sample")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--graphs", "graphs_manifest", required=True, type=click.Path(exists=True),
              help="Manifest whose graphs condition the samples.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", default=16, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--guidance-scale", default=2.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
def sample_cmd(ckpt_path, graphs_manifest, out_dir, count, steps, guidance_scale,
               seed, batch_size):
    """Generate images conditioned on scene graphs."""
    model = DiffusionModel.load(ckpt_path)
    source = DatasetManifest.load(graphs_manifest)
    graphs = [r.graph for r in source.records]
    req = SampleRequest(count=count, graphs=graphs, image_size=source.image_size,
                        steps=steps, guidance_scale=guidance_scale, seed=seed,
                        batch_size=batch_size, caption_seed=seed)
    images = model.sample(req)
    out_dir = Path(out_dir)
    records = []
    label = model.cfg.label()
    for i, img in enumerate(images):
        rel = f"images/{i:06d}.png"
        save_png(img, out_dir / rel)
        records.append(ManifestRecord(rel, graphs[i % len(graphs)],
                                      provenance=f"synthetic:{label}", seed=seed))
    DatasetManifest(source.vocab, source.image_size, records).save(
        out_dir / "manifest.jsonl")
    click.echo(f"wrote {len(images)} samples to {out_dir}")


@main.command("extract")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--threshold", default=0.3, show_default=True)
def extract_cmd(manifest_path, out_path, threshold):
    """Verify requested graphs against generated images."""
    manifest = DatasetManifest.load(manifest_path)
    detector = TemplateDetector(manifest.vocab)
    records = []
    for rec in manifest.records:
        img = manifest.load_image(rec)
        detections = detector.detect(img, rec.graph)
        extracted = extract_annotations(img, rec.graph, detections, threshold)
        if not extracted.relations:
            continue
        import os

        rel = os.path.relpath(manifest.resolve(rec).resolve(),
                              Path(out_path).resolve().parent)
        records.append(ManifestRecord(rel, extracted, provenance=rec.provenance,
                                      seed=rec.seed))
    DatasetManifest(manifest.vocab, manifest.image_size, records).save(out_path)
    click.echo(f"kept {len(records)}/{len(manifest.records)} records")


@main.command("train-sgg")
@click.option("--manifest", "manifest_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "ckpt_path", required=True, type=click.Path())
@click.option("--obj-epochs", default=8, show_default=True)
@click.option("--rel-epochs", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_sgg_cmd(manifest_paths, ckpt_path, obj_epochs, rel_epochs, seed):
    """Train the SGG model on one or more manifests."""
    from .experiment import _rebase

    manifests = [DatasetManifest.load(p) for p in manifest_paths]
    base_dir = Path(ckpt_path).resolve().parent
    records = []
    for m in manifests:
        records.extend(_rebase(m, base_dir).records)
    combined = DatasetManifest(manifests[0].vocab, manifests[0].image_size,
                               records, base_dir)
    model = train_sgg(combined, SggHyper(obj_epochs=obj_epochs,
                                         rel_epochs=rel_epochs, seed=seed))
    base_dir.mkdir(parents=True, exist_ok=True)
    model.save(ckpt_path)
    click.echo(f"trained on {len(records)} records; checkpoint at {ckpt_path}")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--name", default="model", show_default=True)
def eval_cmd(model_path, manifest_path, out_path, name):
    """Evaluate an SGG checkpoint on a test manifest."""
    model = SggModel.load(model_path)
    manifest = DatasetManifest.load(manifest_path)
    acc = RecallAccumulator(manifest.vocab)
    for rec in manifest.records:
        if not rec.graph.relations:
            continue
        img = manifest.load_image(rec)
        detections = oracle_detect(img, rec.graph, NoiseParams.pure())
        preds = model.predict(img, [d.bbox for d in detections],
                              rec.graph.image_size or manifest.image_size)
        acc.add_image(preds, rec.graph)
    report = build_report(name, acc.results())
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(report.to_json())
    click.echo(report.to_json())


@main.command("report")
@click.option("--reports", "report_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--baseline", "baseline_name", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(report_paths, baseline_name, out_dir):
    """Render recall and per-predicate tables from report JSON files."""
    reports = [EvalReport.load(p) for p in report_paths]
    baseline = next((r for r in reports if r.name == baseline_name), None)
    if baseline is None:
        raise click.UsageError(f"baseline {baseline_name!r} not among reports")
    rebuilt = [
        r if r.name == baseline_name
        else build_report(r.name, {"recall": r.recall, "ng_recall": r.ng_recall,
                                   "per_predicate": r.per_predicate}, baseline)
        for r in reports
    ]
    paths = render_tables(rebuilt, baseline_name, out_dir)
    click.echo("\n".join(str(p) for p in paths))


@main.group()
def experiment():
    """Whole-scenario orchestration."""


@experiment.command("run")
@click.argument("config_path", type=click.Path(exists=True))
def experiment_run(config_path):
    """Run the configured scenario end to end (cached per stage)."""
    try:
        cfg = ExperimentConfig.from_file(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        results = run_experiment(cfg)
    except StageFailure as exc:
        click.echo(f"stage failure: {exc}", err=True)
        sys.exit(EXIT_STAGE)
    for seed, reports in results.items():
        for name, rep in reports.items():
            delta = rep.mean_delta or {}
            click.echo(
                f"seed {seed} {name}: R@K " +
                " ".join(f"{k}={v:.4f}" for k, v in sorted(rep.recall.items())) +
                (f" meanΔ={delta.get('recall'):+.4f}" if delta.get("recall") is not None
                 else "")
            )


if __name__ == "__main__":
    main()
