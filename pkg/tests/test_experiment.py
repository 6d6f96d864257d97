import json
from pathlib import Path

import pytest

from sgaug.experiment import (
    ConfigError,
    ExperimentConfig,
    RunLedger,
    run_experiment,
    stage_seed,
)


def tiny_config(out_dir, scenario="augmentation", generators=("config-1",),
                seeds=(0,)):
    # oracle extraction: a 12-step generator draws unrecognizable blobs, so
    # template verification would starve the synthetic sets at this scale
    return ExperimentConfig.from_dict({
        "output_dir": str(out_dir),
        "seeds": list(seeds),
        "scenario": scenario,
        "world": {"image_size": [24, 24], "max_objects": 3},
        "filter": {"min_image_side": 16, "min_bbox_side": 3},
        "generators": list(generators),
        "real_size": 30,
        "test_size": 12,
        "synthetic_size": 10,
        "generator_training": {"steps": 12, "batch_size": 4, "dim": 32,
                               "base_channels": 8},
        "sampling": {"steps": 4, "batch_size": 8},
        "extraction_detector": "oracle",
        "sgg": {"obj_epochs": 2, "rel_epochs": 2},
    })


def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"scenario": "bogus"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"generators": ["config-7"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"unknown_key": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(
            {"scenario": "synthetic-only", "generators": ["config-1"]}
        )


def test_stage_seed_stable():
    assert stage_seed(0, "world-real") == stage_seed(0, "world-real")
    assert stage_seed(0, "world-real") != stage_seed(1, "world-real")
    assert stage_seed(0, "world-real") != stage_seed(0, "world-test")


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = tiny_config(out)
    results = run_experiment(cfg)
    return out, cfg, results


def test_smoke_emits_reports_and_tables(smoke_run):
    out, cfg, results = smoke_run
    reports = results[0]
    assert set(reports) == {"real-only", "aug-config-1"}
    report_dirs = list((out / "stages").glob("report-s0-*"))
    assert len(report_dirs) == 1
    files = {p.name for p in report_dirs[0].iterdir()}
    assert "table-recall.md" in files and "table-predicates.md" in files
    assert "table-recall.csv" in files and "table-predicates.csv" in files


def test_real_only_row_has_no_delta(smoke_run):
    out, cfg, results = smoke_run
    assert results[0]["real-only"].mean_delta is None
    table = next((out / "stages").glob("report-s0-*/table-recall.md")).read_text()
    base_line = next(l for l in table.splitlines() if l.startswith("| real-only"))
    cells = [c.strip() for c in base_line.split("|")[1:-1]]
    assert cells[4] == "-"


def test_rerun_is_cached_noop(smoke_run):
    out, cfg, results = smoke_run
    ledger_before = json.loads((out / "ledger.json").read_text())
    report_dir = next((out / "stages").glob("report-s0-*"))
    before = {p.name: p.read_bytes() for p in report_dir.iterdir()}
    results2 = run_experiment(cfg)
    ledger_after = json.loads((out / "ledger.json").read_text())
    after = {p.name: p.read_bytes() for p in report_dir.iterdir()}
    assert before == after
    for stage_id, entry in ledger_after.items():
        assert entry.get("cache_hits", 0) >= 1, stage_id
        assert entry["outputs"] == ledger_before[stage_id]["outputs"]
    for name in results[0]:
        assert results2[0][name].to_json() == results[0][name].to_json()


def test_ledger_reaches_every_file(smoke_run):
    out, cfg, results = smoke_run
    ledger = RunLedger(out)
    reachable = {p.resolve() for p in ledger.output_files()}
    on_disk = {p.resolve() for p in out.rglob("*") if p.is_file()}
    assert on_disk <= reachable
    missing = reachable - on_disk
    assert not missing


def test_synthetic_only_rows(tmp_path):
    cfg = tiny_config(tmp_path / "synth", scenario="synthetic-only",
                      generators=("baseline", "config-2"))
    results = run_experiment(cfg)
    reports = results[0]
    assert set(reports) == {"syn-baseline", "syn-config-2"}
    assert reports["syn-baseline"].mean_delta is None
    assert reports["syn-config-2"].baseline_name == "syn-baseline"
    for rep in reports.values():
        for family in (rep.recall, rep.ng_recall):
            for v in family.values():
                assert 0.0 <= v <= 1.0


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SGAUG_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = ExperimentConfig.from_dict({"output_dir": "nested/run"})
    assert cfg.resolved_output() == tmp_path / "root" / "nested" / "run"
    monkeypatch.delenv("SGAUG_OUTPUT_ROOT")
    assert ExperimentConfig.from_dict(
        {"output_dir": "nested/run"}
    ).resolved_output() == Path("nested/run")
