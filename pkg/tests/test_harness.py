import csv
import json
from dataclasses import replace
from pathlib import Path

import pytest
from conftest import tiny_config

from sslbackdoor.errors import ConfigError
from sslbackdoor.harness import ComparisonRow, ExperimentConfig, PoisonSpec, RunRecord, render_report
from sslbackdoor.harness import pipeline
from sslbackdoor.harness.cli import main
from sslbackdoor.harness.report import COLUMNS, count_inversions

PUBLISHED = Path(__file__).parent / "data" / "published_mocov2_rows.csv"


def published_rows(preset="imagenet-100"):
    with open(PUBLISHED) as f:
        return [ComparisonRow(r["target"], "moco_v2", preset, *(float(r[c]) for c in COLUMNS))
                for r in csv.DictReader(f)]


# --- configuration ------------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = tiny_config("/data", tmp_path, distill=True)
    assert ExperimentConfig.load(cfg.save(tmp_path / "c.json")) == cfg
    d = json.loads(cfg.to_json())
    d["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        replace(cfg, view_mode="sideways")


def test_config_hash_ignores_bookkeeping(tmp_path):
    cfg = tiny_config("/data", tmp_path)
    same = replace(cfg, out_root="elsewhere", name="renamed", distill=tiny_config("/data", tmp_path, distill=True).distill)
    assert same.config_hash() == cfg.config_hash()
    assert replace(cfg, seeds=replace(cfg.seeds, train=1)).config_hash() != cfg.config_hash()


def test_clean_counterpart_shared_across_poison_seeds(tmp_path):
    cfg = tiny_config("/data", tmp_path)
    other = replace(cfg, seeds=replace(cfg.seeds, poison=7), view_mode="one_view_poisoned")
    assert other.clean_counterpart().config_hash() == cfg.clean_counterpart().config_hash()
    assert cfg.clean_counterpart().is_clean and not cfg.is_clean


def test_stage_seeds_are_authoritative(tmp_path):
    cfg = tiny_config("/data", tmp_path)
    cfg = replace(cfg, seeds=replace(cfg.seeds, train=5, probe=6))
    assert cfg.method.seed == 5 and cfg.probe.seed == 6


def test_poison_spec_validation():
    with pytest.raises(ConfigError):
        PoisonSpec("sideways")
    with pytest.raises(ConfigError):
        PoisonSpec("targeted", ("a",), 1.5)
    with pytest.raises(ConfigError):
        PoisonSpec("untargeted", ("a",), 0.1)
    assert PoisonSpec("targeted", ("a",), 0.0).is_clean
    assert not PoisonSpec("targeted", ("a",), 0.0, random_rate=0.01).is_clean


# --- reporting -----------------------------------------------------------------------------------


def test_published_fixture_averages():
    text, payload = render_report(published_rows())
    avg = payload["averages"]["moco_v2"]
    assert f"{avg['clean_model_clean_acc']:.1f}" == "49.9"
    assert f"{avg['backdoored_patched_fp']:.1f}" == "461.1"
    last = text.splitlines()[-1].split()
    assert last[0] == "Average" and "49.9" in last and "461.1" in last


def test_published_remaining_averages():
    avg = render_report(published_rows())[1]["averages"]["moco_v2"]
    got = {k: round(v, 1) for k, v in avg.items()}
    assert got["clean_model_patched_acc"] == 47.0
    assert (got["backdoored_clean_acc"], got["backdoored_clean_fp"], got["backdoored_patched_acc"]) == (50.1, 27.6, 42.5)
    # the published clean-model FP averages (23.0 and 22.8) are not the means of the published rows
    assert (got["clean_model_clean_fp"], got["clean_model_patched_fp"]) == (29.2, 29.6)


def test_single_row_average_is_the_row():
    row = published_rows()[0]
    avg = render_report([row])[1]["averages"]["moco_v2"]
    assert [avg[c] for c in COLUMNS] == row.values()


def test_mixed_presets_refused():
    rows = published_rows()[:2] + published_rows("cifar10")[:1]
    with pytest.raises(ConfigError, match="presets"):
        render_report(rows)
    with pytest.raises(ConfigError):
        render_report([])


def test_averages_per_method():
    a = published_rows()[:3]
    b = [replace(r, method="byol", backdoored_patched_fp=1.0) for r in a]
    payload = render_report(a + b)[1]
    assert payload["averages"]["byol"]["backdoored_patched_fp"] == 1.0
    assert payload["averages"]["moco_v2"]["backdoored_patched_fp"] == pytest.approx((458 + 1480 + 103) / 3)


def test_count_inversions():
    assert count_inversions([100, 90, 80, 10]) == 0
    assert count_inversions([100, 110, 80]) == 0  # inside the 20% band
    assert count_inversions([100, 130, 80, 120]) == 2


# --- pipeline on the toy dataset ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def attack(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = tiny_config(toy_root, out, distill=True)
    return cfg, pipeline.run_attack_pipeline(cfg)


def test_attack_record(attack):
    cfg, rec = attack
    assert rec.completed and rec.config_hash == cfg.config_hash()
    assert set(rec.stages) == {"poison", "train", "probe", "eval", "distill-0.5"}
    assert rec.stages["poison"]["hashes"]["n_poisoned"] == "8"
    assert rec.baseline["config_hash"] == cfg.clean_counterpart().config_hash()
    rep, base = rec.report(), rec.baseline_report()
    assert rep.n_val == base.n_val == 32
    assert rep.metadata["n_poisoned"] == 8 and base.metadata["n_poisoned"] == 0
    assert RunRecord.load(rec.run_dir) == rec
    row = ComparisonRow.from_record(rec)
    assert row.label == "class_1" and row.backdoored_patched_acc == rep.patched_acc


def test_rerun_is_a_no_op(attack, monkeypatch):
    cfg, rec = attack

    def boom(*a, **k):
        raise AssertionError("stage recomputed")

    monkeypatch.setattr(pipeline, "train", boom)
    monkeypatch.setattr(pipeline, "distill", boom)
    again = pipeline.run_attack_pipeline(cfg)
    assert again == rec


def test_interrupted_run_resumes_stage_by_stage(attack, monkeypatch):
    cfg, rec = attack
    run_dir = Path(rec.run_dir)
    (run_dir / "record.json").unlink()
    (run_dir / "eval" / "stage.json").unlink()
    monkeypatch.setattr(pipeline, "train", lambda *a, **k: pytest.fail("train stage recomputed"))
    resumed = pipeline.run_pipeline(cfg, baseline=RunRecord.load(rec.baseline["run_dir"]))
    assert resumed.report() == rec.report()
    assert resumed.stages["train"] == rec.stages["train"]


def test_force_recomputes(toy_root, tmp_path, monkeypatch):
    cfg = tiny_config(toy_root, tmp_path, rate=0.0)
    first = pipeline.run_pipeline(cfg)
    calls, real = [], pipeline.train
    monkeypatch.setattr(pipeline, "train", lambda *a, **k: calls.append(1) or real(*a, **k))
    again = pipeline.run_pipeline(cfg, force=True)
    assert calls == [1]
    assert again.stages["train"]["hashes"] == first.stages["train"]["hashes"]


def test_zero_poison_equals_clean(attack, toy_root):
    cfg, rec = attack
    zero = replace(cfg, poison=replace(cfg.poison, rate=0.0), distill=None)
    same = pipeline.run_attack_pipeline(zero)
    assert same.baseline["config_hash"] == rec.baseline["config_hash"]
    base = RunRecord.load(same.baseline["run_dir"])
    assert same.stages["train"]["hashes"] == base.stages["train"]["hashes"]
    row = ComparisonRow.from_record(same)
    assert row.values()[:4] == row.values()[4:]


def test_distilled_report_exists(attack):
    _, rec = attack
    d = rec.stages["distill-0.5"]
    assert Path(d["artifacts"]["student"]).exists()
    assert json.loads(Path(d["artifacts"]["report"]).read_text())["n_val"] == 32


def test_rate_ablation(attack):
    cfg, rec = attack
    cfg = replace(cfg, distill=None)
    with pytest.raises(ConfigError, match="descending"):
        pipeline.run_rate_ablation(cfg, [0.0, 0.0625])
    payload = pipeline.run_rate_ablation(cfg, [0.0625, 0.0])
    assert [s["rate"] for s in payload["series"]] == [0.0625, 0.0]
    assert payload["series"][0]["config_hash"] == rec.config_hash
    zero = {k: v for k, v in payload["series"][1].items() if k not in ("label", "rate")}
    base = {k: v for k, v in payload["clean_baseline"].items() if k != "label"}
    assert zero == base
    assert (Path(cfg.run_dir()) / "ablate-rate" / "ablation.txt").exists()


def test_view_mode_analysis_needs_targeted(toy_root, tmp_path):
    cfg = tiny_config(toy_root, tmp_path)
    with pytest.raises(ConfigError):
        pipeline.run_view_mode_analysis(replace(cfg, poison=PoisonSpec("untargeted", (), 0.05)))


def test_view_mode_analysis(attack):
    cfg, rec = attack
    payload = pipeline.run_view_mode_analysis(replace(cfg, distill=None))
    assert [r["label"] for r in payload["rows"]][0] == "target poison (both views)"
    assert payload["rows"][0]["config_hash"] == rec.config_hash
    assert len({r["config_hash"] for r in payload["rows"]}) == 3
    assert payload["clean"]["config_hash"] == rec.baseline["config_hash"]


# --- command line ------------------------------------------------------------------------------------


def test_cli_trigger(tmp_path, capsys):
    assert main(["trigger", "--out", str(tmp_path / "t.png"), "--patch-size", "7"]) == 0
    assert (tmp_path / "t.png").exists()


def test_cli_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"preset": "cifar10"}')
    assert main(["attack", "--config", str(tmp_path / "c.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_missing_data_exit_3(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "nowhere", tmp_path / "runs")
    assert main(["attack", "--config", str(cfg.save(tmp_path / "c.json"))]) == 3


def test_cli_strict_provenance_exit_5(attack, toy_root, tmp_path, capsys):
    cfg, rec = attack
    a = {k: v for k, v in rec.stages["poison"]["artifacts"].items()}
    argv = ["eval", "--checkpoint", rec.stages["train"]["artifacts"]["checkpoint"],
            "--probe", rec.stages["probe"]["artifacts"]["probe"],
            "--clean-val", a["val_manifest"], "--patched-val", a["patched_val_manifest"],
            "--target-class", "class_1", "--out", str(tmp_path / "r.json")]
    assert main(argv + ["--train-manifest", a["train_manifest"], "--strict"]) == 0
    base = RunRecord.load(rec.baseline["run_dir"])
    clean_train = base.stages["poison"]["artifacts"]["train_manifest"]
    assert main(argv + ["--train-manifest", clean_train, "--strict"]) == 5


def test_cli_report(attack, tmp_path, capsys):
    _, rec = attack
    out = tmp_path / "t.json"
    assert main(["report", rec.run_dir, "--json", str(out)]) == 0
    assert "Average" in capsys.readouterr().out
    assert json.loads(out.read_text())["preset"] == "cifar10"
