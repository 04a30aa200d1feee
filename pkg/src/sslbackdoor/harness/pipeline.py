"""Stage orchestration with resumable, hash-addressed artifacts.

A run lives in ``<out_root>/<config-hash>/``; each stage writes into its own
subdirectory and finishes by writing ``stage.json``. A stage whose
``stage.json`` exists and whose recorded inputs match is skipped, so an
interrupted run resumes where it stopped.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock

from ..distill import distill
from ..errors import ConfigError, SSLBackdoorError
from ..manifest import DatasetManifest, build_manifest
from ..poison import PoisonRecipe, build_patched_valset, materialize, poison_untargeted, apply_recipe
from ..probe import EvalReport, LinearProbe, evaluate, extract_embeddings, fit_probe
from ..seeding import derive_seed
from ..ssl.config import AugmentationPolicy
from ..ssl.train import EncoderCheckpoint, train
from .config import ExperimentConfig

log = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1


def tool_version() -> str:
    try:
        return metadata.version("sslbackdoor")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    run_dir: str
    stages: dict = field(default_factory=dict)
    baseline: dict | None = None
    tool_version: str = field(default_factory=tool_version)
    completed: bool = False
    schema_version: int = RECORD_SCHEMA_VERSION

    @property
    def report_path(self) -> Path:
        return Path(self.stages["eval"]["artifacts"]["report"])

    def report(self) -> EvalReport:
        return EvalReport.load(self.report_path)

    def baseline_report(self) -> EvalReport | None:
        return None if self.baseline is None else EvalReport.load(self.baseline["report"])

    def save(self) -> Path:
        path = Path(self.run_dir) / "record.json"
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / "record.json"
        return cls(**json.loads(path.read_text()))


class _Run:
    def __init__(self, config: ExperimentConfig, workers: int):
        self.config = config
        self.dir = config.run_dir()
        self.workers = workers
        self.record = RunRecord(config.config_hash(), json.loads(config.to_json()), str(self.dir))

    def stage(self, name: str, inputs: dict, body: Callable[[Path], dict]) -> dict:
        """Run ``body(stage_dir)`` unless a completed stage with the same inputs exists."""
        inputs = json.loads(json.dumps(inputs, sort_keys=True))
        sdir = self.dir / name
        marker = sdir / "stage.json"
        if marker.exists():
            done = json.loads(marker.read_text())
            if done.get("inputs") == inputs:
                log.info("stage %s: reusing %s", name, sdir)
                self.record.stages[name] = done
                return done
        sdir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            artifacts = body(sdir)
        except SSLBackdoorError as exc:
            raise type(exc)(
                f"stage {name!r} failed: {exc}. Completed stages are kept under {self.dir}; rerun to resume"
            ) from exc
        done = {
            "inputs": inputs,
            "artifacts": {k: v for k, v in artifacts.items() if not k.startswith("hash:")},
            "hashes": {k[5:]: v for k, v in artifacts.items() if k.startswith("hash:")},
            "seconds": round(time.perf_counter() - t0, 3),
        }
        marker.write_text(json.dumps(done, sort_keys=True, indent=1) + "\n")
        self.record.stages[name] = done
        return done


def _poison_train(config: ExperimentConfig, manifest: DatasetManifest) -> DatasetManifest:
    p, seed = config.poison, config.seeds.poison
    if p.mode == "targeted" and p.rate > 0:
        manifest = apply_recipe(manifest, PoisonRecipe.targeted(manifest, p.target, p.rate, config.trigger, seed))
    elif p.mode == "superclass" and p.within_class_fraction:
        recipe = PoisonRecipe.superclass(manifest, p.target_classes, p.within_class_fraction, config.trigger, seed)
        manifest = apply_recipe(manifest, recipe)
    elif p.mode == "untargeted" and p.rate > 0:
        manifest = poison_untargeted(manifest, p.rate, config.trigger, seed)
    if p.random_rate > 0:
        manifest = poison_untargeted(manifest, p.random_rate, config.trigger, derive_seed(seed, "random"))
    return manifest


def _run_stages(run: _Run, baseline: RunRecord | None = None) -> RunRecord:
    cfg = run.config

    def poison_stage(d: Path) -> dict:
        train_src = build_manifest(Path(cfg.data_root), "train")
        val = build_manifest(Path(cfg.data_root), "val")
        poisoned = _poison_train(cfg, train_src)
        if poisoned.n_poisoned:
            poisoned = materialize(poisoned, d / "train_data", workers=max(run.workers, 1))
        patched = materialize(build_patched_valset(val, cfg.trigger, cfg.seeds.val_patch), d / "val_patched",
                              workers=max(run.workers, 1))
        paths = {
            "train_manifest": str(poisoned.save(d / "manifest_train.json")),
            "val_manifest": str(val.save(d / "manifest_val.json")),
            "patched_val_manifest": str(patched.save(d / "manifest_val_patched.json")),
        }
        paths.update({
            "hash:train_manifest": poisoned.content_hash(),
            "hash:train_training": poisoned.training_hash(),
            "hash:val_manifest": val.content_hash(),
            "hash:patched_val_manifest": patched.content_hash(),
            "hash:n_poisoned": str(poisoned.n_poisoned),
        })
        return paths

    poison = run.stage("poison", {"config": run.record.config_hash}, poison_stage)
    manifests = {k: DatasetManifest.load(v) for k, v in poison["artifacts"].items()}
    train_m = manifests["train_manifest"]

    def train_stage(d: Path) -> dict:
        policy = AugmentationPolicy.for_method(cfg.method.method, cfg.image_size)
        ckpt = train(cfg.method, train_m, policy, cfg.view_mode, out_dir=d, workers=run.workers, resume=True)
        return {"checkpoint": str(d / "checkpoint.pt"), "log": str(d / "train_log.jsonl"),
                "hash:checkpoint": ckpt.content_hash()}

    trained = run.stage("train", {"train_manifest": poison["hashes"]["train_training"]}, train_stage)
    ckpt = EncoderCheckpoint.load(trained["artifacts"]["checkpoint"])

    def probe_stage(d: Path) -> dict:
        probe, subset = fit_probe(ckpt, train_m, cfg.probe)
        return {"probe": str(probe.save(d / "probe.npz")),
                "labeled_subset": str(subset.save(d / "manifest_labeled.json")),
                "hash:labeled_subset": subset.content_hash(),
                "train_accuracy": probe.train_accuracy}

    probed = run.stage("probe", {"checkpoint": trained["hashes"]["checkpoint"], "probe": cfg.probe.to_dict()},
                       probe_stage)
    probe = LinearProbe.load(probed["artifacts"]["probe"])

    def eval_stage(d: Path) -> dict:
        clean_e = extract_embeddings(ckpt, manifests["val_manifest"])
        patched_e = extract_embeddings(ckpt, manifests["patched_val_manifest"])
        clean_e.save(d / "embeddings_val.npz")
        patched_e.save(d / "embeddings_val_patched.npz")
        meta = {"config_hash": run.record.config_hash, "seeds": asdict(cfg.seeds),
                "train_manifest_hash": poison["hashes"]["train_manifest"],
                "n_poisoned": int(poison["hashes"]["n_poisoned"])}
        report = evaluate(probe, ckpt, manifests["val_manifest"], manifests["patched_val_manifest"],
                          cfg.poison.target, meta, clean_e, patched_e)
        (d / "report.txt").write_text(report.render() + "\n")
        return {"report": str(report.save(d / "report.json")),
                "embeddings_val": str(d / "embeddings_val.npz"),
                "embeddings_val_patched": str(d / "embeddings_val_patched.npz")}

    run.stage("eval", {"checkpoint": trained["hashes"]["checkpoint"], "probe": probed["inputs"]}, eval_stage)

    if cfg.distill is not None:
        dcfg = cfg.distill
        dname = _distill_stage_name(cfg)

        def distill_stage(d: Path) -> dict:
            clean_train = build_manifest(Path(cfg.data_root), "train")
            student = distill(ckpt, clean_train, dcfg, out_dir=d, workers=run.workers)
            sprobe, _ = fit_probe(student, clean_train, cfg.probe, check_provenance=False)
            sprobe.save(d / "probe.npz")
            meta = {"config_hash": run.record.config_hash, "teacher_hash": trained["hashes"]["checkpoint"],
                    "clean_fraction": dcfg.clean_fraction}
            report = evaluate(sprobe, student, manifests["val_manifest"], manifests["patched_val_manifest"],
                              cfg.poison.target, meta)
            (d / "report.txt").write_text(report.render() + "\n")
            return {"student": str(d / "student.pt"), "report": str(report.save(d / "report.json")),
                    "hash:student": student.content_hash()}

        run.stage(dname, {"checkpoint": trained["hashes"]["checkpoint"], "distill": dcfg.to_dict(),
                          "probe": cfg.probe.to_dict()}, distill_stage)

    if baseline is not None:
        run.record.baseline = {"config_hash": baseline.config_hash, "run_dir": baseline.run_dir,
                               "report": str(baseline.report_path)}
    run.record.completed = True
    run.record.save()
    return run.record


def _distill_stage_name(config: ExperimentConfig) -> str | None:
    return None if config.distill is None else f"distill-{config.distill.clean_fraction:g}"


def run_pipeline(config: ExperimentConfig, force: bool = False, workers: int = 0,
                 baseline: RunRecord | None = None) -> RunRecord:
    """Poison, train, probe and evaluate one configuration (no clean baseline).

    A completed run with the same config hash is returned as is unless ``force``.
    """
    run = _Run(config, workers)
    run.dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(run.dir / ".lock")):
        record_path = run.dir / "record.json"
        if record_path.exists() and not force:
            done = RunRecord.load(record_path)
            extra = _distill_stage_name(config)
            up_to_date = (
                done.completed
                and (extra is None or extra in done.stages)
                and (baseline is None or done.baseline is not None)
            )
            if up_to_date:
                return done
            run.record.stages.update(done.stages)
        if force:
            for marker in run.dir.glob("*/stage.json"):
                marker.unlink()
        run.dir.joinpath("config.json").write_text(config.to_json())
        return _run_stages(run, baseline)


def run_attack_pipeline(config: ExperimentConfig, force: bool = False, workers: int = 0) -> RunRecord:
    """Backdoored run plus its matched clean baseline (same seeds, zero poison)."""
    clean_cfg = config.clean_counterpart()
    clean = run_pipeline(clean_cfg, force=force, workers=workers)
    if config.config_hash() == clean_cfg.config_hash() and config.distill is None:
        return clean
    return run_pipeline(config, force=force, workers=workers, baseline=clean)


def _summary(record: RunRecord, label: str, target: str | None) -> dict:
    rep = record.report()
    t = None if target is None else rep.classes.index(target)
    return {
        "label": label,
        "config_hash": record.config_hash,
        "clean_acc": rep.clean_acc,
        "patched_acc": rep.patched_acc,
        "target_fp_clean": None if t is None else rep.fp_clean[t],
        "target_fp_patched": None if t is None else rep.fp_patched[t],
    }


def _write_analysis(directory: Path, name: str, payload: dict, text: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    (directory / f"{name}.txt").write_text(text + "\n")


def run_view_mode_analysis(config: ExperimentConfig, force: bool = False, workers: int = 0) -> dict:
    """Standard poisoning vs trigger in one view only vs one view plus class-agnostic poisons in both views."""
    if config.poison.mode != "targeted":
        raise ConfigError("the view-mode analysis needs a targeted poison config")
    rows = [
        ("target poison (both views)", replace(config, view_mode="standard")),
        ("target poison (1 view)", replace(config, view_mode="one_view_poisoned")),
        ("target (1 view) + random poison (both views)",
         replace(config, view_mode="random_poison_both_views",
                 poison=replace(config.poison, random_rate=config.poison.rate))),
    ]
    target = config.poison.target
    results = [_summary(run_attack_pipeline(cfg, force=force, workers=workers), label, target) for label, cfg in rows]
    clean = _summary(run_pipeline(config.clean_counterpart(), workers=workers), "clean model", target)
    payload = {"rows": results, "clean": clean, "rate": config.poison.rate, "target": target}
    lines = [f"{'experiment':<48}{'Acc':>8}{'FP':>8}"]
    lines += [f"{r['label']:<48}{r['patched_acc']:>8.1f}{r['target_fp_patched']:>8d}" for r in [clean, *results]]
    _write_analysis(config.run_dir() / "analyze-views", "views", payload, "\n".join(lines))
    return payload


def run_rate_ablation(config: ExperimentConfig, rates: Sequence[float], force: bool = False, workers: int = 0) -> dict:
    """One attack run per injection rate, sharing every non-poison seed."""
    rates = list(rates)
    if rates != sorted(rates, reverse=True):
        raise ConfigError(f"rates must be sorted in descending order, got {rates}")
    if config.poison.mode not in ("targeted", "untargeted"):
        raise ConfigError("rate ablation needs a targeted or untargeted config")
    target = config.poison.target
    series = []
    for r in rates:
        cfg = config.clean_counterpart() if r == 0 else replace(config, poison=replace(config.poison, rate=r))
        s = _summary(run_attack_pipeline(cfg, force=force, workers=workers), f"{100 * r:g}%", target)
        s["rate"] = r
        series.append(s)
    base = _summary(run_pipeline(config.clean_counterpart(), workers=workers), "clean model", target)
    payload = {"series": series, "clean_baseline": base, "target": target}
    metric = "target_fp_patched" if target is not None else "patched_acc"
    lines = [f"{'rate':>8}{metric:>20}{'clean acc':>12}"]
    lines += [f"{s['label']:>8}{s[metric]:>20}{s['clean_acc']:>12.1f}" for s in [*series, base]]
    _write_analysis(config.run_dir() / "ablate-rate", "ablation", payload, "\n".join(lines))
    return payload
