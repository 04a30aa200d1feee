"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 provenance mismatch.
"""
from __future__ import annotations

import argparse
import os
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..distill import DistillConfig, distill
from ..errors import ConfigError, DataError, SSLBackdoorError
from ..manifest import DatasetManifest, build_manifest
from ..poison import (
    PoisonRecipe,
    apply_recipe,
    build_patched_valset,
    materialize,
    poison_untargeted,
)
from ..probe import (
    LinearProbe,
    ProbeConfig,
    SampleSpec,
    evaluate,
    export_embeddings,
    extract_embeddings,
    fit_probe,
)
from ..seeding import DEVICE_ENV
from ..ssl.config import METHODS, VIEW_MODES, AugmentationPolicy, MethodConfig
from ..ssl.train import EncoderCheckpoint, train
from ..trigger import DEFAULT_TRIGGER_SEED, TriggerSpec, default_patch_size, generate_trigger, load_trigger, save_trigger
from .config import ExperimentConfig
from .pipeline import RunRecord, run_attack_pipeline, run_rate_ablation, run_view_mode_analysis
from .report import render_report

log = logging.getLogger("sslbackdoor")


def _trigger_spec(args, width: int | None = None, height: int | None = None) -> TriggerSpec:
    size = args.patch_size or (default_patch_size(width, height) if width else None)
    if size is None:
        raise ConfigError("--patch-size is required")
    return TriggerSpec(args.trigger_id, size, args.trigger_seed)


def cmd_trigger(args) -> int:
    if args.from_file:
        trig = load_trigger(args.from_file, args.trigger_id, args.patch_size)
    else:
        trig = generate_trigger(_trigger_spec(args))
    sized, base = save_trigger(trig, args.out)
    print(sized)
    return 0


def cmd_poison(args) -> int:
    src = Path(args.input)
    manifest = build_manifest(src, "train")
    first = manifest.entries[0]
    spec = _trigger_spec(args, first.width, first.height)
    if args.mode == "targeted":
        if len(args.target_class or []) != 1:
            raise ConfigError("targeted mode takes exactly one --target-class")
        recipe = PoisonRecipe.targeted(manifest, args.target_class[0], args.rate, spec, args.seed)
        poisoned = apply_recipe(manifest, recipe)
    elif args.mode == "superclass":
        if args.within_class_fraction is None:
            raise ConfigError("superclass mode needs --within-class-fraction")
        recipe = PoisonRecipe.superclass(manifest, args.target_class or [], args.within_class_fraction, spec, args.seed)
        poisoned = apply_recipe(manifest, recipe)
    else:
        poisoned = poison_untargeted(manifest, args.rate, spec, args.seed)
    out = materialize(poisoned, args.out, workers=args.workers)
    print(f"{out.n_poisoned} of {len(out)} training images poisoned -> {Path(args.out) / 'manifest_train.json'}")
    if args.patched_val_seed is not None:
        val = build_manifest(src, "val")
        patched = materialize(build_patched_valset(val, spec, args.patched_val_seed),
                              Path(args.out) / "patched", workers=args.workers)
        val.save(Path(args.out) / "manifest_val_clean.json")
        print(f"{len(patched)} patched validation images -> {Path(args.out) / 'patched' / 'manifest_val.json'}")
    return 0


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.config:
        try:
            cfg = MethodConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read method config {args.config}: {exc}") from exc
        if cfg.method != args.method:
            raise ConfigError(f"--method {args.method} disagrees with config method {cfg.method}")
    else:
        cfg = MethodConfig.preset(args.method, args.scale)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    size = args.image_size or manifest.entries[0].width
    policy = AugmentationPolicy.for_method(cfg.method, size)
    train(cfg, manifest, policy, args.view_mode, out_dir=args.out, workers=args.workers,
          resume=args.resume, log_crops=args.log_crops)
    print(Path(args.out) / "checkpoint.pt")
    return 0


def _probe_config(args, method: str) -> ProbeConfig:
    overrides = {"label_fraction": args.label_fraction, "seed": args.seed, "standardize": args.standardize}
    return ProbeConfig.for_method(method, **overrides)


def cmd_probe(args) -> int:
    ckpt = EncoderCheckpoint.load(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    probe, subset = fit_probe(ckpt, manifest, _probe_config(args, ckpt.method))
    probe.save(args.out)
    print(f"probe on {len(subset)} labeled images, train accuracy {100 * probe.train_accuracy:.1f}% -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = EncoderCheckpoint.load(args.checkpoint)
    if args.train_manifest:
        ckpt.check_provenance(DatasetManifest.load(args.train_manifest), strict=args.strict)
    report = evaluate(LinearProbe.load(args.probe), ckpt, DatasetManifest.load(args.clean_val),
                      DatasetManifest.load(args.patched_val), args.target_class)
    report.save(args.out)
    print(report.render())
    return 0


def cmd_distill(args) -> int:
    teacher = EncoderCheckpoint.load(args.teacher)
    clean = DatasetManifest.load(args.clean_manifest)
    cfg = DistillConfig(clean_fraction=args.clean_fraction, anchor_count=args.anchors,
                        temperature=args.temperature, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    out = Path(args.out)
    student = distill(teacher, clean, cfg, out_dir=out, workers=args.workers)
    print(out / "student.pt")
    if args.clean_val and args.patched_val:
        clean_val, patched_val = DatasetManifest.load(args.clean_val), DatasetManifest.load(args.patched_val)
        pcfg = _probe_config(args, teacher.method)
        reports = {}
        for name, ck in (("teacher", teacher), ("student", student)):
            probe, _ = fit_probe(ck, clean, pcfg, check_provenance=False)
            reports[name] = evaluate(probe, ck, clean_val, patched_val, args.target_class)
            reports[name].save(out / f"report_{name}.json")
        comparison = {
            name: {"clean_acc": r.clean_acc, "patched_acc": r.patched_acc,
                   "target_fp_patched": r.target_fp_patched}
            for name, r in reports.items()
        }
        (out / "comparison.json").write_text(json.dumps(comparison, sort_keys=True, indent=1) + "\n")
        for name, r in reports.items():
            print(f"[{name}]\n{r.render()}")
    return 0


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg = replace(cfg, out_root=args.out)
    return cfg


def cmd_attack(args) -> int:
    record = run_attack_pipeline(_experiment(args), force=args.force, workers=args.workers)
    print(record.report().render())
    if record.baseline is not None:
        text, _ = render_report([record])
        print(text)
    print(record.run_dir)
    return 0


def cmd_analyze_views(args) -> int:
    payload = run_view_mode_analysis(_experiment(args), force=args.force, workers=args.workers)
    print(json.dumps(payload, indent=1))
    return 0


def cmd_ablate_rate(args) -> int:
    payload = run_rate_ablation(_experiment(args), args.rates, force=args.force, workers=args.workers)
    print(json.dumps(payload, indent=1))
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = EncoderCheckpoint.load(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    patched_m = DatasetManifest.load(args.patched_manifest) if args.patched_manifest else None
    spec = SampleSpec(tuple(args.classes or ()), args.per_class, args.patched, args.seed)
    wanted = {manifest.class_index(c) for c in spec.classes}
    clean_e = extract_embeddings(ckpt, manifest.subset(e.image_id for e in manifest if e.label in wanted))
    patched_e = extract_embeddings(ckpt, patched_m) if patched_m is not None and spec.patched else None
    csv_path, sidecar = export_embeddings(clean_e, manifest, spec, args.out, patched_e, patched_m)
    print(csv_path)
    print(sidecar)
    return 0


def cmd_report(args) -> int:
    records = [RunRecord.load(p) for p in args.runs]
    text, payload = render_report(records)
    print(text)
    if args.json:
        Path(args.json).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return 0


def cmd_prepare_cifar10(args) -> int:
    """Download CIFAR-10 via torchvision and write it as class-per-folder PNGs."""
    from torchvision.datasets import CIFAR10

    out = Path(args.out)
    for split, is_train in (("train", True), ("val", False)):
        try:
            ds = CIFAR10(args.cache, train=is_train, download=True)
        except Exception as exc:  # network or archive failures
            raise DataError(f"cannot obtain CIFAR-10: {exc}") from exc
        for i, (img, label) in enumerate(ds):
            d = out / split / ds.classes[label]
            d.mkdir(parents=True, exist_ok=True)
            img.save(d / f"{split}_{i:05d}.png")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslbackdoor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--device", help=f"torch device for training and feature extraction (default ${DEVICE_ENV} or cpu)")
    sub = p.add_subparsers(dest="command", required=True)

    def trig_args(sp):
        sp.add_argument("--trigger-id", type=int, default=10)
        sp.add_argument("--trigger-seed", type=int, default=DEFAULT_TRIGGER_SEED)
        sp.add_argument("--patch-size", type=int)

    sp = sub.add_parser("trigger", help="generate or import a trigger patch")
    trig_args(sp)
    sp.add_argument("--from-file")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_trigger)

    sp = sub.add_parser("poison", help="poison a class-per-folder training set and write it out")
    sp.add_argument("--mode", choices=("targeted", "untargeted", "superclass"), default="targeted")
    sp.add_argument("--target-class", action="append")
    sp.add_argument("--rate", type=float, default=0.005)
    sp.add_argument("--within-class-fraction", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--patched-val-seed", type=int)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    trig_args(sp)
    sp.set_defaults(func=cmd_poison)

    sp = sub.add_parser("train", help="train an SSL encoder")
    sp.add_argument("--method", choices=METHODS, required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--config")
    sp.add_argument("--scale", choices=("paper", "desk", "fast"), default="desk")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--view-mode", choices=VIEW_MODES, default="standard")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=0)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--log-crops", action="store_true")
    sp.set_defaults(func=cmd_train)

    def probe_args(sp):
        sp.add_argument("--label-fraction", type=float, default=0.01)
        sp.add_argument("--standardize", action="store_true")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("probe", help="fit a linear probe on frozen features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    probe_args(sp)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("eval", help="clean/patched accuracy and false positives")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--probe", required=True)
    sp.add_argument("--clean-val", required=True)
    sp.add_argument("--patched-val", required=True)
    sp.add_argument("--target-class")
    sp.add_argument("--train-manifest")
    sp.add_argument("--strict", action="store_true", help="provenance mismatch is an error (exit 5)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("distill", help="distil a teacher into a fresh student on clean data")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--clean-manifest", required=True)
    sp.add_argument("--clean-fraction", type=float, default=0.25)
    sp.add_argument("--anchors", type=int, default=4096)
    sp.add_argument("--temperature", type=float, default=0.04)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--clean-val")
    sp.add_argument("--patched-val")
    sp.add_argument("--target-class")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=0)
    probe_args(sp)
    sp.set_defaults(func=cmd_distill)

    for name, func, helptext in (
        ("attack", cmd_attack, "full pipeline with its clean baseline"),
        ("analyze-views", cmd_analyze_views, "both-view vs one-view trigger comparison"),
        ("ablate-rate", cmd_ablate_rate, "injection-rate sweep"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--workers", type=int, default=0)
        if name == "ablate-rate":
            sp.add_argument("--rates", type=float, nargs="+", default=[0.01, 0.005, 0.002, 0.0005])
        sp.set_defaults(func=func)

    sp = sub.add_parser("export-embeddings", help="CSV + JSON bundle for external projection")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--patched-manifest")
    sp.add_argument("--classes", nargs="*")
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--patched", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("report", help="aggregate completed runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("prepare-cifar10", help="download CIFAR-10 into class folders")
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache", default=".cache/cifar10")
    sp.set_defaults(func=cmd_prepare_cifar10)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.device:
        os.environ[DEVICE_ENV] = args.device
    try:
        return args.func(args)
    except SSLBackdoorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
