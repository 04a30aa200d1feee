"""Distil a backdoored encoder into a fresh student using only clean data.

The student learns to reproduce the teacher's similarities to a bank of clean
anchor images, and never sees a poisoned image.

    python3 demos/03_distillation_defense.py
"""
from dataclasses import replace

from _toy import toy_config
from sslbackdoor.distill import DistillConfig
from sslbackdoor.harness import run_attack_pipeline
from sslbackdoor.probe import EvalReport

cfg = toy_config()
teacher = run_attack_pipeline(cfg)
t = teacher.report()

rows = [("teacher", t)]
for frac in (0.5, 0.25):
    dcfg = DistillConfig(clean_fraction=frac, anchor_count=64, epochs=8, batch_size=16, hidden_dim=64)
    rec = run_attack_pipeline(replace(cfg, distill=dcfg))
    stage = rec.stages[f"distill-{frac:g}"]
    rows.append((f"student {frac:.0%} clean", EvalReport.load(stage["artifacts"]["report"])))

print(f"{'model':<22}{'clean acc':>10}{'patched acc':>13}{'target FP':>11}")
for name, rep in rows:
    print(f"{name:<22}{rep.clean_acc:>10.1f}{rep.patched_acc:>13.1f}{rep.target_fp_patched:>11d}")
