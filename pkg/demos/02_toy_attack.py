"""Run a targeted attack end to end on the toy dataset and print the comparison table.

The harness trains a clean encoder and a backdoored one with identical seeds,
fits a linear probe on each and evaluates both on clean and patched validation
images. Toy images are far too easy and too few for a meaningful attack effect;
this shows the mechanics, not the result.

    python3 demos/02_toy_attack.py [moco_v2|byol|msf|rotnet|jigsaw]
"""
import sys

from _toy import toy_config
from sslbackdoor.harness import render_report, run_attack_pipeline

method = sys.argv[1] if len(sys.argv) > 1 else "moco_v2"
cfg = toy_config(method)
record = run_attack_pipeline(cfg)
print(f"run directory: {record.run_dir}")
for name, stage in record.stages.items():
    print(f"  {name:<8} {stage['seconds']:>7.1f}s")

print()
print(record.report().render())
print()
text, _ = render_report([record])
print(text)
print("\nrerunning is free: every stage is reused from disk")
assert run_attack_pipeline(cfg) == record
