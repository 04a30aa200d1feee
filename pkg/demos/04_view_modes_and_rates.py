"""Two ablations on the toy dataset: where the trigger appears, and how much poison.

The view-mode analysis trains with the trigger in both augmented views (the
normal case), in only one view, and in one view plus class-agnostic poisons in
both. The rate ablation repeats the attack at decreasing injection rates.

    python3 demos/04_view_modes_and_rates.py
"""
from _toy import toy_config
from sslbackdoor.harness import run_rate_ablation, run_view_mode_analysis

cfg = toy_config(epochs=4)

views = run_view_mode_analysis(cfg)
print(f"target {views['target']}, rate {views['rate']:.0%}")
for row in [views["clean"], *views["rows"]]:
    print(f"  {row['label']:<48} patched acc {row['patched_acc']:5.1f}  target FP {row['target_fp_patched']}")

ablation = run_rate_ablation(cfg, [0.05, 0.02, 0.0])
print("\nrate ablation")
for row in ablation["series"]:
    print(f"  {row['label']:>6}  target FP {row['target_fp_patched']:>3}  clean acc {row['clean_acc']:5.1f}")
