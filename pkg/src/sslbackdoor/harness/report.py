"""Aggregate evaluation reports into clean-vs-backdoored comparison tables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from statistics import mean
from typing import Iterable, Sequence

from ..errors import ConfigError
from ..probe import EvalReport
from .pipeline import RunRecord

COLUMNS = (
    "clean_model_clean_acc", "clean_model_clean_fp", "clean_model_patched_acc", "clean_model_patched_fp",
    "backdoored_clean_acc", "backdoored_clean_fp", "backdoored_patched_acc", "backdoored_patched_fp",
)


@dataclass(frozen=True)
class ComparisonRow:
    """One target experiment: accuracy and target-class FP for both models on both validation sets."""

    label: str
    method: str
    preset: str
    clean_model_clean_acc: float
    clean_model_clean_fp: float
    clean_model_patched_acc: float
    clean_model_patched_fp: float
    backdoored_clean_acc: float
    backdoored_clean_fp: float
    backdoored_patched_acc: float
    backdoored_patched_fp: float

    @classmethod
    def from_reports(cls, label: str, method: str, preset: str, clean: EvalReport, backdoored: EvalReport,
                     target: str | None = None) -> "ComparisonRow":
        target = target or backdoored.target_class
        if target is None:
            raise ConfigError("a comparison row needs a target class")
        ci, bi = clean.classes.index(target), backdoored.classes.index(target)
        return cls(
            label, method, preset,
            clean.clean_acc, clean.fp_clean[ci], clean.patched_acc, clean.fp_patched[ci],
            backdoored.clean_acc, backdoored.fp_clean[bi], backdoored.patched_acc, backdoored.fp_patched[bi],
        )

    @classmethod
    def from_record(cls, record: RunRecord, label: str | None = None) -> "ComparisonRow":
        if record.baseline is None:
            raise ConfigError(f"run {record.config_hash} has no clean baseline to compare against")
        cfg = record.config
        target = (cfg["poison"]["target_classes"] or [None])[0]
        return cls.from_reports(
            label or str(target), cfg["method"]["method"], cfg["preset"],
            record.baseline_report(), record.report(), target,
        )

    def values(self) -> list[float]:
        return [getattr(self, c) for c in COLUMNS]


def average_row(rows: Sequence[ComparisonRow]) -> list[float]:
    return [mean(col) for col in zip(*(r.values() for r in rows))]


def _fmt(v: float, decimals: int) -> str:
    return f"{v:.{decimals}f}"


def render_report(rows: Iterable[ComparisonRow | RunRecord]) -> tuple[str, dict]:
    """Table of clean/backdoored x clean/patched x Acc/FP with an arithmetic-mean Average row per method.

    Rows from different dataset presets cannot be aggregated together.
    """
    rows = [r if isinstance(r, ComparisonRow) else ComparisonRow.from_record(r) for r in rows]
    if not rows:
        raise ConfigError("nothing to report")
    presets = {r.preset for r in rows}
    if len(presets) > 1:
        raise ConfigError(f"refusing to aggregate runs from different dataset presets: {sorted(presets)}")
    methods = list(dict.fromkeys(r.method for r in rows))

    header = [
        f"{'':<22}{'':<10}{'Clean model':^40}{'Backdoored model':^40}",
        f"{'':<22}{'':<10}" + f"{'Clean data':^20}{'Patched data':^20}" * 2,
        f"{'Target':<22}{'Method':<10}" + f"{'Acc':>10}{'FP':>10}" * 4,
    ]
    lines = list(header)
    averages = {}
    for m in methods:
        body = [r for r in rows if r.method == m]
        for r in body:
            lines.append(f"{r.label:<22}{m:<10}" + "".join(
                f"{_fmt(v, 2 if i % 2 == 0 else 0):>10}" for i, v in enumerate(r.values())))
        avg = average_row(body)
        averages[m] = dict(zip(COLUMNS, avg))
        lines.append(f"{'Average':<22}{m:<10}" + "".join(f"{_fmt(v, 1):>10}" for v in avg))
    payload = {
        "preset": presets.pop(),
        "columns": list(COLUMNS),
        "rows": [asdict(r) for r in rows],
        "averages": averages,
    }
    return "\n".join(lines), payload


def render_report_json(rows: Iterable[ComparisonRow | RunRecord]) -> str:
    return json.dumps(render_report(rows)[1], sort_keys=True, indent=1)


def count_inversions(values: Sequence[float], band: float = 0.2) -> int:
    """Adjacent increases of a series that should be non-increasing, beyond a relative noise band."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a * (1 + band))
