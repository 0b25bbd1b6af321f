"""Evaluation grids and first-attempt error breakdowns.

A grid row reports first-try accuracy (attempt one correct) and second-try
accuracy (either attempt correct) for one generator over a fixed test set;
breakdowns categorize first-attempt failures. Rendering produces markdown or
CSV with a provenance footer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .episode import (
    Episode,
    EpisodeConfig,
    Generator,
    GeneratorError,
    LocalGenerator,
    VerifyFn,
    instance_seed,
    run_episode,
    run_episodes_batched,
    verify_output,
)
from .tasks import Problem

CATEGORY_ORDER = {
    "countdown": ("InvalidEquation", "WrongNumbers", "MissedTarget"),
    "toolcall": ("ToolChoiceError", "ParameterError", "FormatError"),
}
CATEGORY_LABELS = {
    "InvalidEquation": "Invalid equation",
    "WrongNumbers": "Wrong numbers",
    "MissedTarget": "Missed target",
    "ToolChoiceError": "Tool choice error",
    "ParameterError": "Parameter error",
    "FormatError": "Format error",
}
_GENERATOR_ERROR_CATEGORY = {"countdown": "InvalidEquation", "toolcall": "FormatError"}


@dataclass(frozen=True)
class GridRow:
    label: str
    first_try: float
    second_try: float
    samples: int

    def __post_init__(self):
        if self.second_try < self.first_try - 1e-12:
            raise ValueError("second-try accuracy cannot be below first-try accuracy")


@dataclass(frozen=True)
class ErrorBreakdown:
    label: str
    kind: str
    counts: dict[str, int]

    def __post_init__(self):
        order = CATEGORY_ORDER[self.kind]
        object.__setattr__(self, "counts", {c: int(self.counts.get(c, 0)) for c in order})

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class EvalResult:
    row: GridRow
    breakdown: ErrorBreakdown
    episodes: list[Optional[Episode]] = field(repr=False, default_factory=list)
    generator_errors: int = 0

    def to_json(self) -> dict:
        return {
            "label": self.row.label,
            "first_try": self.row.first_try,
            "second_try": self.row.second_try,
            "samples": self.row.samples,
            "kind": self.breakdown.kind,
            "counts": self.breakdown.counts,
            "generator_errors": self.generator_errors,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalResult":
        return cls(
            row=GridRow(data["label"], data["first_try"], data["second_try"], data["samples"]),
            breakdown=ErrorBreakdown(data["label"], data["kind"], data["counts"]),
            generator_errors=data.get("generator_errors", 0),
        )


def evaluate(
    gen: Generator,
    test_set: Sequence,
    verify: VerifyFn = verify_output,
    cfg: EpisodeConfig = EpisodeConfig(),
    label: str = "policy",
) -> EvalResult:
    """Run one episode per instance and aggregate accuracies and categories."""
    if not test_set:
        raise ValueError("test set must be nonempty")
    kind = "countdown" if isinstance(test_set[0], Problem) else "toolcall"

    episodes: list[Optional[Episode]] = []
    errors = 0
    if isinstance(gen, LocalGenerator):
        episodes = list(run_episodes_batched(gen, test_set, verify, cfg))
    else:
        for i, task in enumerate(test_set):
            per_instance = replace(cfg, seed=instance_seed(cfg.seed, i))
            try:
                episodes.append(run_episode(gen, task, verify, per_instance))
            except GeneratorError:
                episodes.append(None)
                errors += 1

    first = 0
    either = 0
    counts: dict[str, int] = {}
    for ep in episodes:
        if ep is None:
            counts[_GENERATOR_ERROR_CATEGORY[kind]] = counts.get(_GENERATOR_ERROR_CATEGORY[kind], 0) + 1
            continue
        if ep.outcome1.success:
            first += 1
            either += 1
        else:
            counts[ep.outcome1.category] = counts.get(ep.outcome1.category, 0) + 1
            if ep.outcome2 is not None and ep.outcome2.success:
                either += 1
    n = len(test_set)
    return EvalResult(
        row=GridRow(label=label, first_try=first / n, second_try=either / n, samples=n),
        breakdown=ErrorBreakdown(label=label, kind=kind, counts=counts),
        episodes=episodes,
        generator_errors=errors,
    )


# --- rendering -----------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def render_report(
    rows: Sequence[GridRow],
    breakdowns: Sequence[ErrorBreakdown] = (),
    fmt: str = "markdown",
    provenance: Optional[dict] = None,
) -> str:
    """Emit the accuracy grid plus per-kind breakdown tables."""
    if fmt == "markdown":
        return _render_markdown(rows, breakdowns, provenance)
    if fmt == "csv":
        return _render_csv(rows, breakdowns, provenance)
    raise ValueError(f"unknown format {fmt!r}")


def _render_markdown(rows, breakdowns, provenance) -> str:
    lines = ["| Generator | 1st Try | 2nd Try | Samples |", "| --- | ---: | ---: | ---: |"]
    for r in rows:
        lines.append(f"| {r.label} | {_pct(r.first_try)} | {_pct(r.second_try)} | {r.samples} |")
    for kind in ("toolcall", "countdown"):
        group = [b for b in breakdowns if b.kind == kind]
        if not group:
            continue
        headers = [CATEGORY_LABELS[c] for c in CATEGORY_ORDER[kind]]
        lines.append("")
        lines.append(f"First-attempt errors ({kind}):")
        lines.append("| Generator | " + " | ".join(headers) + " |")
        lines.append("| --- |" + " ---: |" * len(headers))
        for b in group:
            cells = " | ".join(str(b.counts[c]) for c in CATEGORY_ORDER[kind])
            lines.append(f"| {b.label} | {cells} |")
    if provenance:
        lines.append("")
        lines.append(f"provenance: {json.dumps(provenance, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def _render_csv(rows, breakdowns, provenance) -> str:
    by_label = {b.label: b for b in breakdowns}
    kinds = {b.kind for b in breakdowns}
    if len(kinds) > 1:
        raise ValueError("CSV output supports one task kind at a time")
    kind = kinds.pop() if kinds else None
    header = ["label", "first_try", "second_try", "samples"]
    if kind:
        header += [CATEGORY_LABELS[c] for c in CATEGORY_ORDER[kind]]
    lines = [",".join(header)]
    for r in rows:
        cells = [r.label, repr(r.first_try), repr(r.second_try), str(r.samples)]
        if kind:
            b = by_label.get(r.label)
            cells += [str(b.counts[c]) if b else "0" for c in CATEGORY_ORDER[kind]]
        lines.append(",".join(cells))
    if provenance:
        lines.append(f"# provenance: {json.dumps(provenance, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def parse_csv_report(text: str) -> list[dict]:
    """Inverse of the CSV renderer, for round-trip checks and merging."""
    lines = [line for line in text.splitlines() if line and not line.startswith("#")]
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row: dict = {"label": cells[0]}
        row["first_try"] = float(cells[1])
        row["second_try"] = float(cells[2])
        row["samples"] = int(cells[3])
        for name, cell in zip(header[4:], cells[4:]):
            row[name] = int(cell)
        out.append(row)
    return out
