"""Evaluation reports and table rendering.

A report holds Recall@K and No-Graph-Constraint Recall@K for
K in {20, 50, 100}, per-predicate Recall@100, and (when compared against
a named baseline) the mean delta per metric family: the average over the
three K of (value - baseline value).

Rendered tables mark, per column, the best value in bold and the second
best underlined, and flag every non-baseline cell as better (>=) or worse
(<) than the baseline row's value. Markdown uses ``**bold**``,
``<u>underline</u>``, and ``(+)``/``(-)`` flags standing in for the
green/red cells of the reference layout; CSV carries the flags in
companion columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .graphs import canonical_json
from .metrics import RECALL_KS


@dataclass
class EvalReport:
    name: str
    recall: dict[int, float]
    ng_recall: dict[int, float]
    per_predicate: dict[str, float] = field(default_factory=dict)
    mean_delta: Optional[dict[str, float]] = None
    baseline_name: Optional[str] = None

    def __post_init__(self):
        self.recall = {int(k): float(v) for k, v in self.recall.items()}
        self.ng_recall = {int(k): float(v) for k, v in self.ng_recall.items()}
        for family in (self.recall, self.ng_recall):
            for k, v in family.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"recall@{k} = {v} outside [0, 1]")

    def k_set(self) -> tuple[int, ...]:
        return tuple(sorted(self.recall))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ng_recall": {str(k): v for k, v in sorted(self.ng_recall.items())},
            "per_predicate": dict(sorted(self.per_predicate.items())),
            "mean_delta": self.mean_delta,
            "baseline_name": self.baseline_name,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @staticmethod
    def from_dict(data: dict) -> "EvalReport":
        return EvalReport(
            name=data["name"],
            recall={int(k): v for k, v in data["recall"].items()},
            ng_recall={int(k): v for k, v in data["ng_recall"].items()},
            per_predicate=data.get("per_predicate", {}),
            mean_delta=data.get("mean_delta"),
            baseline_name=data.get("baseline_name"),
        )

    @staticmethod
    def load(path) -> "EvalReport":
        return EvalReport.from_dict(json.loads(Path(path).read_text()))


def build_report(
    name: str,
    metrics: dict,
    baseline: Optional[EvalReport] = None,
) -> EvalReport:
    """Assemble a report from a metrics dict, with deltas against a baseline.

    ``metrics`` is the accumulator output: {"recall": {K: v}, "ng_recall":
    {K: v}, "per_predicate": {name: v}}. Raises on a K-set mismatch with
    the baseline.
    """
    report = EvalReport(
        name=name,
        recall=metrics["recall"],
        ng_recall=metrics["ng_recall"],
        per_predicate=metrics.get("per_predicate", {}),
    )
    if baseline is not None:
        if baseline.k_set() != report.k_set():
            raise ValueError(
                f"K-set mismatch: {report.k_set()} vs baseline {baseline.k_set()}"
            )
        ks = report.k_set()
        report.mean_delta = {
            "recall": sum(report.recall[k] - baseline.recall[k] for k in ks) / len(ks),
            "ng_recall": sum(report.ng_recall[k] - baseline.ng_recall[k] for k in ks)
            / len(ks),
        }
        report.baseline_name = baseline.name
    return report


def _column_marks(values: Sequence[Optional[float]]) -> list[str]:
    """'best' / 'second' marks per entry; ties share a mark."""
    present = sorted({v for v in values if v is not None}, reverse=True)
    marks = []
    for v in values:
        if v is None:
            marks.append("")
        elif present and v == present[0]:
            marks.append("best")
        elif len(present) > 1 and v == present[1]:
            marks.append("second")
        else:
            marks.append("")
    return marks


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def _md_cell(value: Optional[float], mark: str, flag: str) -> str:
    if value is None:
        return "-"
    text = _fmt(value)
    if mark == "best":
        text = f"**{text}**"
    elif mark == "second":
        text = f"<u>{text}</u>"
    if flag:
        text += f" ({flag})"
    return text


def render_recall_table(
    reports: Sequence[EvalReport], baseline_name: Optional[str] = None
) -> dict[str, str]:
    """Main metric table (rows: models; columns: R@K, mean delta, NG-R@K).

    Returns {"markdown": ..., "csv": ...}. Baseline delta cells render
    as "-". Flags compare each cell against the baseline row.
    """
    ks = reports[0].k_set()
    for r in reports:
        if r.k_set() != ks:
            raise ValueError("reports disagree on the K set")
    baseline = None
    if baseline_name is not None:
        baseline = next((r for r in reports if r.name == baseline_name), None)
        if baseline is None:
            raise ValueError(f"baseline {baseline_name!r} not among reports")

    columns: list[tuple[str, list[Optional[float]]]] = []
    for k in ks:
        columns.append((f"R@{k}", [r.recall[k] for r in reports]))
    columns.append(
        (
            "Mean Δ R",
            [
                (r.mean_delta or {}).get("recall") if r is not baseline else None
                for r in reports
            ],
        )
    )
    for k in ks:
        columns.append((f"NG-R@{k}", [r.ng_recall[k] for r in reports]))
    columns.append(
        (
            "Mean Δ NG-R",
            [
                (r.mean_delta or {}).get("ng_recall") if r is not baseline else None
                for r in reports
            ],
        )
    )

    base_idx = next(
        (i for i, r in enumerate(reports) if r is baseline), None
    )
    marks = {name: _column_marks(vals) for name, vals in columns}
    flags: dict[str, list[str]] = {}
    for name, vals in columns:
        col_flags = []
        for i, v in enumerate(vals):
            if base_idx is None or v is None or name.startswith("Mean") or i == base_idx:
                col_flags.append("")
            else:
                col_flags.append("+" if v >= vals[base_idx] else "-")
        flags[name] = col_flags

    header = ["Model"] + [name for name, _ in columns]
    md_lines = ["| " + " | ".join(header) + " |",
                "| " + " | ".join(["---"] * len(header)) + " |"]
    for i, r in enumerate(reports):
        cells = [r.name]
        for name, vals in columns:
            cells.append(_md_cell(vals[i], marks[name][i], flags[name][i]))
        md_lines.append("| " + " | ".join(cells) + " |")

    csv_header = ["model"]
    for name, _ in columns:
        csv_header.extend([name, f"{name} flag"])
    csv_lines = [",".join(csv_header)]
    for i, r in enumerate(reports):
        row = [r.name]
        for name, vals in columns:
            v = vals[i]
            note = ";".join(x for x in (marks[name][i], flags[name][i]) if x)
            row.extend(["" if v is None else _fmt(v), note])
        csv_lines.append(",".join(row))

    return {"markdown": "\n".join(md_lines) + "\n", "csv": "\n".join(csv_lines) + "\n"}


def render_predicate_table(
    reports: Sequence[EvalReport], baseline_name: Optional[str] = None
) -> dict[str, str]:
    """Per-predicate Recall@100 table (rows: predicates; columns: models)."""
    baseline = None
    if baseline_name is not None:
        baseline = next((r for r in reports if r.name == baseline_name), None)
        if baseline is None:
            raise ValueError(f"baseline {baseline_name!r} not among reports")
    predicates = sorted({p for r in reports for p in r.per_predicate})
    # Predicates at zero recall across every model are omitted from the
    # rendered table (computation upstream is unaffected).
    predicates = [
        p for p in predicates
        if any(r.per_predicate.get(p, 0.0) > 0.0 for r in reports)
    ]
    header = ["Predicate"] + [r.name for r in reports]
    md_lines = ["| " + " | ".join(header) + " |",
                "| " + " | ".join(["---"] * len(header)) + " |"]
    csv_lines = [",".join(header)]
    for p in predicates:
        values = [r.per_predicate.get(p) for r in reports]
        marks = _column_marks(values)
        cells = [p]
        csv_row = [p]
        for i, v in enumerate(values):
            flag = ""
            if baseline is not None and v is not None and reports[i] is not baseline:
                base_v = baseline.per_predicate.get(p)
                if base_v is not None:
                    flag = "+" if v >= base_v else "-"
            cells.append(_md_cell(v, marks[i], flag))
            csv_row.append("" if v is None else _fmt(v))
        md_lines.append("| " + " | ".join(cells) + " |")
        csv_lines.append(",".join(csv_row))
    return {"markdown": "\n".join(md_lines) + "\n", "csv": "\n".join(csv_lines) + "\n"}


def render_tables(
    reports: Sequence[EvalReport],
    baseline_name: Optional[str],
    out_dir,
    prefix: str = "table",
) -> list[Path]:
    """Write the recall and per-predicate tables as Markdown and CSV files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    main = render_recall_table(reports, baseline_name)
    pred = render_predicate_table(reports, baseline_name)
    paths = []
    for suffix, text in (
        ("recall.md", main["markdown"]),
        ("recall.csv", main["csv"]),
        ("predicates.md", pred["markdown"]),
        ("predicates.csv", pred["csv"]),
    ):
        path = out_dir / f"{prefix}-{suffix}"
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
