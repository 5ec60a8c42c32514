"""Subject-wise result tables and bar-plot data.

Accuracies are stored as fractions in [0, 1] and shown as percentages with
two decimals. Rounding only happens at display time; the object model keeps
full precision.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .errors import DataError

CONDITIONS = ("vision", "audio", "eeg", "multimodal")
HEADERS = ("Subject", "Vision", "Audio", "EEG", "Multimodal")
UNIMODAL = CONDITIONS[:3]
ABSENT = "-"
_CENT = Decimal("0.01")


def percent(value: float) -> Decimal:
    """Fraction to a percentage rounded half-up to two decimals."""
    return Decimal(repr(100.0 * value)).quantize(_CENT, rounding=ROUND_HALF_UP)


def _fmt(value: float | None) -> str:
    return ABSENT if value is None else f"{percent(value)}"


@dataclass(frozen=True)
class SubjectResult:
    subject_id: int
    vision: float | None = None
    audio: float | None = None
    eeg: float | None = None
    multimodal: float | None = None

    def __post_init__(self):
        for c in CONDITIONS:
            v = getattr(self, c)
            if v is not None and not (0.0 <= v <= 1.0):
                raise DataError(f"subject {self.subject_id}: {c} accuracy {v} outside [0, 1]")

    def values(self) -> tuple[float | None, ...]:
        return tuple(getattr(self, c) for c in CONDITIONS)

    def winner(self) -> str | None:
        return _winner(self.values())


def _winner(values: Sequence[float | None]) -> str | None:
    """Argmax condition; ties go to the later column so multimodal wins them."""
    best, best_v = None, -math.inf
    for c, v in zip(CONDITIONS, values):
        if v is not None and v >= best_v:
            best, best_v = c, v
    return best


@dataclass
class ReportTable:
    rows: list[SubjectResult]
    means: dict[str, float | None] = field(default_factory=dict)

    @property
    def mean_row(self) -> tuple[float | None, ...]:
        return tuple(self.means[c] for c in CONDITIONS)

    def display_mean(self, condition: str) -> Decimal | None:
        m = self.means[condition]
        return None if m is None else percent(m)

    def delta(self, condition: str) -> Decimal | None:
        """Multimodal gain over ``condition`` in displayed percentage points.

        Taken between the two rounded means so that the printed gain always
        agrees with the printed average row.
        """
        mm, other = self.display_mean("multimodal"), self.display_mean(condition)
        return None if mm is None or other is None else mm - other

    def delta_full(self, condition: str) -> float | None:
        mm, other = self.means["multimodal"], self.means[condition]
        return None if mm is None or other is None else 100.0 * (mm - other)


def aggregate(results: Iterable[SubjectResult]) -> ReportTable:
    rows = sorted(results, key=lambda r: r.subject_id)
    if not rows:
        raise DataError("no subject results to aggregate")
    seen = set()
    for r in rows:
        if r.subject_id in seen:
            raise DataError(f"duplicate subject {r.subject_id}")
        seen.add(r.subject_id)
    means = {}
    for c in CONDITIONS:
        present = [getattr(r, c) for r in rows if getattr(r, c) is not None]
        means[c] = math.fsum(present) / len(present) if present else None
    return ReportTable(rows, means)


def _table_rows(table: ReportTable) -> list[tuple[str, tuple[float | None, ...], str | None]]:
    out = [(str(r.subject_id), r.values(), r.winner()) for r in table.rows]
    out.append(("Avg.", table.mean_row, _winner(table.mean_row)))
    return out


def _gain_cells(table: ReportTable) -> list[str]:
    cells = []
    for c in UNIMODAL:
        d = table.delta(c)
        cells.append(ABSENT if d is None else f"{d}")
    return cells


def emit_table(table: ReportTable, fmt: str = "csv") -> str:
    if fmt == "csv":
        return _emit_csv(table)
    if fmt == "markdown":
        return _emit_markdown(table)
    raise ValueError(f"unknown table format {fmt!r}")


def _emit_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    buf.write(",".join(HEADERS + ("Winner",)) + "\n")
    for label, values, win in _table_rows(table):
        cells = [label, *(_fmt(v) for v in values), HEADERS[CONDITIONS.index(win) + 1] if win else ABSENT]
        buf.write(",".join(cells) + "\n")
    buf.write(",".join(["Gain", *_gain_cells(table), ABSENT, ABSENT]) + "\n")
    return buf.getvalue()


def _emit_markdown(table: ReportTable) -> str:
    lines = ["| " + " | ".join(HEADERS) + " |", "|" + "---|" * len(HEADERS)]
    for label, values, win in _table_rows(table):
        cells = []
        for c, v in zip(CONDITIONS, values):
            text = _fmt(v)
            cells.append(f"**{text}**" if c == win else text)
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines.append("| Gain | " + " | ".join(_gain_cells(table)) + f" | {ABSENT} |")
    return "\n".join(lines) + "\n"


def emit_barplot_data(table: ReportTable) -> str:
    """Long-form ``subject,condition,accuracy``; values are the stored floats, unrounded."""
    lines = ["subject,condition,accuracy"]
    for r in table.rows:
        for c, v in zip(CONDITIONS, r.values()):
            lines.append(f"{r.subject_id},{c},{'' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


METRICS_HEADER = "subject,condition,train_acc,val_acc"


def metrics_line(subject: int, condition: str, train_acc: float | None, val_acc: float | None) -> str:
    def cell(v):
        return ABSENT if v is None else repr(float(v))

    return f"{subject},{condition},{cell(train_acc)},{cell(val_acc)}"


def _parse_acc(text: str, where: str) -> float | None:
    text = text.strip()
    if text in ("", ABSENT):
        return None
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{where}: accuracy {text!r} is not a number") from None
    if not 0.0 <= value <= 1.0:
        raise DataError(f"{where}: accuracy {value} outside [0, 1]")
    return value


def parse_metrics(sources: Iterable[tuple[str, str]]) -> list[SubjectResult]:
    """Collect ``subject,condition,train_acc,val_acc`` lines into per-subject results.

    ``sources`` yields ``(name, text)`` pairs. Blank lines, ``#`` comments and
    header lines are skipped. A repeated (subject, condition) pair is tolerated
    only when its validation accuracy is identical.
    """
    cells: dict[int, dict[str, float | None]] = {}
    for name, text in sources:
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#") or line.replace(" ", "") == METRICS_HEADER:
                continue
            where = f"{name}:{lineno}"
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise DataError(f"{where}: expected 4 fields ({METRICS_HEADER}), got {len(parts)}")
            try:
                subject = int(parts[0])
            except ValueError:
                raise DataError(f"{where}: subject {parts[0]!r} is not an integer") from None
            condition = parts[1].lower()
            if condition not in CONDITIONS:
                raise DataError(f"{where}: unknown condition {parts[1]!r}")
            _parse_acc(parts[2], where)
            val = _parse_acc(parts[3], where)
            row = cells.setdefault(subject, {})
            if condition in row and row[condition] != val:
                raise DataError(f"{where}: conflicting duplicate entry for subject {subject} {condition}")
            row[condition] = val
    return [SubjectResult(s, **row) for s, row in sorted(cells.items())]
