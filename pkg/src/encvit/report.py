"""Evaluation reports: one row per model/condition, serialised as CSV or JSON.

CSV column order is fixed::

    model, N, S, leaked_keys, clean, pgd_ce, pgd_t, square, AA (FAB-t omitted)

Accuracies are percentages printed with two decimals. An attack that was not
run for a row is left empty. ``leaked_keys`` is empty outside key-leak runs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from .attacks import ATTACK_NAMES, SuiteResult
from .errors import FormatError, RejectedInput

AA_LABEL = "AA (FAB-t omitted)"
COLUMNS = ("model", "N", "S", "leaked_keys", "clean", *ATTACK_NAMES, AA_LABEL)

DEVIATIONS = (
    "AA (FAB-t omitted): worst case over pgd_ce, pgd_t and square only",
    "APGD simplified to best-iterate PGD with step halving on stalled checkpoints",
    "desk scale: synthetic 10-class 32x32 data and a 2-block ViT instead of CIFAR-10 and pretrained ViT-B/16",
    "gradient attacks are crafted on a surrogate and transferred; square queries the target directly",
    "each image is scored by one final query to the (possibly stochastic) target",
)


@dataclass
class ReportRow:
    model: str
    N: int
    S: str
    clean: float
    attacks: dict  # attack name -> accuracy in percent; missing = not run
    aa: float
    leaked_keys: int | None = None

    def validate(self):
        values = [self.clean, self.aa, *self.attacks.values()]
        if any(not (0.0 <= v <= 100.0) or math.isnan(v) for v in values):
            raise RejectedInput(f"row {self.model!r}: accuracies must lie in [0, 100]")
        unknown = set(self.attacks) - set(ATTACK_NAMES)
        if unknown:
            raise RejectedInput(f"row {self.model!r}: unknown attacks {sorted(unknown)}")
        bound = min([self.clean, *self.attacks.values()])
        if self.aa > bound + 1e-9:
            raise RejectedInput(f"row {self.model!r}: AA {self.aa} exceeds the per-attack minimum {bound}")

    def cells(self) -> list:
        fmt = lambda v: f"{v:.2f}"
        return [self.model, str(self.N), self.S, "" if self.leaked_keys is None else str(self.leaked_keys),
                fmt(self.clean), *(fmt(self.attacks[a]) if a in self.attacks else "" for a in ATTACK_NAMES),
                fmt(self.aa)]


def row_from_suite(model: str, N: int, S: str, suite: SuiteResult, leaked_keys=None) -> ReportRow:
    return ReportRow(model, int(N), str(S), suite.accuracy("clean"),
                     {a: suite.accuracy(a) for a in suite.robust}, suite.accuracy("aa"), leaked_keys)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, row: ReportRow) -> ReportRow:
        row.validate()
        self.rows.append(row)
        return row

    def row(self, model: str) -> ReportRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def emit_report(report: EvalReport, format: str = "csv") -> bytes:
    """Deterministic bytes for ``report``; ``format`` is "csv" or "json"."""
    if not report.rows:
        raise RejectedInput("cannot emit an empty report")
    for r in report.rows:
        r.validate()
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow(r.cells())
        return buf.getvalue().encode()
    if format == "json":
        doc = {
            "columns": list(COLUMNS),
            "rows": [dict(zip(COLUMNS, r.cells())) for r in report.rows],
            "meta": {"deviations": list(DEVIATIONS), **report.meta},
        }
        return (json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n").encode()
    raise RejectedInput(f"unknown report format {format!r}")


def parse_report_csv(data: bytes) -> list:
    """Rows of an emitted CSV as lists of strings (header excluded)."""
    rows = list(csv.reader(io.StringIO(data.decode())))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise FormatError("report CSV header does not match the fixed column order")
    return rows[1:]
