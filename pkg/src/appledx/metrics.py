"""Confusion-matrix metrics: per-class one-vs-rest scores and averages.

All arithmetic is float64 and kept at full precision.  Published tables
conventionally show percentages cut (not rounded) to one decimal; that
happens only in :func:`presented` and the renderers.

Confusion-matrix CSV::

    # reported_accuracy: 97.2          optional "# key: value" annotations
    class,Scab,Alternaria,...           corner cell "class", then K names
    Scab,353,2,...                      K rows: true class, K counts

Rows may also be bare (K integers, header of K names without corner cell),
in which case they are taken in header order.  Rows are true classes,
columns predicted classes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError

METRICS = ("accuracy", "precision", "recall", "specificity", "f_measure")
REPORT_SCHEMA_ID = "appledx-metrics-report/1"
CORNER = "class"


@dataclass
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        counts = np.asarray(self.counts)
        k = len(self.classes)
        if counts.shape != (k, k):
            raise ValidationError(f"confusion matrix must be {k}x{k} for {k} classes, got {counts.shape}")
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise ValidationError("confusion matrix counts must be integers")
        counts = counts.astype(np.int64)
        if (counts < 0).any():
            i, j = map(int, np.argwhere(counts < 0)[0])
            raise ValidationError(f"negative count at row {self.classes[i]!r}, column {self.classes[j]!r}")
        if len(set(self.classes)) != k:
            raise ValidationError(f"duplicate class names: {self.classes}")
        self.counts = counts

    @classmethod
    def from_predictions(cls, classes, true, predicted) -> "ConfusionMatrix":
        k = len(classes)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(classes, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def permuted(self, order: Sequence[int]) -> "ConfusionMatrix":
        order = list(order)
        return ConfusionMatrix([self.classes[i] for i in order], self.counts[np.ix_(order, order)],
                               dict(self.annotations))


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def binary_counts(cm: ConfusionMatrix, k: int) -> BinaryCounts:
    """One-vs-rest counts for class index ``k``."""
    if not 0 <= k < len(cm.classes):
        raise ValidationError(f"class index {k} out of range for {len(cm.classes)} classes")
    tp = int(cm.counts[k, k])
    fp = int(cm.counts[:, k].sum()) - tp
    fn = int(cm.counts[k, :].sum()) - tp
    return BinaryCounts(tp, fp, fn, cm.total - tp - fp - fn)


def _ratio(num, den):
    return 100.0 * num / den if den else math.nan


@dataclass
class ClassMetrics:
    name: str
    counts: BinaryCounts
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f_measure: float

    @property
    def undefined(self) -> tuple:
        return tuple(m for m in METRICS if math.isnan(getattr(self, m)))


@dataclass
class MetricsReport:
    per_class: list
    overall_accuracy: float
    correct: int
    total: int
    macro_average: dict
    table_average: dict
    notes: list = field(default_factory=list)

    @property
    def classes(self) -> list:
        return [c.name for c in self.per_class]

    def get(self, name: str) -> ClassMetrics:
        for c in self.per_class:
            if c.name == name:
                return c
        raise KeyError(name)


def presented(value: float, decimals: int = 1) -> float:
    """Cut a percentage to ``decimals`` places, the way published tables do.

    A 1e-9 guard stops values such as 98.0 - 1e-13 from dropping a digit.
    """
    if math.isnan(value):
        return value
    scale = 10 ** decimals
    return math.floor(value * scale + 1e-9) / scale


def class_metrics(cm: ConfusionMatrix, k: int) -> ClassMetrics:
    bc = binary_counts(cm, k)
    precision = _ratio(bc.tp, bc.tp + bc.fp)
    recall = _ratio(bc.tp, bc.tp + bc.fn)
    specificity = _ratio(bc.tn, bc.tn + bc.fp)
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        f_measure = math.nan
    else:
        f_measure = 2 * precision * recall / (precision + recall)
    accuracy = _ratio(bc.tp, bc.tp + bc.fn)
    return ClassMetrics(cm.classes[k], bc, accuracy, precision, recall, specificity, f_measure)


def _mean(values):
    values = list(values)
    return math.nan if any(math.isnan(v) for v in values) else float(np.mean(values))


def compute_report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class scores, macro averages and overall accuracy of ``cm``.

    ``macro_average`` is the unweighted mean at full precision;
    ``table_average`` is the mean of the one-decimal presented values, which
    is how published "Average" rows are usually built.  Undefined ratios
    (zero denominator) are NaN and listed in ``ClassMetrics.undefined``.
    """
    if cm.total <= 0:
        raise ValidationError("confusion matrix is empty (total count 0)")
    per_class = [class_metrics(cm, k) for k in range(len(cm.classes))]
    macro = {m: _mean(getattr(c, m) for c in per_class) for m in METRICS}
    table = {m: _mean(presented(getattr(c, m)) for c in per_class) for m in METRICS}
    report = MetricsReport(per_class, _ratio(cm.correct, cm.total), cm.correct, cm.total, macro, table)
    for c in per_class:
        if c.undefined:
            report.notes.append(f"class {c.name}: {', '.join(c.undefined)} undefined (zero denominator)")
    reported = cm.annotations.get("reported_accuracy")
    if reported is not None:
        reported = float(reported)
        if abs(reported - report.overall_accuracy) >= 0.005:
            report.notes.append(
                f"reported overall accuracy {reported:g}% differs from computed "
                f"{report.overall_accuracy:.2f}% ({cm.correct}/{cm.total}); computed value is used")
    return report


# ---------------------------------------------------------------------------
# confusion matrix CSV


def loads_cm(text: str, source=None) -> ConfusionMatrix:
    annotations, rows = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            key, sep, value = stripped[1:].partition(":")
            if sep:
                annotations[key.strip()] = value.strip()
            continue
        rows.append((lineno, [cell.strip() for cell in next(csv.reader([line]))]))
    if not rows:
        raise ParseError("no header row", source=source)
    header_line, header = rows[0]
    labelled = header[0].lower() == CORNER
    classes = header[1:] if labelled else header
    k = len(classes)
    if k == 0 or len(set(classes)) != k or any(not c for c in classes):
        raise ParseError("header must list unique, non-empty class names", line=header_line, source=source)
    counts = np.full((k, k), -1, dtype=np.int64)
    seen = set()
    for position, (lineno, cells) in enumerate(rows[1:]):
        if position >= k:
            raise ParseError(f"more than {k} data rows", line=lineno, source=source)
        if labelled:
            if len(cells) != k + 1:
                raise ParseError(f"expected {k + 1} cells, got {len(cells)}", line=lineno, source=source)
            label, values = cells[0], cells[1:]
            if label not in classes:
                raise ParseError(f"unknown class {label!r}", line=lineno, source=source)
            if label in seen:
                raise ParseError(f"duplicate row for class {label!r}", line=lineno, source=source)
            seen.add(label)
            row = classes.index(label)
        else:
            if len(cells) != k:
                raise ParseError(f"expected {k} cells, got {len(cells)}", line=lineno, source=source)
            values, row = cells, position
        for col, cell in enumerate(values):
            try:
                value = int(cell)
            except ValueError:
                raise ParseError(f"cell ({classes[row]}, {classes[col]}) is not an integer: {cell!r}",
                                 line=lineno, source=source) from None
            if value < 0:
                raise ParseError(f"cell ({classes[row]}, {classes[col]}) is negative: {value}",
                                 line=lineno, source=source)
            counts[row, col] = value
    if len(rows) - 1 != k:
        raise ParseError(f"expected {k} data rows, got {len(rows) - 1}", source=source)
    return ConfusionMatrix(classes, counts, annotations)


def parse_cm(path) -> ConfusionMatrix:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc}", source=path) from None
    return loads_cm(text, source=path)


def dumps_cm(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    for key, value in cm.annotations.items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([CORNER, *cm.classes])
    for name, row in zip(cm.classes, cm.counts):
        writer.writerow([name, *map(int, row)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report serialisation


def _num(v):
    return None if math.isnan(v) else v


def _unnum(v):
    return math.nan if v is None else float(v)


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "schema": REPORT_SCHEMA_ID,
        "classes": [
            {"name": c.name, **{m: _num(getattr(c, m)) for m in METRICS},
             "tp": c.counts.tp, "fp": c.counts.fp, "fn": c.counts.fn, "tn": c.counts.tn,
             "undefined": list(c.undefined)}
            for c in report.per_class
        ],
        "macro_average": {m: _num(v) for m, v in report.macro_average.items()},
        "table_average": {m: _num(v) for m, v in report.table_average.items()},
        "overall_accuracy": report.overall_accuracy,
        "correct": report.correct,
        "total": report.total,
        "notes": list(report.notes),
    }


def report_from_dict(d: dict) -> MetricsReport:
    if d.get("schema") != REPORT_SCHEMA_ID:
        raise ParseError(f"unknown report schema {d.get('schema')!r}")
    per_class = [
        ClassMetrics(c["name"], BinaryCounts(c["tp"], c["fp"], c["fn"], c["tn"]),
                     *(_unnum(c[m]) for m in METRICS))
        for c in d["classes"]
    ]
    return MetricsReport(per_class, float(d["overall_accuracy"]), int(d["correct"]), int(d["total"]),
                         {m: _unnum(v) for m, v in d["macro_average"].items()},
                         {m: _unnum(v) for m, v in d["table_average"].items()}, list(d["notes"]))


def render_table(report: MetricsReport) -> str:
    """Plain-text class-wise table; cells cut to one decimal, n/a when undefined."""
    headers = ("Class", "Accuracy (%)", "Precision (%)", "Recall (%)", "Specificity (%)", "F-measure (%)")
    width = max(12, max(len(c.name) for c in report.per_class) + 2)

    def cell(v, decimals=1):
        return "n/a" if math.isnan(v) else f"{presented(v, decimals):.{decimals}f}"

    lines = [headers[0].ljust(width) + "".join(h.rjust(16) for h in headers[1:])]
    for c in report.per_class:
        lines.append(c.name.ljust(width) + "".join(cell(getattr(c, m)).rjust(16) for m in METRICS))
    lines.append("Average".ljust(width) + "".join(cell(report.table_average[m], 2).rjust(16) for m in METRICS))
    lines.append("")
    lines.append(f"Overall accuracy: {report.overall_accuracy:.2f}% ({report.correct}/{report.total})")
    macro = ", ".join(f"{m} {cell(report.macro_average[m], 2)}" for m in METRICS[1:])
    lines.append(f"Macro average (full precision): {macro}")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str = "text") -> bytes:
    if fmt == "json":
        return (json.dumps(report_to_dict(report), indent=2) + "\n").encode("utf-8")
    if fmt == "text":
        return render_table(report).encode("utf-8")
    raise ValidationError(f"unknown report format {fmt!r}")


def parse_report(data: bytes) -> MetricsReport:
    try:
        return report_from_dict(json.loads(data))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed report JSON: {exc}") from None


def report_schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("appledx").joinpath("report.schema.json").read_text(encoding="utf-8"))
