"""Sizing metrics: confusion matrix, exact and within-one accuracy, per-class rates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from papmask.core import ESON_CHART, SizeBin, SizeChart
from papmask.errors import DataError, PapmaskError
from papmask.ingest import Manifest

ORDER = (SizeBin.SMALL, SizeBin.MEDIUM, SizeBin.LARGE, SizeBin.TOO_LARGE)
TOLERANCE_BASES = ("boundary", "measurement")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = actual size, columns = predicted size, both in S, M, L, TL order."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (4, 4):
            raise DataError(f"confusion matrix must be 4x4, got {c.shape}")
        if not np.all(np.isfinite(c)) or np.any(c < 0) or np.any(c != np.round(c)):
            raise DataError("confusion matrix counts must be non-negative integers")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row(self, size: SizeBin) -> int:
        return int(self.counts[size.ordinal].sum())

    def column(self, size: SizeBin) -> int:
        return int(self.counts[:, size.ordinal].sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["actual"] + [s.value for s in ORDER])
        for s in ORDER:
            wr.writerow([s.value] + [int(v) for v in self.counts[s.ordinal]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ConfusionMatrix:
        """Read a 4x4 count table; a header row and a leading label column are optional."""
        rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
        numeric = []
        for r in rows:
            cells = [c.strip() for c in r]
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                try:
                    vals = [float(c) for c in cells[1:]]
                except ValueError:
                    continue  # header
            numeric.append(vals)
        if len(numeric) != 4 or any(len(r) != 4 for r in numeric):
            raise DataError("expected a 4x4 table of counts (rows actual S,M,L,TL; columns predicted)")
        return cls(np.array(numeric))


def accumulate(pairs: Iterable[tuple[SizeBin, SizeBin]]) -> ConfusionMatrix:
    """Confusion matrix from ``(actual, predicted)`` pairs."""
    counts = np.zeros((4, 4), dtype=np.int64)
    for actual, predicted in pairs:
        counts[SizeBin(actual).ordinal, SizeBin(predicted).ordinal] += 1
    return ConfusionMatrix(counts)


def _require_total(cm: ConfusionMatrix) -> int:
    n = cm.total
    if n == 0:
        raise DataError("metrics are undefined for an empty confusion matrix")
    return n


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts)) / _require_total(cm)


def within_one(cm: ConfusionMatrix) -> float:
    n = _require_total(cm)
    i, j = np.indices(cm.counts.shape)
    return float(cm.counts[np.abs(i - j) <= 1].sum()) / n


class ClassRates(NamedTuple):
    sensitivity: float | None  # None when the class never occurs
    ppv: float | None  # None when the class is never predicted


def sensitivity_ppv(cm: ConfusionMatrix) -> dict[SizeBin, ClassRates]:
    """Per-class fractions, full precision; absent where the denominator is zero."""
    out = {}
    for s in ORDER:
        k = s.ordinal
        tp = int(cm.counts[k, k])
        row, col = cm.row(s), cm.column(s)
        out[s] = ClassRates(tp / row if row else None, tp / col if col else None)
    return out


def tolerant_correct(width_mm: float, predicted: SizeBin, chart: SizeChart = ESON_CHART,
                     base: str = "boundary") -> bool:
    """Exact bin, or either neighbour of a boundary the true width lies near.

    ``base`` picks what the tolerance fraction multiplies: the boundary value
    or the measured width.
    """
    if base not in TOLERANCE_BASES:
        raise DataError(f"tolerance base must be one of {TOLERANCE_BASES}")
    if not (math.isfinite(width_mm) and width_mm >= 0):
        raise DataError(f"width must be a non-negative number, got {width_mm!r}")
    predicted = SizeBin(predicted)
    if predicted is chart.classify(width_mm):
        return True
    for k, b in enumerate(chart.boundaries):
        slack = chart.tolerance * (b if base == "boundary" else width_mm)
        if abs(width_mm - b) <= slack and predicted in (ORDER[k], ORDER[k + 1]):
            return True
    return False


def percent(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.0f}"


@dataclass
class MetricsReport:
    matrix: ConfusionMatrix
    accuracy: float
    within_one: float
    rates: dict[SizeBin, ClassRates]
    tolerant_accuracy: float | None = None
    failures: dict[str, int] = field(default_factory=dict)

    @property
    def evaluated(self) -> int:
        return self.matrix.total

    @property
    def n_failures(self) -> int:
        return sum(self.failures.values())

    def render(self) -> str:
        """Plain-text confusion table followed by the per-class rate table."""
        lines = ["Confusion matrix (rows actual, columns predicted)",
                 "        " + "".join(f"{s.value:>6}" for s in ORDER) + "   total"]
        for s in ORDER:
            cells = "".join(f"{int(v):>6}" for v in self.matrix.counts[s.ordinal])
            lines.append(f"  {s.value:<6}{cells}{self.matrix.row(s):>8}")
        lines.append("")
        lines.append(f"{'class':<8}{'sensitivity %':>15}{'ppv %':>8}")
        for s in ORDER:
            r = self.rates[s]
            lines.append(f"{s.value:<8}{percent(r.sensitivity):>15}{percent(r.ppv):>8}")
        lines.append("")
        lines.append(f"evaluated: {self.evaluated}")
        lines.append(f"accuracy: {100 * self.accuracy:.2f}%")
        lines.append(f"within-one: {100 * self.within_one:.2f}%")
        if self.tolerant_accuracy is not None:
            lines.append(f"tolerance-adjusted accuracy: {100 * self.tolerant_accuracy:.2f}%")
        if self.failures:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(self.failures.items()))
            lines.append(f"failures: {self.n_failures} ({detail})")
        return "\n".join(lines) + "\n"


def report(cm: ConfusionMatrix, tolerant_accuracy: float | None = None,
           failures: dict[str, int] | None = None) -> MetricsReport:
    return MetricsReport(cm, accuracy(cm), within_one(cm), sensitivity_ppv(cm),
                         tolerant_accuracy, dict(failures or {}))


class Discrepancy(NamedTuple):
    size: SizeBin
    metric: str
    computed: float
    reference: float


def compare_rates(rates: dict[SizeBin, ClassRates], reference: dict[SizeBin, tuple[float | None, float | None]],
                  tol_pct: float = 0.5) -> list[Discrepancy]:
    """Per-class rates that differ from reference percentages after integer rounding."""
    out = []
    for s, (ref_sens, ref_ppv) in reference.items():
        got = rates[s]
        for metric, value, ref in (("sensitivity", got.sensitivity, ref_sens), ("ppv", got.ppv, ref_ppv)):
            if ref is None or value is None:
                continue
            if abs(round(100 * value) - ref) > tol_pct:
                out.append(Discrepancy(s, metric, 100 * value, float(ref)))
    return out


def read_reference_rates(text: str) -> dict[SizeBin, tuple[float | None, float | None]]:
    """``class,sensitivity,ppv`` rows in percent; blank cells are skipped."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        try:
            size = SizeBin.parse(row["class"])
            sens = float(row["sensitivity"]) if (row.get("sensitivity") or "").strip() else None
            ppv = float(row["ppv"]) if (row.get("ppv") or "").strip() else None
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad reference row {row}: {exc}") from None
        out[size] = (sens, ppv)
    return out


# -- running the pipeline over a manifest ---------------------------------------

@dataclass
class SampleOutcome:
    image: str
    actual: SizeBin
    width_mm: float | None
    predicted: SizeBin | None = None
    predicted_mm: float | None = None
    status: str = "ok"
    tolerant: bool | None = None

    def row(self) -> list:
        fmt = lambda v: "" if v is None else (f"{v:.4f}" if isinstance(v, float) else getattr(v, "value", v))  # noqa: E731
        return [self.image, fmt(self.actual), fmt(self.width_mm), fmt(self.predicted),
                fmt(self.predicted_mm), self.status, "" if self.tolerant is None else int(self.tolerant)]


OUTCOME_FIELDS = ("image", "actual", "width_mm", "predicted", "predicted_mm", "status", "tolerant")


def outcomes_csv(outcomes: Sequence[SampleOutcome]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(OUTCOME_FIELDS)
    for o in outcomes:
        wr.writerow(o.row())
    return buf.getvalue()


def summarize(outcomes: Sequence[SampleOutcome]) -> MetricsReport:
    """Metrics over sized samples; failed samples only count towards ``failures``."""
    sized = [o for o in outcomes if o.predicted is not None]
    failures: dict[str, int] = {}
    for o in outcomes:
        if o.predicted is None:
            failures[o.status] = failures.get(o.status, 0) + 1
    cm = accumulate((o.actual, o.predicted) for o in sized)
    tol = [o.tolerant for o in sized if o.tolerant is not None]
    tolerant_acc = sum(tol) / len(tol) if tol else None
    if cm.total == 0:
        empty = {s: ClassRates(None, None) for s in ORDER}
        return MetricsReport(cm, 0.0, 0.0, empty, tolerant_acc, failures)
    return report(cm, tolerant_acc, failures)


def evaluate_manifest(manifest: Manifest, models, chart: SizeChart | None = None,
                      base: str = "boundary", log=None) -> tuple[MetricsReport, list[SampleOutcome]]:
    """Run the full pipeline on each record and score it against the record's truth.

    Stage failures (no face, nose or coin found) are kept as outcomes with the
    stage in ``status``; they never enter the confusion matrix.
    """
    from papmask.pipeline import run_pipeline

    if len(manifest) == 0:
        raise DataError("empty manifest")
    chart = chart or models.chart
    outcomes = []
    for rec in manifest:
        actual = rec.true_size() if rec.width_mm is None else chart.classify(rec.width_mm)
        if actual is None:
            raise DataError(f"record {rec.path} has neither width_mm nor size")
        name = rec.path.name if rec.path is not None else ""
        out = SampleOutcome(name, actual, rec.width_mm)
        try:
            res = run_pipeline(rec.load(), models, name)
        except PapmaskError as exc:
            if exc.exit_code != 4:
                raise
            out.status = exc.kind
        else:
            out.predicted, out.predicted_mm = res.size, res.nose_width_mm
            if rec.width_mm is not None:
                out.tolerant = tolerant_correct(rec.width_mm, res.size, chart, base)
        if log:
            log(f"{name}: {out.status} actual={actual.value} predicted={getattr(out.predicted, 'value', '-')}")
        outcomes.append(out)
    return summarize(outcomes), outcomes
