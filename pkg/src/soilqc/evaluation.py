"""Confusion matrices, per-site accuracy breakdowns, anomaly-fraction
stratification, and throughput benchmarking.

Scoring convention: the positive class is "anomaly". Samples whose
reference label is missing, or whose prediction is unscorable (missing
value), are excluded from the counts and tallied separately. Percentages
are always derived from the integer counts, never stored.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from soilqc.errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 agreement counts between a prediction source and reference labels."""

    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    def __post_init__(self) -> None:
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise DataError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            tn=self.tn + other.tn,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tp=self.tp + other.tp,
        )

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def correct_accuracy_pct(self) -> float:
        """Share of reference-correct observations flagged correct, in percent."""
        denom = self.tn + self.fp
        return 100.0 * self.tn / denom if denom else 0.0

    @property
    def correct_error_pct(self) -> float:
        denom = self.tn + self.fp
        return 100.0 * self.fp / denom if denom else 0.0

    @property
    def anomaly_recall_pct(self) -> float:
        """Share of reference anomalies flagged anomalous, in percent."""
        denom = self.tp + self.fn
        return 100.0 * self.tp / denom if denom else 0.0

    @property
    def anomaly_miss_pct(self) -> float:
        denom = self.tp + self.fn
        return 100.0 * self.fn / denom if denom else 0.0

    @property
    def overall_accuracy_pct(self) -> float:
        return 100.0 * (self.tn + self.tp) / self.total if self.total else 0.0

    @property
    def overall_error_pct(self) -> float:
        return 100.0 * (self.fp + self.fn) / self.total if self.total else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def anomaly_fraction(self) -> float:
        """Reference anomaly share among scored samples."""
        return (self.tp + self.fn) / self.total if self.total else 0.0


def confusion(
    reference: Sequence[Optional[bool]],
    predicted: Sequence[Optional[bool]],
) -> ConfusionMatrix:
    """Exact counts over scorable samples.

    A sample is scored only when both its reference label and its
    prediction are present; the excluded count is len(reference) - total.
    """
    if len(reference) != len(predicted):
        raise DataError(
            f"reference and prediction lengths differ: {len(reference)} vs {len(predicted)}"
        )
    tn = fp = fn = tp = 0
    for ref, pred in zip(reference, predicted):
        if ref is None or pred is None:
            continue
        if ref:
            if pred:
                tp += 1
            else:
                fn += 1
        else:
            if pred:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)


@dataclass(frozen=True)
class SiteReport:
    """One site's scoring summary; percentages derive from the matrix."""

    site_id: str
    matrix: ConfusionMatrix
    excluded: int = 0

    @property
    def anomaly_fraction(self) -> float:
        return self.matrix.anomaly_fraction

    @property
    def correct_flagged_pct(self) -> float:
        return self.matrix.correct_accuracy_pct

    @property
    def anomaly_flagged_pct(self) -> float:
        return self.matrix.anomaly_recall_pct


@dataclass(frozen=True)
class StratifiedReport:
    """Sites partitioned by anomaly fraction, with count-summed aggregates."""

    cutoff: float
    low: list[SiteReport]
    high: list[SiteReport]
    low_total: ConfusionMatrix
    high_total: ConfusionMatrix


def stratify_by_anomaly_fraction(
    reports: Sequence[SiteReport], cutoff: float = 0.30
) -> StratifiedReport:
    """Split reports at anomaly_fraction > cutoff and sum each group's counts."""
    if not 0.0 < cutoff < 1.0:
        raise DataError(f"cutoff must lie in (0, 1), got {cutoff}")
    low, high = [], []
    low_total = ConfusionMatrix()
    high_total = ConfusionMatrix()
    for report in reports:
        if report.anomaly_fraction > cutoff:
            high.append(report)
            high_total = high_total + report.matrix
        else:
            low.append(report)
            low_total = low_total + report.matrix
    return StratifiedReport(cutoff=cutoff, low=low, high=high,
                            low_total=low_total, high_total=high_total)


@dataclass(frozen=True)
class BenchmarkResult:
    observations: int
    seconds: float          # median of the timed runs
    runs: tuple[float, ...]

    @property
    def observations_per_second(self) -> float:
        return self.observations / self.seconds if self.seconds > 0 else float("inf")


def benchmark(
    flagger: Callable[[], object],
    observations: int,
    timed_runs: int = 3,
) -> BenchmarkResult:
    """Median wall time of `flagger` over `timed_runs` runs after one warmup.

    The callable must already be bound to a corpus holding at least
    `observations` samples; pass observations for the throughput math.
    """
    if observations < 1:
        raise DataError("observations must be >= 1")
    flagger()  # warmup
    times = []
    for _ in range(timed_runs):
        t0 = time.perf_counter()
        flagger()
        times.append(time.perf_counter() - t0)
    return BenchmarkResult(
        observations=observations,
        seconds=statistics.median(times),
        runs=tuple(times),
    )


def take_observations(series_list, observations: int):
    """Truncate a corpus to exactly `observations` readings for benchmarking."""
    from soilqc.series import SensorSeries  # local import avoids a cycle

    remaining = observations
    out = []
    for series in series_list:
        if remaining <= 0:
            break
        k = min(len(series.readings), remaining)
        out.append(
            SensorSeries(
                site_id=series.site_id,
                depth_cm=series.depth_cm,
                readings=series.readings[:k],
                saturation=series.saturation,
            )
        )
        remaining -= k
    if remaining > 0:
        raise DataError(
            f"corpus holds only {observations - remaining} observations, need {observations}"
        )
    return out


def render_matrix(matrix: ConfusionMatrix, excluded: int = 0, title: str = "") -> str:
    """Human-readable accuracy table in the correct/anomaly row layout."""
    lines = []
    if title:
        lines.append(title)
    header = f"{'':<14}{'Correctly flagged':>20}{'Incorrectly flagged':>22}{'Total':>12}"
    lines.append(header)
    lines.append(
        f"{'Correct':<14}{matrix.tn:>20}{matrix.fp:>22}{matrix.tn + matrix.fp:>12}"
    )
    lines.append(
        f"{'Correct (%)':<14}{matrix.correct_accuracy_pct:>20.2f}{matrix.correct_error_pct:>22.2f}{100.0:>12.2f}"
    )
    lines.append(
        f"{'Anomalies':<14}{matrix.tp:>20}{matrix.fn:>22}{matrix.tp + matrix.fn:>12}"
    )
    lines.append(
        f"{'Anomalies (%)':<14}{matrix.anomaly_recall_pct:>20.2f}{matrix.anomaly_miss_pct:>22.2f}{100.0:>12.2f}"
    )
    lines.append(
        f"{'Total':<14}{matrix.tn + matrix.tp:>20}{matrix.fp + matrix.fn:>22}{matrix.total:>12}"
    )
    lines.append(
        f"{'Total (%)':<14}{matrix.overall_accuracy_pct:>20.2f}{matrix.overall_error_pct:>22.2f}{100.0:>12.2f}"
    )
    if excluded:
        lines.append(f"Excluded (missing reference or prediction): {excluded}")
    return "\n".join(lines)
