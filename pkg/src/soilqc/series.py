"""Domain types for sensor time series, CSV ingestion, gap handling,
and hourly-ancillary-to-subhourly alignment.

All readings live on a 15-minute UTC grid. Gaps are materialized as
missing-value readings rather than elided so that downstream day
windows stay rectangular.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Iterable, Optional, Sequence

import numpy as np

from soilqc.errors import DataError

STEP = timedelta(minutes=15)
STEPS_PER_DAY = 96
STEPS_PER_HOUR = 4

CSV_COLUMNS = (
    "timestamp",
    "site_id",
    "depth_cm",
    "value",
    "soil_temp",
    "air_temp",
    "precip",
    "manual_flag",
)


class FlagCode(enum.Enum):
    """QC flag codes attachable to a reading.

    G (good) is mutually exclusive with all other codes. M (missing)
    attaches exactly to readings with an absent value. The remaining
    codes may combine freely in one flag set.
    """

    G = "G"      # good: no other code triggered and value present
    C01 = "C01"  # value below geophysical lower bound
    C02 = "C02"  # value above geophysical upper bound
    C03 = "C03"  # value above per-site saturation
    D01 = "D01"  # in-situ soil temperature below freezing
    D02 = "D02"  # air temperature below freezing
    D04 = "D04"  # moisture rise without precipitation in the lookback
    SPK = "SPK"  # spectral spike
    BRK = "BRK"  # spectral break (level shift)
    CST = "CST"  # implausibly long constant run
    M = "M"      # missing value

    def __lt__(self, other: "FlagCode") -> bool:
        order = list(type(self))
        return order.index(self) < order.index(other)


_FLAG_ORDER = {code: i for i, code in enumerate(FlagCode)}


def format_flags(flags: frozenset[FlagCode]) -> str:
    """Render a flag set as the semicolon-joined qflag cell, canonical order."""
    return ";".join(c.value for c in sorted(flags, key=_FLAG_ORDER.__getitem__))


def parse_flags(cell: str) -> frozenset[FlagCode]:
    if not cell:
        return frozenset()
    try:
        return frozenset(FlagCode(tok) for tok in cell.split(";"))
    except ValueError as exc:
        raise DataError(f"unknown qflag code in {cell!r}") from exc


@dataclass(frozen=True)
class Reading:
    """One 15-minute observation for a single sensor.

    value is volumetric water content in m3/m3 or None when missing;
    range violations are flag conditions, not type violations.
    precip is mm accumulated over the preceding interval.
    """

    timestamp: datetime
    value: Optional[float] = None
    soil_temp: Optional[float] = None
    air_temp: Optional[float] = None
    precip: Optional[float] = None
    manual_flag: Optional[bool] = None

    def __post_init__(self) -> None:
        ts = self.timestamp
        if ts.tzinfo is None or ts.utcoffset() != timedelta(0):
            raise DataError(f"timestamp must be UTC-aware: {ts!r}")
        if ts.minute % 15 != 0 or ts.second != 0 or ts.microsecond != 0:
            raise DataError(f"timestamp not on the 15-minute grid: {ts.isoformat()}")
        if self.value is not None and not math.isfinite(self.value):
            raise DataError(f"non-finite value at {ts.isoformat()}")


@dataclass(frozen=True)
class SensorSeries:
    """Time-ordered readings for one (site, depth) sensor.

    saturation is an optional per-site override used by the C03 rule;
    when absent that rule is disabled.
    """

    site_id: str
    depth_cm: float
    readings: tuple[Reading, ...]
    saturation: Optional[float] = None

    def __post_init__(self) -> None:
        if self.depth_cm <= 0:
            raise DataError(f"depth_cm must be positive, got {self.depth_cm}")
        for prev, cur in zip(self.readings, self.readings[1:]):
            if cur.timestamp <= prev.timestamp:
                raise DataError(
                    f"readings not strictly increasing at {cur.timestamp.isoformat()} "
                    f"(site {self.site_id}, depth {self.depth_cm:g})"
                )

    def __len__(self) -> int:
        return len(self.readings)

    def values(self) -> np.ndarray:
        """Values as float64 with NaN for missing."""
        return np.array(
            [np.nan if r.value is None else r.value for r in self.readings],
            dtype=np.float64,
        )

    def timestamps(self) -> list[datetime]:
        return [r.timestamp for r in self.readings]


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 UTC timestamp ('...Z' or explicit offset)."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {text!r}") from exc
    if ts.tzinfo is None:
        raise DataError(f"timestamp lacks a UTC offset: {text!r}")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_optional_float(cell: str, what: str) -> Optional[float]:
    if cell == "":
        return None
    try:
        out = float(cell)
    except ValueError as exc:
        raise DataError(f"bad {what} value {cell!r}") from exc
    if not math.isfinite(out):
        raise DataError(f"non-finite {what} value {cell!r}")
    return out


def _parse_manual_flag(cell: str) -> Optional[bool]:
    if cell == "":
        return None
    if cell == "0":
        return False
    if cell == "1":
        return True
    raise DataError(f"manual_flag must be '', '0' or '1', got {cell!r}")


def fill_grid_gaps(readings: Sequence[Reading]) -> tuple[Reading, ...]:
    """Insert missing-value readings so consecutive timestamps differ by 15 min."""
    if not readings:
        return ()
    out: list[Reading] = [readings[0]]
    for reading in readings[1:]:
        expected = out[-1].timestamp + STEP
        while expected < reading.timestamp:
            out.append(Reading(timestamp=expected))
            expected += STEP
        out.append(reading)
    return tuple(out)


def ingest_csv(
    path: str | os.PathLike,
    schema: Optional[dict[str, str]] = None,
) -> list[SensorSeries]:
    """Read the canonical sensor CSV into one SensorSeries per (site, depth).

    schema maps canonical column names to the header names actually present
    (identity by default). Extra columns are ignored. Rows may arrive in any
    order; duplicate (site, depth, timestamp) is an error. Grid gaps between
    each sensor's first and last reading are filled with missing readings.
    """
    colmap = dict(zip(CSV_COLUMNS, CSV_COLUMNS))
    if schema:
        unknown = set(schema) - set(CSV_COLUMNS)
        if unknown:
            raise DataError(f"schema maps unknown columns: {sorted(unknown)}")
        colmap.update(schema)

    groups: dict[tuple[str, float], dict[datetime, Reading]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        missing_cols = [c for c in colmap.values() if c not in reader.fieldnames]
        if missing_cols:
            raise DataError(f"{path}: header missing columns {missing_cols}")
        for idx, row in enumerate(reader, start=2):  # 1-based, header is line 1
            try:
                ts = parse_timestamp(row[colmap["timestamp"]])
                site_id = row[colmap["site_id"]].strip()
                if not site_id:
                    raise DataError("empty site_id")
                depth = float(row[colmap["depth_cm"]])
                reading = Reading(
                    timestamp=ts,
                    value=_parse_optional_float(row[colmap["value"]], "value"),
                    soil_temp=_parse_optional_float(row[colmap["soil_temp"]], "soil_temp"),
                    air_temp=_parse_optional_float(row[colmap["air_temp"]], "air_temp"),
                    precip=_parse_optional_float(row[colmap["precip"]], "precip"),
                    manual_flag=_parse_manual_flag(row[colmap["manual_flag"]]),
                )
            except (DataError, ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: malformed row {idx}: {exc}") from exc
            bucket = groups.setdefault((site_id, depth), {})
            if ts in bucket:
                raise DataError(
                    f"{path}: duplicate timestamp {format_timestamp(ts)} for "
                    f"site {site_id} depth {depth:g} (row {idx})"
                )
            bucket[ts] = reading

    out = []
    for (site_id, depth), bucket in sorted(groups.items()):
        ordered = tuple(bucket[ts] for ts in sorted(bucket))
        out.append(
            SensorSeries(
                site_id=site_id,
                depth_cm=depth,
                readings=fill_grid_gaps(ordered),
            )
        )
    return out


def _format_optional(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def _format_depth(depth: float) -> str:
    return f"{depth:g}"


def write_csv(
    path: str | os.PathLike,
    series_list: Iterable[SensorSeries],
    flags: Optional[dict[tuple[str, float], Sequence[frozenset[FlagCode]]]] = None,
    probabilities: Optional[dict[tuple[str, float], Sequence[Optional[float]]]] = None,
    predictions: Optional[dict[tuple[str, float], Sequence[Optional[bool]]]] = None,
) -> None:
    """Write series to the canonical CSV, atomically (temp file + rename).

    Optional per-series annotation columns: qflag (semicolon-joined codes),
    anomaly_prob, anomaly_pred. Annotation sequences align index-for-index
    with each series' readings.
    """
    header = list(CSV_COLUMNS)
    if flags is not None:
        header.append("qflag")
    if probabilities is not None:
        header.append("anomaly_prob")
    if predictions is not None:
        header.append("anomaly_pred")

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for series in series_list:
                key = (series.site_id, series.depth_cm)
                for i, r in enumerate(series.readings):
                    row = [
                        format_timestamp(r.timestamp),
                        series.site_id,
                        _format_depth(series.depth_cm),
                        _format_optional(r.value),
                        _format_optional(r.soil_temp),
                        _format_optional(r.air_temp),
                        _format_optional(r.precip),
                        "" if r.manual_flag is None else ("1" if r.manual_flag else "0"),
                    ]
                    if flags is not None:
                        row.append(format_flags(flags[key][i]))
                    if probabilities is not None:
                        p = probabilities[key][i]
                        row.append("" if p is None else repr(p))
                    if predictions is not None:
                        b = predictions[key][i]
                        row.append("" if b is None else ("1" if b else "0"))
                    writer.writerow(row)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def align_hourly_ancillary(
    series: SensorSeries,
    hourly: Sequence[tuple[datetime, Optional[float], Optional[float]]],
) -> SensorSeries:
    """Assign hourly (precip, air_temp) records to the 15-min readings they cover.

    A reading at time t takes the record at hour H when t lies in [H, H+1h)
    (left-closed). Readings with no covering hour keep their ancillary fields
    as they were.
    """
    table: dict[datetime, tuple[Optional[float], Optional[float]]] = {}
    for instant, precip, air_temp in hourly:
        ts = instant.astimezone(timezone.utc)
        if ts.minute != 0 or ts.second != 0 or ts.microsecond != 0:
            raise DataError(f"hourly record not on the whole-hour grid: {ts.isoformat()}")
        table[ts] = (precip, air_temp)

    new_readings = []
    for r in series.readings:
        hour = r.timestamp.replace(minute=0)
        if hour in table:
            precip, air_temp = table[hour]
            r = replace(r, precip=precip, air_temp=air_temp)
        new_readings.append(r)
    return replace(series, readings=tuple(new_readings))


def split_sites(
    all_series: Sequence[SensorSeries],
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[list[SensorSeries], list[SensorSeries], list[SensorSeries]]:
    """Partition series into train/val/test groups by site.

    All series of a site stay together (prevents leakage of within-site
    temporal correlation). Deterministic for a fixed seed; group sizes land
    within one site of the exact proportions via largest-remainder rounding.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise DataError(f"split ratios must be nonnegative, got {ratios}")

    sites = sorted({s.site_id for s in all_series})
    if len(all_series) < 3:
        raise DataError("need at least 3 series to split")

    rng = np.random.default_rng(seed)
    order = [sites[i] for i in rng.permutation(len(sites))]

    n = len(sites)
    exact = [n * r for r in ratios]
    counts = [int(x) for x in exact]
    remainders = sorted(
        range(3), key=lambda i: (exact[i] - counts[i], -i), reverse=True
    )
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1

    groups: list[list[SensorSeries]] = [[], [], []]
    cursor = 0
    assignment: dict[str, int] = {}
    for gi, count in enumerate(counts):
        for site in order[cursor : cursor + count]:
            assignment[site] = gi
        cursor += count
    for series in all_series:
        groups[assignment[series.site_id]].append(series)
    return groups[0], groups[1], groups[2]
