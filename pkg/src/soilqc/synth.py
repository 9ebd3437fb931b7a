"""Synthetic labeled soil-moisture corpora: wetting/drying dynamics plus
injected anomalies with exact ground truth.

Clean series follow the canonical shape: Poisson-timed precipitation events
drive a sharp rise over one to three samples, followed by exponential decay
back toward a per-site base level, with additive sensor noise and seasonal
air/soil temperature sinusoids that stay above freezing. Gaps arrive as
contiguous outage runs affecting the in-situ channels only (moisture and
soil temperature); the precipitation and air-temperature channels mimic an
always-on gridded ancillary source.

Injections never re-simulate: unaltered samples keep their clean values
bit-exactly, and the anomaly labels are literally "value differs from the
clean series", so label bookkeeping cannot drift.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace as dc_replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import pandas as pd

from soilqc.errors import ConfigError, DataError
from soilqc.series import Reading, SensorSeries, STEPS_PER_DAY, parse_timestamp

DEPTH_CYCLE = (5.0, 30.0, 60.0, 100.0)
MOISTURE_CAP = 0.55


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generator.

    anomaly_mix gives sample-count proportions over
    (spike, break, constant, out_of_range). Per-site contamination is
    heterogeneous: a small share of "problem sites" gets a high anomaly
    fraction while the rest are drawn low so the corpus-wide average
    matches anomaly_fraction, mirroring how field networks actually
    misbehave. Set high_anomaly_site_rate to 0 for uniform contamination.
    """

    n_sites: int = 40
    days_per_site: int = 120
    seed: int = 0
    base_moisture: tuple[float, float] = (0.15, 0.35)
    event_rate: float = 0.3          # wetting events per day
    decay_halflife: float = 72.0     # hours
    noise_sd: float = 0.003
    anomaly_fraction: float = 0.05
    anomaly_mix: tuple[float, float, float, float] = (0.4, 0.3, 0.2, 0.1)
    gap_fraction: float = 0.01
    constant_run_len: int = 960
    high_anomaly_site_rate: float = 0.1
    high_anomaly_fraction: tuple[float, float] = (0.25, 0.45)
    start: str = "2021-04-01T00:00:00Z"

    def __post_init__(self) -> None:
        if self.n_sites < 1 or self.days_per_site < 1:
            raise ConfigError("n_sites and days_per_site must be >= 1")
        if abs(sum(self.anomaly_mix) - 1.0) > 1e-9:
            raise ConfigError(f"anomaly_mix must sum to 1, got {self.anomaly_mix}")
        for frac in (self.anomaly_fraction, self.gap_fraction, self.high_anomaly_site_rate, *self.anomaly_mix):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError(f"fractions must lie in [0, 1], got {frac}")
        if self.event_rate < 0 or self.decay_halflife <= 0 or self.noise_sd < 0:
            raise ConfigError("event_rate must be >= 0; decay_halflife > 0; noise_sd >= 0")
        if not 0 < self.base_moisture[0] <= self.base_moisture[1] < MOISTURE_CAP:
            raise ConfigError(f"base_moisture range invalid: {self.base_moisture}")
        if self.constant_run_len < 2:
            raise ConfigError("constant_run_len must be >= 2")

    @property
    def start_time(self) -> datetime:
        return parse_timestamp(self.start)


def _site_rng(seed: int, site_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, site_index, stream])


def _series_rng(seed: int, site_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(site_id.encode("utf-8")), stream])


def generate_clean(cfg: SynthConfig) -> list[SensorSeries]:
    """One clean labeled-good series per site, depths cycling 5/30/60/100 cm."""
    out = []
    for i in range(cfg.n_sites):
        out.append(_clean_site(cfg, i))
    return out


def _clean_site(cfg: SynthConfig, site_index: int) -> SensorSeries:
    rng = _site_rng(cfg.seed, site_index, 0)
    n = cfg.days_per_site * STEPS_PER_DAY
    site_id = f"S{site_index:03d}"
    depth = DEPTH_CYCLE[site_index % len(DEPTH_CYCLE)]

    # deeper sensors sit at wetter, more stable base levels; the small site
    # jitter keeps the depth-to-level prior learnable without being exact
    lo, hi = cfg.base_moisture
    depth_factor = {5.0: 0.10, 30.0: 0.37, 60.0: 0.63, 100.0: 0.90}.get(depth, 0.5)
    base = lo + (hi - lo) * depth_factor + rng.uniform(-0.025, 0.025)
    n_events = rng.poisson(cfg.event_rate * cfg.days_per_site)
    event_pos = np.sort(rng.integers(0, n, size=n_events))
    event_amp = rng.uniform(0.04, 0.20, size=n_events)
    event_rise = rng.integers(1, 4, size=n_events)

    rise = np.zeros(n)
    precip = np.zeros(n)
    for pos, amp, width in zip(event_pos, event_amp, event_rise):
        stop = min(pos + width, n)
        rise[pos:stop] += amp / width
        precip[pos:stop] += amp * 50.0 / width  # mm; scale is arbitrary but positive

    decay = 0.5 ** (0.25 / cfg.decay_halflife)  # per 15-min step
    level = np.empty(n)
    current = base
    for t in range(n):
        current = base + (current - base) * decay + rise[t]
        if current > MOISTURE_CAP:
            current = MOISTURE_CAP
        level[t] = current

    values = level + rng.normal(0.0, cfg.noise_sd, size=n)

    index = pd.date_range(cfg.start_time, periods=n, freq="15min", tz="UTC")
    doy = index.dayofyear.to_numpy()
    hour = index.hour.to_numpy() + index.minute.to_numpy() / 60.0
    annual = np.sin(2.0 * math.pi * (doy - 110) / 365.0)
    diurnal = np.sin(2.0 * math.pi * (hour - 9.0) / 24.0)
    air_temp = 15.0 + 8.0 * annual + 5.0 * diurnal + rng.normal(0.0, 0.3, size=n)
    soil_temp = 12.0 + 6.0 * annual + 1.5 * diurnal + rng.normal(0.0, 0.2, size=n)

    missing = np.zeros(n, dtype=bool)
    gap_budget = int(round(cfg.gap_fraction * n))
    attempts = 0
    while missing.sum() < gap_budget and attempts < 10 * max(1, gap_budget):
        attempts += 1
        run = int(round(math.exp(rng.uniform(math.log(4), math.log(96)))))
        pos = int(rng.integers(0, max(1, n - run)))
        missing[pos : pos + run] = True

    readings = []
    timestamps = index.to_pydatetime()
    for t in range(n):
        if missing[t]:
            readings.append(
                Reading(
                    timestamp=timestamps[t],
                    value=None,
                    soil_temp=None,
                    air_temp=float(air_temp[t]),
                    precip=float(precip[t]),
                    manual_flag=None,
                )
            )
        else:
            readings.append(
                Reading(
                    timestamp=timestamps[t],
                    value=float(values[t]),
                    soil_temp=float(soil_temp[t]),
                    air_temp=float(air_temp[t]),
                    precip=float(precip[t]),
                    manual_flag=False,
                )
            )
    return SensorSeries(site_id=site_id, depth_cm=depth, readings=tuple(readings))


_ANOMALY_TYPES = ("spike", "break", "constant", "out_of_range")


def _plan_budgets(cfg: SynthConfig, target_total: int) -> dict[str, int]:
    """Sample budgets per anomaly type.

    Constant runs only fit when their share covers at least one full run
    (with the overall 20% tolerance absorbing the round-up); otherwise the
    constant share is redistributed to the short event types (spike and
    out_of_range), which can absorb any leftover budget.
    """
    spike_mix, break_mix, const_mix, oor_mix = cfg.anomaly_mix
    desired_const = const_mix * target_total
    runs = int(round(desired_const / cfg.constant_run_len))
    if runs == 0 and desired_const >= 0.8 * cfg.constant_run_len:
        runs = 1
    const_budget = runs * cfg.constant_run_len
    leftover = desired_const - const_budget
    if leftover > 0:
        short = spike_mix + oor_mix
        spike_extra = leftover * (spike_mix / short) if short > 0 else 0.0
        oor_extra = leftover * (oor_mix / short) if short > 0 else 0.0
    else:
        spike_extra = oor_extra = 0.0
    return {
        "spike": int(round(spike_mix * target_total + spike_extra)),
        "break": int(round(break_mix * target_total)),
        "constant": const_budget,
        "out_of_range": int(round(oor_mix * target_total + oor_extra)),
    }


def _place_constants(
    rng: np.random.Generator, v: np.ndarray, occupied: np.ndarray, budget: int, run_len: int
) -> None:
    n = len(v)
    n_runs = budget // run_len
    for _ in range(n_runs):
        for _attempt in range(200):
            pos = int(rng.integers(0, max(1, n - run_len)))
            window = slice(pos, pos + run_len)
            if occupied[window].any() or np.isnan(v[window]).any():
                continue
            v[pos + 1 : pos + run_len] = v[pos]
            occupied[window] = True
            break


def _place_breaks(
    rng: np.random.Generator, v: np.ndarray, occupied: np.ndarray, budget: int
) -> None:
    n = len(v)
    min_len, max_len = 16, 480  # 4 hours .. 5 days of 15-min steps
    spent = 0
    attempts = 0
    while spent < budget - min_len // 2 and attempts < 400:
        attempts += 1
        length = int(round(math.exp(rng.uniform(math.log(min_len), math.log(max_len)))))
        length = min(length, budget - spent + min_len // 2)
        if length < min_len:
            length = min_len
        pos = int(rng.integers(1, max(2, n - length)))
        window = slice(pos, pos + length)
        if occupied[window].any():
            continue
        seg = v[window]
        present = np.isfinite(seg)
        if present.sum() < min_len // 2:
            continue
        magnitude = rng.uniform(0.05, 0.20)
        up_ok = np.nanmax(seg) + magnitude <= 0.58
        down_ok = np.nanmin(seg) - magnitude >= 0.02
        if up_ok and down_ok:
            shift = magnitude if rng.random() < 0.5 else -magnitude
        elif up_ok:
            shift = magnitude
        elif down_ok:
            shift = -magnitude
        else:
            continue
        seg[present] += shift
        occupied[window] = True
        spent += int(present.sum())


def _place_spikes(
    rng: np.random.Generator, v: np.ndarray, occupied: np.ndarray, budget: int
) -> None:
    n = len(v)
    spent = 0
    attempts = 0
    guard = 3  # keep the neighborhood clean so the excursion shape survives
    max_attempts = max(60 * budget, 200)
    while spent < budget and attempts < max_attempts:
        attempts += 1
        if attempts == max_attempts // 2:
            guard = 0  # dense regime: give up on spacing, just avoid overlap
        width = 1 if spent + 2 > budget else int(rng.integers(1, 3))
        pos = int(rng.integers(1, max(2, n - width - 1)))
        window = slice(pos, pos + width)
        guard_window = slice(max(0, pos - guard), min(n, pos + width + guard))
        if occupied[guard_window].any() or np.isnan(v[window]).any():
            continue
        magnitude = rng.uniform(0.10, 0.30)
        seg = v[window]
        up_ok = seg.max() + magnitude <= 0.58
        down_ok = seg.min() - magnitude >= 0.02
        if up_ok and down_ok:
            sign = 1.0 if rng.random() < 0.5 else -1.0
        elif up_ok:
            sign = 1.0
        elif down_ok:
            sign = -1.0
        else:
            magnitude = max(0.08, float(seg.min()) - 0.02)
            sign = -1.0
            if seg.min() - magnitude < 0.0:
                continue
        v[window] = seg + sign * magnitude
        occupied[window] = True
        spent += width


def _place_out_of_range(
    rng: np.random.Generator, v: np.ndarray, occupied: np.ndarray, budget: int
) -> None:
    n = len(v)
    spent = 0
    attempts = 0
    while spent < budget and attempts < max(60 * budget, 200):
        attempts += 1
        width = 1 if spent + 2 > budget else int(rng.integers(1, 3))
        pos = int(rng.integers(0, max(1, n - width)))
        window = slice(pos, pos + width)
        if occupied[window].any() or np.isnan(v[window]).any():
            continue
        if rng.random() < 0.5:
            v[window] = -rng.uniform(0.005, 0.05)
        else:
            v[window] = 0.6 + rng.uniform(0.005, 0.10)
        occupied[window] = True
        spent += width


def inject_with_details(
    series: SensorSeries, cfg: SynthConfig
) -> tuple[SensorSeries, dict[str, int], dict[str, np.ndarray]]:
    """inject_anomalies plus per-type sample masks for diagnostics."""
    clean = series.values()
    v = clean.copy()
    n = len(v)
    present = np.isfinite(clean)
    n_present = int(present.sum())
    target_total = int(round(cfg.anomaly_fraction * n_present))

    counts = {name: 0 for name in _ANOMALY_TYPES}
    masks = {name: np.zeros(n, dtype=bool) for name in _ANOMALY_TYPES}
    if target_total > 0:
        if target_total > n_present:
            raise DataError(
                f"anomaly target {target_total} exceeds present samples {n_present} "
                f"(site {series.site_id})"
            )
        budgets = _plan_budgets(cfg, target_total)
        rng = _series_rng(cfg.seed, series.site_id, 1)
        occupied = np.zeros(n, dtype=bool)

        stages = (
            ("constant", lambda: _place_constants(rng, v, occupied, budgets["constant"], cfg.constant_run_len)),
            ("break", lambda: _place_breaks(rng, v, occupied, budgets["break"])),
            ("spike", lambda: _place_spikes(rng, v, occupied, budgets["spike"])),
            ("out_of_range", lambda: _place_out_of_range(rng, v, occupied, budgets["out_of_range"])),
        )
        for name, run_stage in stages:
            before = v.copy()
            run_stage()
            with np.errstate(invalid="ignore"):
                masks[name] = present & (v != before)
            counts[name] = int(masks[name].sum())

    with np.errstate(invalid="ignore"):
        changed = present & (v != clean)
    realized = int(changed.sum())
    if target_total > 0:
        rel_err = abs(realized - target_total) / target_total
        if rel_err > 0.20:
            raise DataError(
                f"anomaly target {cfg.anomaly_fraction:.3f} infeasible for site "
                f"{series.site_id}: realized {realized}/{target_total} samples"
            )

    readings = []
    for idx, reading in enumerate(series.readings):
        if reading.value is None:
            readings.append(reading)
        elif changed[idx]:
            readings.append(dc_replace(reading, value=float(v[idx]), manual_flag=True))
        else:
            readings.append(dc_replace(reading, manual_flag=False))
    injected = dc_replace(series, readings=tuple(readings))
    return injected, counts, masks


def inject_anomalies(series: SensorSeries, cfg: SynthConfig) -> SensorSeries:
    """Overlay the configured anomaly mix on a clean series.

    Every sample whose value now differs from the clean input carries
    manual_flag=True, everything else present carries False. The realized
    anomalous-sample fraction must land within 20% (relative) of
    cfg.anomaly_fraction or the target is deemed infeasible.
    """
    injected, _, _ = inject_with_details(series, cfg)
    return injected


@dataclass(frozen=True)
class SiteTruth:
    """Per-site injection bookkeeping for the ground-truth sidecar."""

    site_id: str
    depth_cm: float
    n_samples: int
    n_present: int
    n_anomalous: int
    counts: dict[str, int]
    target_fraction: float

    @property
    def realized_fraction(self) -> float:
        return self.n_anomalous / self.n_present if self.n_present else 0.0


def site_fractions(cfg: SynthConfig) -> list[float]:
    """Per-site anomaly fractions averaging ~cfg.anomaly_fraction.

    A high_anomaly_site_rate share of sites draws from the problem-site
    range; the rest draw low so the expected corpus average stays on
    target. Falls back to uniform contamination when the target is too
    small to support problem sites.
    """
    rng = np.random.default_rng([cfg.seed, 0xF0A0])
    mean_high = sum(cfg.high_anomaly_fraction) / 2.0
    rate = cfg.high_anomaly_site_rate
    n_high = int(round(rate * cfg.n_sites))
    low_mean = (
        (cfg.anomaly_fraction - n_high * mean_high / cfg.n_sites)
        * cfg.n_sites / max(1, cfg.n_sites - n_high)
    )
    if n_high == 0 or low_mean <= 0.002:
        return [cfg.anomaly_fraction] * cfg.n_sites
    high_sites = set(rng.choice(cfg.n_sites, size=n_high, replace=False).tolist())
    fractions = []
    for i in range(cfg.n_sites):
        if i in high_sites:
            fractions.append(float(rng.uniform(*cfg.high_anomaly_fraction)))
        else:
            fractions.append(float(rng.uniform(0.5 * low_mean, 1.5 * low_mean)))
    return fractions


def generate_corpus(cfg: SynthConfig) -> tuple[list[SensorSeries], list[SiteTruth]]:
    """Clean generation + injection for every site, with truth summaries."""
    fractions = site_fractions(cfg)
    series_out = []
    truths = []
    for i in range(cfg.n_sites):
        clean = _clean_site(cfg, i)
        site_cfg = dc_replace(cfg, anomaly_fraction=fractions[i])
        injected, counts, _ = inject_with_details(clean, site_cfg)
        flags = [r.manual_flag for r in injected.readings]
        n_present = sum(1 for f in flags if f is not None)
        n_anom = sum(1 for f in flags if f)
        series_out.append(injected)
        truths.append(
            SiteTruth(
                site_id=injected.site_id,
                depth_cm=injected.depth_cm,
                n_samples=len(flags),
                n_present=n_present,
                n_anomalous=n_anom,
                counts=counts,
                target_fraction=fractions[i],
            )
        )
    return series_out, truths
