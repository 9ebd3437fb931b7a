"""Threshold and spectral QC rules for soil moisture series.

Threshold checks are pointwise geophysical-consistency tests (range,
frozen soil/air, rain-free rises). Spectral checks detect spikes,
breaks, and constant runs from Savitzky-Golay smoothing residuals and
derivatives with a MAD-based robust noise scale.

Detector definitions
--------------------
residual   r[t]  = value[t] - SG-smoothed[t]
robust sigma     = 1.4826 * rolling_median(|x - rolling_median(x)|),
                   centered 96-sample windows, floored at sigma_floor
spike candidate  : |r[t]| > spike_z * sigma_r[t] and the SG first
                   derivative changes sign across t
break candidate  : |d1[t]| > break_z * sigma_d1[t] and the SG second
                   derivative changes sign across t
Consecutive candidates form one event. An event whose series returns to
within spike_z * sigma_r of the pre-event level within 2 samples after
it ends is a spike (all its samples flagged SPK); otherwise it is a
break, flagged BRK at the largest discrete jump inside the event, and
suppressed for upward jumps when precipitation fell in the lookback.
Constant runs are flagged purely by run length of exactly equal values.

Any missing value inside an SG window suppresses spectral flags at that
window's center; we never interpolate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from soilqc.errors import ConfigError
from soilqc.series import FlagCode, SensorSeries, STEPS_PER_HOUR

MAD_TO_SIGMA = 1.4826
ROBUST_WINDOW = 96          # samples; one day of context for the noise scale
ROBUST_MIN_PERIODS = 24


@dataclass(frozen=True)
class RuleConfig:
    """Tunable thresholds for the rule engine.

    Defaults follow the classical soil-moisture QC limits: geophysical
    range 0-0.6 m3/m3, freezing at 0 degC, 24 h precipitation lookback,
    and a 10-day (960-sample) constant run. sigma_floor keeps the robust
    scale meaningful on noise-free stretches.
    """

    lower_bound: float = 0.0
    upper_bound: float = 0.6
    freeze_temp: float = 0.0
    rise_threshold: float = 0.01     # m3/m3 per 15-min step
    precip_lookback: float = 24.0    # hours
    constant_run_len: int = 960
    sg_window: int = 13
    sg_order: int = 3
    spike_z: float = 6.0
    break_z: float = 6.0
    sigma_floor: float = 0.001       # m3/m3

    def __post_init__(self) -> None:
        if self.sg_window % 2 == 0 or self.sg_window <= self.sg_order:
            raise ConfigError(
                f"sg_window must be odd and > sg_order, got ({self.sg_window}, {self.sg_order})"
            )
        if self.sg_order < 2:
            raise ConfigError("sg_order must be >= 2 (second derivatives required)")
        if not self.lower_bound < self.upper_bound:
            raise ConfigError("lower_bound must be < upper_bound")
        if self.constant_run_len < 2:
            raise ConfigError("constant_run_len must be >= 2")
        for name in ("lower_bound", "upper_bound", "freeze_temp", "rise_threshold",
                     "precip_lookback", "spike_z", "break_z", "sigma_floor"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")


@dataclass(frozen=True)
class SgKernel:
    """Convolution weights estimating a derivative at the window center.

    weights are in time order: estimate[t] = weights . values[t-h : t+h+1]
    with h = window // 2. Sample spacing is one 15-min step, so derivative
    kernels are per-step.
    """

    window: int
    order: int
    derivative: int
    weights: np.ndarray


def sg_kernel(window: int, order: int, derivative: int) -> SgKernel:
    """Least-squares polynomial-fit weights for the center of a window.

    The degree-`order` polynomial minimizing squared error over the window
    has its `derivative`-th derivative at the center given by a fixed linear
    combination of the samples; those weights are returned.
    """
    if window % 2 == 0 or window <= order or order < derivative or derivative not in (0, 1, 2):
        raise ConfigError(
            f"need odd window > order >= derivative in (0,1,2), got ({window}, {order}, {derivative})"
        )
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    design = x[:, None] ** np.arange(order + 1, dtype=np.float64)[None, :]
    weights = math.factorial(derivative) * np.linalg.pinv(design)[derivative]
    return SgKernel(window=window, order=order, derivative=derivative, weights=weights)


def apply_kernel(values: np.ndarray, kernel: SgKernel) -> np.ndarray:
    """Slide the kernel over the series; NaN where the window is incomplete.

    Missing samples (NaN) poison every window they fall in, so centers near
    gaps come back NaN and produce no spectral flags.
    """
    n = len(values)
    half = kernel.window // 2
    out = np.full(n, np.nan)
    if n >= kernel.window:
        out[half : n - half] = np.correlate(values, kernel.weights, mode="valid")
    return out


def _rolling_robust_sigma(x: np.ndarray, floor: float) -> np.ndarray:
    """MAD-based scale over centered windows, NaN-skipping, floored.

    Uses the double-rolling-median form (each point deviates from its own
    centered median) so the whole thing vectorizes; windows with too few
    finite samples give NaN, which downstream comparisons treat as
    no-flag.
    """
    s = pd.Series(x)
    med = s.rolling(ROBUST_WINDOW, center=True, min_periods=ROBUST_MIN_PERIODS).median()
    dev = (s - med).abs()
    mad = dev.rolling(ROBUST_WINDOW, center=True, min_periods=ROBUST_MIN_PERIODS).median()
    sigma = MAD_TO_SIGMA * mad.to_numpy()
    return np.maximum(sigma, floor)  # NaN propagates, keeping no-data regions unflagged


_BITS = {code: 1 << i for i, code in enumerate(FlagCode)}


def _ancillary(series: SensorSeries, field: str) -> np.ndarray:
    return np.array(
        [np.nan if getattr(r, field) is None else getattr(r, field) for r in series.readings],
        dtype=np.float64,
    )


def _precip_window_stats(precip: np.ndarray, lookback_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (total, count-of-present) precip over the trailing window.

    The window covers the current sample and the lookback_steps - 1 before
    it, truncated at the series start.
    """
    present = np.isfinite(precip)
    filled = np.where(present, precip, 0.0)
    csum = np.concatenate(([0.0], np.cumsum(filled)))
    ccnt = np.concatenate(([0], np.cumsum(present)))
    idx = np.arange(len(precip)) + 1
    lo = np.maximum(idx - lookback_steps, 0)
    return csum[idx] - csum[lo], ccnt[idx] - ccnt[lo]


def _threshold_mask(series: SensorSeries, cfg: RuleConfig) -> np.ndarray:
    v = series.values()
    present = np.isfinite(v)
    mask = np.zeros(len(v), dtype=np.int64)

    mask[present & (v < cfg.lower_bound)] |= _BITS[FlagCode.C01]
    mask[present & (v > cfg.upper_bound)] |= _BITS[FlagCode.C02]
    if series.saturation is not None:
        mask[present & (v > series.saturation)] |= _BITS[FlagCode.C03]

    soil_t = _ancillary(series, "soil_temp")
    air_t = _ancillary(series, "air_temp")
    with np.errstate(invalid="ignore"):
        mask[present & (soil_t < cfg.freeze_temp)] |= _BITS[FlagCode.D01]
        mask[present & (air_t < cfg.freeze_temp)] |= _BITS[FlagCode.D02]

    precip = _ancillary(series, "precip")
    lookback_steps = max(1, int(round(cfg.precip_lookback * STEPS_PER_HOUR)))
    total, cnt = _precip_window_stats(precip, lookback_steps)
    rise = np.zeros(len(v), dtype=bool)
    with np.errstate(invalid="ignore"):
        rise[1:] = (v[1:] - v[:-1]) > cfg.rise_threshold
    d04 = rise & (cnt > 0) & (total == 0.0)
    mask[d04] |= _BITS[FlagCode.D04]
    return mask


_DERIV_EPS = 1e-9  # below any physical slope; keeps fp dust from faking a sign


def _sign_change_across(d: np.ndarray) -> np.ndarray:
    """True at t when d[t-1] and d[t+1] have opposite, non-negligible signs."""
    n = len(d)
    out = np.zeros(n, dtype=bool)
    if n >= 3:
        left, right = d[:-2], d[2:]
        with np.errstate(invalid="ignore"):
            out[1:-1] = (
                (left * right < 0.0)
                & (np.abs(left) > _DERIV_EPS)
                & (np.abs(right) > _DERIV_EPS)
            )
    return out


def _candidate_events(candidates: np.ndarray, merge_gap: int = 0) -> list[tuple[int, int]]:
    """Candidate runs as (start, stop) half-open pairs.

    Runs separated by at most merge_gap non-candidate samples are one
    event: an excursion's smoothing skirt raises residuals on both sides
    of the core within the SG half-window, and splitting them would let
    the skirt masquerade as a separate spike.
    """
    idx = np.flatnonzero(candidates)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1 + merge_gap)
    starts = np.concatenate(([0], breaks + 1))
    stops = np.concatenate((breaks + 1, [len(idx)]))
    return [(int(idx[a]), int(idx[b - 1]) + 1) for a, b in zip(starts, stops)]


def _spectral_mask(series: SensorSeries, cfg: RuleConfig) -> np.ndarray:
    v = series.values()
    n = len(v)
    mask = np.zeros(n, dtype=np.int64)
    if n == 0:
        return mask

    # constant runs: purely run-length on exactly equal present values
    if n >= cfg.constant_run_len:
        same = np.zeros(n, dtype=bool)
        same[1:] = v[1:] == v[:-1]  # NaN != NaN keeps gaps out of runs
        starts = np.flatnonzero(~same)
        stops = np.append(starts[1:], n)
        for a, b in zip(starts, stops):
            if b - a >= cfg.constant_run_len:
                mask[a:b] |= _BITS[FlagCode.CST]

    if n < cfg.sg_window:
        return mask

    smoothed = apply_kernel(v, sg_kernel(cfg.sg_window, cfg.sg_order, 0))
    d1 = apply_kernel(v, sg_kernel(cfg.sg_window, cfg.sg_order, 1))
    d2 = apply_kernel(v, sg_kernel(cfg.sg_window, cfg.sg_order, 2))
    residual = v - smoothed
    sigma_r = _rolling_robust_sigma(residual, cfg.sigma_floor)
    sigma_d1 = _rolling_robust_sigma(d1, cfg.sigma_floor)

    with np.errstate(invalid="ignore"):
        spike_cand = (np.abs(residual) > cfg.spike_z * sigma_r) & _sign_change_across(d1)
        break_cand = (np.abs(d1) > cfg.break_z * sigma_d1) & _sign_change_across(d2)

    precip = _ancillary(series, "precip")
    lookback_steps = max(1, int(round(cfg.precip_lookback * STEPS_PER_HOUR)))
    precip_total, precip_cnt = _precip_window_stats(precip, lookback_steps)

    jump = np.full(n, np.nan)
    jump[1:] = v[1:] - v[:-1]

    spike_hits: list[int] = []
    for start, stop in _candidate_events(spike_cand | break_cand, merge_gap=1):
        pre = v[start - 1] if start >= 1 else np.nan
        sigma_here = sigma_r[start]
        if not np.isfinite(sigma_here):
            sigma_here = cfg.sigma_floor

        returns = False
        if np.isfinite(pre):
            for u in (stop, stop + 1):
                if u < n and np.isfinite(v[u]) and abs(v[u] - pre) <= cfg.spike_z * sigma_here:
                    returns = True
                    break

        if returns:
            # the excursion core shares the sign of the run's largest residual;
            # opposite-sign candidates inside the run are its smoothing skirt
            seg = residual[start:stop]
            peak_r = seg[int(np.nanargmax(np.abs(seg)))]
            for t in range(start, stop):
                if np.isfinite(residual[t]) and np.sign(residual[t]) == np.sign(peak_r):
                    spike_hits.append(t)
            continue

        event_jumps = jump[start:stop]
        if np.all(np.isnan(event_jumps)):
            peak = start
        else:
            peak = start + int(np.nanargmax(np.abs(event_jumps)))
        upward = np.isfinite(jump[peak]) and jump[peak] > 0
        rained = precip_cnt[peak] > 0 and precip_total[peak] > 0.0
        if upward and rained:
            continue  # wetting front, not a data break
        mask[peak] |= _BITS[FlagCode.BRK]

    # Skirt suppression across runs: a spike call dwarfed by a nearby larger
    # residual within the SG half-window is that excursion's smoothing
    # artifact, not an anomaly of its own. The opposite-sign skirt reaches
    # ~25% of the core, the same-sign ring lobes ~10%, while genuine
    # neighboring spikes stay within a factor ~3 of each other.
    half = cfg.sg_window // 2
    for t in spike_hits:
        r_t = residual[t]
        lo, hi = max(0, t - half), min(n, t + half + 1)
        window = residual[lo:hi]
        with np.errstate(invalid="ignore"):
            opposite = (np.sign(window) == -np.sign(r_t)) & (np.abs(window) >= 2.5 * abs(r_t))
            same_ring = (np.sign(window) == np.sign(r_t)) & (np.abs(window) >= 5.0 * abs(r_t))
        if not (np.any(opposite) or np.any(same_ring)):
            mask[t] |= _BITS[FlagCode.SPK]

    return mask


_SET_CACHE: dict[int, frozenset[FlagCode]] = {}


def _mask_to_sets(mask: np.ndarray) -> list[frozenset[FlagCode]]:
    out = []
    for m in mask.tolist():
        cached = _SET_CACHE.get(m)
        if cached is None:
            cached = frozenset(code for code in FlagCode if m & _BITS[code])
            _SET_CACHE[m] = cached
        out.append(cached)
    return out


def _finalize(mask: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Apply the G/M conventions: missing -> exactly {M}, clean -> {G}."""
    mask = np.where(present, mask, _BITS[FlagCode.M])
    mask[present & (mask == 0)] = _BITS[FlagCode.G]
    return mask


def flag_thresholds(series: SensorSeries, cfg: RuleConfig) -> list[frozenset[FlagCode]]:
    """Pointwise threshold flags (C01-C03, D01, D02, D04) with G/M filled in."""
    if len(series) == 0:
        return []
    present = np.isfinite(series.values())
    return _mask_to_sets(_finalize(_threshold_mask(series, cfg), present))


def flag_spectral(series: SensorSeries, cfg: RuleConfig) -> list[frozenset[FlagCode]]:
    """Spectral flags (SPK, BRK, CST) only; missing readings get empty sets."""
    return _mask_to_sets(_spectral_mask(series, cfg))


def run_rules(series: SensorSeries, cfg: RuleConfig) -> list[frozenset[FlagCode]]:
    """Union of threshold and spectral flags per reading.

    G appears only when no other code triggered and the value is present;
    readings with absent values carry exactly {M}.
    """
    if len(series) == 0:
        return []
    present = np.isfinite(series.values())
    mask = _threshold_mask(series, cfg) | _spectral_mask(series, cfg)
    return _mask_to_sets(_finalize(mask, present))


def flags_to_binary(
    flags: Sequence[frozenset[FlagCode]],
) -> list[Optional[bool]]:
    """Collapse flag sets to the scoring convention.

    Any code other than G means anomaly; M (missing) is excluded from
    scoring and maps to None.
    """
    out: list[Optional[bool]] = []
    for fs in flags:
        if FlagCode.M in fs:
            out.append(None)
        else:
            out.append(bool(fs - {FlagCode.G}))
    return out
