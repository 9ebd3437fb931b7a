"""Day-window anomaly classifier: feature pipeline, architecture, serialization.

A series is cut into length-96 calendar-day windows (one day at 15-minute
cadence). Per-timestep features are [value / 0.6, missing indicator]; a
static context vector [depth_cm / 100, sin(2*pi*doy/366), cos(2*pi*doy/366)]
captures sensor depth and season. Two linear embeddings map both into a
shared feature space (summed per step), a bidirectional LSTM reads the day,
and a linear head with a sigmoid yields one anomaly probability per reading.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional, Sequence

import numpy as np

from soilqc.errors import DataError
from soilqc.nn import (
    LstmCellParams,
    Tensor,
    add,
    affine,
    bilstm_forward,
    check_finite,
    concat,
    init_lstm_cell,
    no_grad,
    sigmoid,
    uniform_init,
)
from soilqc.series import STEP, STEPS_PER_DAY, SensorSeries

FORMAT_VERSION = "soilqc-model-v1"
VALUE_SCALE = 0.6        # geophysical ceiling used for normalization
STEP_FEATURES = 2        # [normalized value, missing indicator]
CONTEXT_FEATURES = 3     # [depth/100, sin(doy), cos(doy)]
DEFAULT_EMBED_DIM = 32
DEFAULT_HIDDEN_DIM = 64


@dataclass
class WindowSample:
    """One calendar day of readings, ready for the classifier.

    values holds raw m3/m3 with missing encoded as 0.0 alongside the
    missing_mask bit. labels (when present) align index-for-index with
    values; weight scales this sample's loss contribution.
    """

    values: np.ndarray
    missing_mask: np.ndarray
    depth_cm: float
    day_of_year: int
    labels: Optional[np.ndarray] = None
    weight: float = 1.0
    day_start: Optional[datetime] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.shape != (STEPS_PER_DAY,) or self.missing_mask.shape != (STEPS_PER_DAY,):
            raise DataError(f"window must have exactly {STEPS_PER_DAY} timesteps")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (STEPS_PER_DAY,):
                raise DataError("labels must align with values")
        if not (1 <= self.day_of_year <= 366):
            raise DataError(f"day_of_year out of range: {self.day_of_year}")
        if self.weight <= 0:
            raise DataError("weight must be positive")

    def step_features(self) -> np.ndarray:
        """(96, 2) per-timestep network input."""
        return np.column_stack(
            [self.values / VALUE_SCALE, self.missing_mask.astype(np.float64)]
        )

    def context_features(self) -> np.ndarray:
        angle = 2.0 * math.pi * self.day_of_year / 366.0
        return np.array([self.depth_cm / 100.0, math.sin(angle), math.cos(angle)])

    def has_anomaly(self) -> bool:
        return self.labels is not None and bool(self.labels.any())


@dataclass
class LinearParams:
    W: Tensor  # (out, in)
    b: Tensor  # (out,)


@dataclass
class ModelParams:
    """All weights of the day-window classifier plus architecture metadata."""

    embed_value: LinearParams
    embed_context: LinearParams
    lstm_fwd: LstmCellParams
    lstm_bwd: LstmCellParams
    head: LinearParams
    version: str = FORMAT_VERSION
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        embed = self.embed_value.W.data.shape[0]
        hidden = self.lstm_fwd.hidden_dim
        ok = (
            self.embed_value.W.data.shape == (embed, STEP_FEATURES)
            and self.embed_context.W.data.shape == (embed, CONTEXT_FEATURES)
            and self.lstm_fwd.input_dim == embed
            and self.lstm_bwd.input_dim == embed
            and self.lstm_bwd.hidden_dim == hidden
            and self.head.W.data.shape == (1, 2 * hidden)
        )
        if not ok:
            raise DataError("inconsistent model dimension chain")

    @property
    def embed_dim(self) -> int:
        return self.embed_value.W.data.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.lstm_fwd.hidden_dim

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("embed_value.W", self.embed_value.W),
            ("embed_value.b", self.embed_value.b),
            ("embed_context.W", self.embed_context.W),
            ("embed_context.b", self.embed_context.b),
        ]
        out += [(f"lstm_fwd.{n}", t) for n, t in self.lstm_fwd.named_tensors()]
        out += [(f"lstm_bwd.{n}", t) for n, t in self.lstm_bwd.named_tensors()]
        out += [("head.W", self.head.W), ("head.b", self.head.b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data = snap[name].copy()


def init_model(
    seed: int,
    embed_dim: int = DEFAULT_EMBED_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> ModelParams:
    """Fresh model with uniform +/- 1/sqrt(fan_in) weights from a seeded generator."""
    rng = np.random.default_rng(seed)

    def linear(out_dim: int, in_dim: int) -> LinearParams:
        return LinearParams(
            W=uniform_init(rng, (out_dim, in_dim), in_dim),
            b=uniform_init(rng, (out_dim,), in_dim),
        )

    return ModelParams(
        embed_value=linear(embed_dim, STEP_FEATURES),
        embed_context=linear(embed_dim, CONTEXT_FEATURES),
        lstm_fwd=init_lstm_cell(rng, embed_dim, hidden_dim),
        lstm_bwd=init_lstm_cell(rng, embed_dim, hidden_dim),
        head=linear(1, 2 * hidden_dim),
        metadata={"seed": seed},
    )


def featurize(series: SensorSeries) -> list[WindowSample]:
    """Cut a gap-materialized series into day windows.

    Partial edge days are padded with missing timesteps; days with no
    present value at all are dropped. labels are attached when at least one
    reading in the day carries a manual flag (unflagged readings are
    treated as good).
    """
    buckets: dict[datetime, list] = {}
    for idx, reading in enumerate(series.readings):
        ts = reading.timestamp
        day_start = ts.replace(hour=0, minute=0)
        buckets.setdefault(day_start, []).append(reading)

    samples = []
    for day_start in sorted(buckets):
        values = np.zeros(STEPS_PER_DAY)
        mask = np.ones(STEPS_PER_DAY, dtype=bool)
        labels = np.zeros(STEPS_PER_DAY, dtype=bool)
        labeled = False
        for reading in buckets[day_start]:
            slot = int((reading.timestamp - day_start) / STEP)
            if reading.value is not None:
                values[slot] = reading.value
                mask[slot] = False
            if reading.manual_flag is not None:
                labeled = True
                labels[slot] = reading.manual_flag
        if mask.all():
            continue
        samples.append(
            WindowSample(
                values=values,
                missing_mask=mask,
                depth_cm=series.depth_cm,
                day_of_year=day_start.timetuple().tm_yday,
                labels=labels if labeled else None,
                day_start=day_start,
            )
        )
    return samples


def forward_batch(params: ModelParams, samples: Sequence[WindowSample]) -> Tensor:
    """Anomaly probabilities for a batch, as a (96 * batch, 1) tensor.

    Rows are timestep-major: row t * batch + b holds step t of sample b.
    Recorded on the tape, so a loss built from the result can backprop.
    """
    batch = len(samples)
    if batch == 0:
        raise DataError("empty batch")
    feats = np.stack([s.step_features() for s in samples])        # (B, 96, 2)
    ctx = np.stack([s.context_features() for s in samples])       # (B, 3)

    ctx_emb = affine(Tensor(ctx), params.embed_context.W, params.embed_context.b)
    xs = []
    for t in range(STEPS_PER_DAY):
        v_emb = affine(Tensor(feats[:, t, :]), params.embed_value.W, params.embed_value.b)
        xs.append(add(v_emb, ctx_emb))

    hs = bilstm_forward(params.lstm_fwd, params.lstm_bwd, xs)
    stacked = concat(hs, axis=0)                                   # (96*B, 2H)
    probs = sigmoid(affine(stacked, params.head.W, params.head.b))
    return check_finite(probs, "model output")


def _probs_to_grid(probs: Tensor, batch: int) -> np.ndarray:
    """(96*B, 1) timestep-major tensor data -> (B, 96) array."""
    return probs.data.reshape(STEPS_PER_DAY, batch).T.copy()


def forward(params: ModelParams, sample: WindowSample) -> np.ndarray:
    """Per-timestep anomaly probabilities for one day window."""
    with no_grad():
        probs = forward_batch(params, [sample])
    return _probs_to_grid(probs, 1)[0]


def infer_batch(params: ModelParams, samples: Sequence[WindowSample]) -> np.ndarray:
    """(B, 96) probabilities without tape recording."""
    with no_grad():
        probs = forward_batch(params, samples)
    return _probs_to_grid(probs, len(samples))


def classify(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean anomaly calls; a probability equal to the threshold is an anomaly."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    return np.asarray(probabilities) >= threshold


def predict_series(
    params: ModelParams,
    series: SensorSeries,
    threshold: float = 0.5,
    batch_size: int = 256,
) -> tuple[list[Optional[float]], list[Optional[bool]]]:
    """Probability and binary call per reading; None where the value is missing."""
    samples = featurize(series)
    probs: list[Optional[float]] = [None] * len(series.readings)
    preds: list[Optional[bool]] = [None] * len(series.readings)
    if not samples:
        return probs, preds

    t0 = series.readings[0].timestamp
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        grid = infer_batch(params, chunk)
        for sample, row in zip(chunk, grid):
            base = int((sample.day_start - t0) / STEP)
            for slot in range(STEPS_PER_DAY):
                idx = base + slot
                if 0 <= idx < len(probs) and not sample.missing_mask[slot]:
                    p = float(row[slot])
                    probs[idx] = p
                    preds[idx] = bool(p >= threshold)
    return probs, preds


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def save_model(params: ModelParams, path: str | os.PathLike) -> None:
    """Serialize to the self-describing JSON format, atomically."""
    doc = {
        "format_version": params.version,
        "dims": {
            "embed_dim": params.embed_dim,
            "hidden_dim": params.hidden_dim,
            "step_features": STEP_FEATURES,
            "context_features": CONTEXT_FEATURES,
        },
        "metadata": params.metadata,
        "weights": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in params.named_parameters()
        },
    }
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=0)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_model(path: str | os.PathLike) -> ModelParams:
    """Load a serialized model, rejecting unknown versions and bad shapes."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc

    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {version!r}")
    try:
        dims = doc["dims"]
        weights = doc["weights"]
        embed_dim = int(dims["embed_dim"])
        hidden_dim = int(dims["hidden_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"model file {path} missing required fields: {exc}") from exc

    fresh = init_model(seed=0, embed_dim=embed_dim, hidden_dim=hidden_dim)

    def take(name: str, expect_shape: tuple[int, ...]) -> Tensor:
        try:
            entry = weights[name]
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"model file {path}: bad weight entry {name!r}: {exc}") from exc
        if tuple(arr.shape) != expect_shape:
            raise DataError(
                f"model file {path}: weight {name} has shape {arr.shape}, expected {expect_shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError(f"model file {path}: non-finite weight {name}")
        return Tensor(arr, requires_grad=True)

    for name, t in fresh.named_parameters():
        t.data = take(name, t.data.shape).data
    fresh.metadata = dict(doc.get("metadata", {}))
    fresh.version = version
    return fresh
