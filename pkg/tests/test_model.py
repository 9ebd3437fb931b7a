"""Day-window featurization, the assembled classifier, and serialization."""

import datetime as dt
import math

import numpy as np
import pytest

from soilqc.errors import DataError
from soilqc import nn
from soilqc.model import (
    CONTEXT_FEATURES,
    STEP_FEATURES,
    VALUE_SCALE,
    ModelParams,
    WindowSample,
    classify,
    featurize,
    forward,
    forward_batch,
    infer_batch,
    init_model,
    load_model,
    predict_series,
    save_model,
)
from soilqc.series import Reading, SensorSeries, parse_timestamp


def day_series(n_days=3, start="2021-06-01T00:00:00Z", gaps=(), flags=None):
    t0 = parse_timestamp(start)
    readings = []
    for i in range(n_days * 96):
        if i in gaps:
            readings.append(Reading(timestamp=t0 + dt.timedelta(minutes=15 * i)))
        else:
            readings.append(
                Reading(
                    timestamp=t0 + dt.timedelta(minutes=15 * i),
                    value=0.25 + 0.01 * math.sin(i / 7.0),
                    manual_flag=None if flags is None else bool(flags and i in flags),
                )
            )
    return SensorSeries(site_id="s", depth_cm=30.0, readings=tuple(readings))


class TestFeaturize:
    def test_three_full_days_three_windows(self):
        samples = featurize(day_series(3))
        assert len(samples) == 3
        for s in samples:
            assert s.values.shape == (96,)
            assert not s.missing_mask.any()

    def test_all_missing_day_excluded(self):
        series = day_series(3, gaps=set(range(96, 192)))
        samples = featurize(series)
        assert len(samples) == 2

    def test_partial_edge_day_padded(self):
        t0 = parse_timestamp("2021-06-01T12:00:00Z")  # starts mid-day
        readings = tuple(
            Reading(timestamp=t0 + dt.timedelta(minutes=15 * i), value=0.3) for i in range(48)
        )
        series = SensorSeries(site_id="s", depth_cm=5.0, readings=readings)
        samples = featurize(series)
        assert len(samples) == 1
        assert samples[0].missing_mask.sum() == 48
        assert samples[0].missing_mask[:48].all()

    def test_doy_continuity_across_year_boundary(self):
        a = WindowSample(np.zeros(96), np.zeros(96, bool) | True, 30.0, 366)
        b = WindowSample(np.zeros(96), np.zeros(96, bool) | True, 30.0, 1)
        ca, cb = a.context_features(), b.context_features()
        assert abs(ca[1] - cb[1]) < 0.02 and abs(ca[2] - cb[2]) < 0.02

    def test_labels_attached_only_when_flagged(self):
        unlabeled = featurize(day_series(1))
        assert unlabeled[0].labels is None
        labeled = featurize(day_series(1, flags={10, 11}))
        assert labeled[0].labels is not None
        assert set(np.flatnonzero(labeled[0].labels)) == {10, 11}

    def test_value_normalization_and_missing_encoding(self):
        series = day_series(1, gaps={5})
        s = featurize(series)[0]
        feats = s.step_features()
        assert feats[5, 0] == 0.0 and feats[5, 1] == 1.0
        assert feats[0, 0] == pytest.approx(s.values[0] / VALUE_SCALE)
        assert feats[0, 1] == 0.0


class TestForward:
    def test_zeroed_head_gives_half_everywhere(self):
        params = init_model(seed=0, embed_dim=4, hidden_dim=3)
        params.head.W.data[:] = 0.0
        params.head.b.data[:] = 0.0
        sample = featurize(day_series(1))[0]
        probs = forward(params, sample)
        np.testing.assert_array_equal(probs, np.full(96, 0.5))

    def test_deterministic(self):
        params = init_model(seed=3, embed_dim=4, hidden_dim=3)
        sample = featurize(day_series(1))[0]
        a = forward(params, sample)
        b = forward(params, sample)
        assert (a == b).all()  # bitwise

    def test_outputs_in_open_unit_interval(self):
        params = init_model(seed=5, embed_dim=8, hidden_dim=6)
        for sample in featurize(day_series(2)):
            probs = forward(params, sample)
            assert ((probs > 0.0) & (probs < 1.0)).all()

    def test_matches_manual_composition_on_tiny_config(self):
        params = init_model(seed=9, embed_dim=2, hidden_dim=2)
        sample = featurize(day_series(1))[0]
        got = forward(params, sample)

        feats = sample.step_features()
        ctx = sample.context_features()
        ctx_emb = nn.affine(nn.Tensor(ctx), params.embed_context.W, params.embed_context.b)
        xs = [
            nn.add(
                nn.affine(nn.Tensor(feats[t]), params.embed_value.W, params.embed_value.b),
                ctx_emb,
            )
            for t in range(96)
        ]
        hs = nn.bilstm_forward(params.lstm_fwd, params.lstm_bwd, xs)
        expected = np.array(
            [nn.sigmoid(nn.affine(h, params.head.W, params.head.b)).data[0] for h in hs]
        )
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_labels_do_not_affect_forward(self):
        params = init_model(seed=1, embed_dim=4, hidden_dim=3)
        sample = featurize(day_series(1))[0]
        base = forward(params, sample)
        sample.labels = np.ones(96, dtype=bool)
        sample.weight = 9.0
        np.testing.assert_array_equal(forward(params, sample), base)

    def test_batch_matches_single(self):
        params = init_model(seed=2, embed_dim=4, hidden_dim=3)
        samples = featurize(day_series(3))
        grid = infer_batch(params, samples)
        for i, s in enumerate(samples):
            np.testing.assert_allclose(grid[i], forward(params, s), atol=1e-13)

    def test_empty_batch_rejected(self):
        params = init_model(seed=2, embed_dim=4, hidden_dim=3)
        with pytest.raises(DataError):
            forward_batch(params, [])


class TestClassify:
    def test_boundary_probability_is_anomaly(self):
        assert classify(np.array([0.5]), threshold=0.5)[0]

    def test_all_below_threshold_all_good(self):
        assert not classify(np.array([0.1, 0.49, 0.3]), threshold=0.5).any()

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(size=200)
        low = classify(probs, threshold=0.5)
        high = classify(probs, threshold=0.9)
        assert not (high & ~low).any()

    def test_threshold_validated(self):
        with pytest.raises(DataError):
            classify(np.array([0.5]), threshold=1.0)


class TestPredictSeries:
    def test_missing_readings_get_none(self):
        params = init_model(seed=4, embed_dim=4, hidden_dim=3)
        series = day_series(2, gaps={7, 8})
        probs, preds = predict_series(params, series)
        assert probs[7] is None and preds[7] is None
        assert probs[0] is not None and isinstance(preds[0], bool)
        assert len(probs) == len(series.readings)

    def test_probabilities_match_forward(self):
        params = init_model(seed=4, embed_dim=4, hidden_dim=3)
        series = day_series(1)
        probs, _ = predict_series(params, series)
        direct = forward(params, featurize(series)[0])
        np.testing.assert_allclose(np.array(probs, dtype=float), direct, atol=1e-13)


class TestSerialization:
    def test_roundtrip_identical_weights(self, tmp_path):
        params = init_model(seed=17, embed_dim=4, hidden_dim=3)
        params.metadata["epochs"] = 12
        path = tmp_path / "model.json"
        save_model(params, path)
        back = load_model(path)
        for (name_a, t_a), (name_b, t_b) in zip(
            params.named_parameters(), back.named_parameters()
        ):
            assert name_a == name_b
            np.testing.assert_array_equal(t_a.data, t_b.data)
        assert back.metadata["epochs"] == 12
        assert back.embed_dim == 4 and back.hidden_dim == 3

    def test_save_deterministic_bytes(self, tmp_path):
        params = init_model(seed=17, embed_dim=4, hidden_dim=3)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(params, p1)
        save_model(params, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_version_rejected(self, tmp_path):
        params = init_model(seed=17, embed_dim=4, hidden_dim=3)
        path = tmp_path / "model.json"
        save_model(params, path)
        doc = path.read_text().replace("soilqc-model-v1", "soilqc-model-v9")
        path.write_text(doc)
        with pytest.raises(DataError, match="version"):
            load_model(path)

    def test_corrupted_file_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_model(path)

    def test_wrong_shape_rejected(self, tmp_path):
        params = init_model(seed=17, embed_dim=4, hidden_dim=3)
        path = tmp_path / "model.json"
        save_model(params, path)
        import json

        doc = json.loads(path.read_text())
        doc["weights"]["head.W"]["data"] = doc["weights"]["head.W"]["data"][:-1]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError):
            load_model(path)

    def test_dimension_chain_validated(self):
        from soilqc.model import LinearParams

        params = init_model(seed=0, embed_dim=4, hidden_dim=3)
        bad_head = LinearParams(
            W=nn.Tensor(np.zeros((1, 5)), requires_grad=True),  # 2*hidden is 6
            b=nn.Tensor(np.zeros(1), requires_grad=True),
        )
        with pytest.raises(DataError):
            ModelParams(
                embed_value=params.embed_value,
                embed_context=params.embed_context,
                lstm_fwd=params.lstm_fwd,
                lstm_bwd=params.lstm_bwd,
                head=bad_head,
            )
