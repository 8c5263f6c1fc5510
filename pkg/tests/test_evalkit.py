import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gated_cascade.cascade import build_model, cascade_predict, make_rng
from gated_cascade.evalkit import (
    CED_THRESHOLDS,
    NmeResult,
    RankDeficientError,
    ced_csv,
    cumulative_gate_curve,
    errors_csv,
    evaluate,
    fit_landmark_map,
    gate_cumulative,
    gate_stats_csv,
    interpupil_distance_68,
    landmark_pair_distance,
    make_normalizer,
    mean_shape_baseline,
    nme,
    trajectory_report,
)


def face68(rng):
    return rng.uniform(20, 130, size=(68, 2))


def residual(m, src, dst):
    return float(np.sum((m(src) - dst) ** 2))


class TestNme:
    def test_identical_is_zero(self, rng):
        s = face68(rng)
        assert nme(s, s) == 0.0

    def test_single_landmark_offset(self, rng):
        truth = face68(rng)
        pred = truth.copy()
        pred[10] += [3.0, 4.0]
        D = interpupil_distance_68(truth)
        assert abs(nme(pred, truth) - 100 * 5.0 / (68 * D)) < 1e-12

    def test_explicit_distance(self):
        truth = np.zeros((4, 2))
        pred = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
        assert nme(pred, truth, 10.0) == pytest.approx(100 * 3 / 4 / 10, abs=1e-14)

    def test_pupil_surrogate_uses_eye_centroids(self):
        s = np.zeros((68, 2))
        s[36:42] = [10.0, 50.0]
        s[42:48] = [40.0, 90.0]
        assert interpupil_distance_68(s) == 50.0

    def test_zero_distance_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            nme(np.ones((68, 2)), np.zeros((68, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nme(np.zeros((5, 2)), np.zeros((6, 2)), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-math.pi, math.pi), st.floats(0.2, 5.0),
        st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 2**31 - 1),
    )
    def test_similarity_invariance(self, angle, scale, tx, ty, seed):
        rng = np.random.default_rng(seed)
        truth = face68(rng)
        pred = truth + rng.normal(scale=3.0, size=truth.shape)
        R = scale * np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        t = np.array([tx, ty])
        before = nme(pred, truth)
        after = nme(pred @ R.T + t, truth @ R.T + t)
        assert abs(before - after) < 1e-8

    def test_normalizer_selection(self, rng):
        s = rng.normal(size=(5, 2))
        assert make_normalizer("auto", 5)(s) == landmark_pair_distance(0, 1)(s)
        assert make_normalizer("auto", 68) is interpupil_distance_68
        assert make_normalizer("pair:2,4", 5)(s) == np.linalg.norm(s[2] - s[4])
        with pytest.raises(ValueError):
            make_normalizer("iod", 5)


class TestNmeResult:
    def test_mean_and_ced(self):
        res = NmeResult(np.array([0.0, 1.0, 5.0, 20.0]), list("abcd"))
        assert res.mean == 6.5
        t, f = res.ced()
        assert len(t) == 100 and t[0] == 0 and t[-1] == 10
        assert f[0] == 0.25 and f[-1] == 0.75
        assert np.all(np.diff(f) >= 0)

    def test_evaluate(self, rng):
        truths = np.stack([face68(rng) for _ in range(3)])
        preds = truths + 1.0
        res = evaluate(preds, truths, interpupil_distance_68, ["x", "y", "z"])
        assert res.ids == ["x", "y", "z"]
        assert np.all(res.errors >= 0)
        assert res.mean == pytest.approx(np.mean([nme(p, t) for p, t in zip(preds, truths)]), abs=1e-14)

    def test_mean_shape_baseline(self, rng):
        train = rng.normal(size=(10, 5, 2)) * 10
        test = rng.normal(size=(4, 5, 2)) * 10
        norm = landmark_pair_distance(0, 1)
        ref = np.mean([nme(train.mean(axis=0), t, norm) for t in test])
        assert mean_shape_baseline(train, test, norm) == pytest.approx(ref, abs=1e-12)


class TestGateCurves:
    def test_single_sample(self):
        np.testing.assert_allclose(cumulative_gate_curve([[0.2, 0.5, 0.3]]), [0.5, 0.8, 1.0], atol=1e-15)

    def test_one_hot(self, rng):
        gates = np.eye(6)[rng.integers(6, size=10)]
        np.testing.assert_array_equal(cumulative_gate_curve(gates), np.ones(6))

    def test_two_sample_average(self):
        a, b = [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]
        ref = (np.array([0.6, 0.9, 1.0]) + np.array([0.5, 0.75, 1.0])) / 2
        np.testing.assert_allclose(cumulative_gate_curve([a, b]), ref, atol=1e-15)

    def test_properties_on_random_gates(self, rng):
        logits = rng.normal(size=(50, 16)) * 3
        g = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        c = cumulative_gate_curve(g)
        assert np.all(np.diff(c) >= 0)
        assert c[0] >= 1 / 16
        assert abs(c[-1] - 1) < 1e-4

    def test_model_stats_and_csv(self, tiny_config, rng):
        model = build_model(tiny_config, rng.uniform(8, 24, size=(5, 2)), make_rng(0, 0))
        stats = gate_cumulative(model, rng.uniform(-1, 1, size=(6, 32, 32)))
        assert stats.curves.shape == (2, 4)
        rows = list(csv.reader(io.StringIO(gate_stats_csv(stats))))
        assert rows[0] == ["stage", "rank", "cumprob"]
        assert len(rows) == 1 + 2 * 4
        assert rows[1][:2] == ["1", "1"] and rows[-1][:2] == ["2", "4"]

    def test_ungated_model_rejected(self, tiny_config, rng):
        model = build_model(tiny_config.replace(variant="re"), rng.uniform(8, 24, size=(5, 2)), make_rng(0, 0))
        with pytest.raises(ValueError, match="re"):
            gate_cumulative(model, np.zeros((1, 32, 32)))


class TestLandmarkMap:
    def test_planted_map(self, rng):
        A = rng.normal(size=(2 * 3, 2 * 5))
        c = rng.normal(size=6)
        src = rng.normal(size=(40, 5, 2))
        dst = (src.reshape(40, -1) @ A.T + c).reshape(40, 3, 2)
        m = fit_landmark_map(src, dst)
        assert residual(m, src, dst) < 1e-8
        np.testing.assert_allclose(m.A, A, atol=1e-8)
        np.testing.assert_allclose(m.c, c, atol=1e-8)
        assert m(src[0]).shape == (3, 2)

    def test_identity(self, rng):
        src = rng.normal(size=(30, 4, 2))
        m = fit_landmark_map(src, src)
        assert residual(m, src, src) < 1e-8

    def test_constant_target(self, rng):
        src = rng.normal(size=(30, 4, 2))
        const = rng.normal(size=(2, 2))
        m = fit_landmark_map(src, np.broadcast_to(const, (30, 2, 2)))
        assert np.max(np.abs(m.A)) < 1e-10
        np.testing.assert_allclose(m.c, const.ravel(), atol=1e-10)

    def test_underdetermined_needs_ridge(self, rng):
        src = rng.normal(size=(5, 4, 2))
        dst = rng.normal(size=(5, 2, 2))
        with pytest.raises(RankDeficientError, match="ridge"):
            fit_landmark_map(src, dst)
        m = fit_landmark_map(src, dst, ridge=1e-3)
        assert m.A.shape == (4, 8)

    def test_least_squares_optimality(self, rng):
        src = rng.normal(size=(40, 3, 2))
        dst = rng.normal(size=(40, 2, 2))
        m = fit_landmark_map(src, dst)
        # any perturbation of the solution does worse
        base = residual(m, src, dst)
        for _ in range(20):
            m2 = type(m)(m.A + rng.normal(scale=1e-3, size=m.A.shape), m.c + rng.normal(scale=1e-3, size=m.c.shape))
            assert residual(m2, src, dst) >= base
        # adding a pair the map fits exactly does not change the fit
        extra = rng.normal(size=(1, 3, 2))
        refit = fit_landmark_map(np.concatenate([src, extra]), np.concatenate([dst, m(extra)]))
        assert residual(refit, src, dst) <= base + 1e-9

    def test_save_load(self, rng, tmp_path):
        m = fit_landmark_map(rng.normal(size=(20, 3, 2)), rng.normal(size=(20, 2, 2)))
        m.save(tmp_path / "map.npz")
        back = type(m).load(tmp_path / "map.npz")
        np.testing.assert_array_equal(back.A, m.A)
        np.testing.assert_array_equal(back.c, m.c)

    def test_wrong_source_count(self, rng):
        m = fit_landmark_map(rng.normal(size=(20, 3, 2)), rng.normal(size=(20, 2, 2)))
        with pytest.raises(ValueError):
            m(np.zeros((4, 2)))


class TestTrajectory:
    def test_zero_parameter_model_is_constant(self, tiny_config, rng):
        model = build_model(tiny_config, rng.uniform(8, 24, size=(5, 2)), make_rng(0, 0))
        for p in model.parameters():
            p.data[:] = 0
        rep = trajectory_report(model, np.zeros((32, 32)))
        for s in rep.shapes:
            np.testing.assert_array_equal(s, model.mean_shape)

    @pytest.mark.parametrize("mode", ["full", "top1"])
    def test_winners_match_gate_argmax(self, tiny_config, rng, mode):
        model = build_model(tiny_config, rng.uniform(8, 24, size=(5, 2)), make_rng(0, 0))
        image = rng.uniform(-1, 1, size=(32, 32))
        rep = trajectory_report(model, image, mode)
        pred = cascade_predict(model, image, mode=mode)
        assert len(rep.shapes) == 3 and len(rep.winners) == 2
        assert rep.winners == [int(np.argmax(g)) for g in pred.gates]

    def test_ungated_has_no_winners(self, tiny_config, rng):
        model = build_model(tiny_config.replace(variant="sr"), rng.uniform(8, 24, size=(5, 2)), make_rng(0, 0))
        assert trajectory_report(model, np.zeros((32, 32))).winners == [None, None]


class TestCsv:
    def test_errors_and_ced(self):
        res = NmeResult(np.array([1.5, 2.5]), ["a", "b"])
        rows = list(csv.reader(io.StringIO(errors_csv(res))))
        assert rows == [["id", "error"], ["a", "1.5"], ["b", "2.5"]]
        rows = list(csv.reader(io.StringIO(ced_csv(res))))
        assert rows[0] == ["threshold", "fraction"] and len(rows) == 1 + len(CED_THRESHOLDS)
