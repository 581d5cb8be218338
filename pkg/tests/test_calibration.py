import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from studyroute.calibration import (
    CalibrationError,
    LogitRecord,
    compute_ece,
    ece_from_bins,
    fit_temperature,
    read_logits_csv,
    reliability_histogram,
    scaled_probabilities,
    write_logits_csv,
)


def calibrated_reference(n=4000, k=5, seed=5, scale=1.5):
    """Logits whose softmax is the true label distribution, so T=1 is calibrated by construction."""
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, scale, (n, k))
    p = scaled_probabilities(z, 1.0)
    cdf = p.cumsum(axis=1)
    y = (rng.random((n, 1)) > cdf).sum(axis=1)
    return z, np.minimum(y, k - 1)


def records(z, y):
    return [LogitRecord(str(i), tuple(row), int(t)) for i, (row, t) in enumerate(zip(z, y))]


def grid_oracle(recs, low=0.05, high=20.0, n=3000):
    grid = np.geomspace(low, high, n)
    eces = np.array([compute_ece(recs, float(t)) for t in grid])
    return grid, eces


def test_scaled_probabilities_examples():
    np.testing.assert_allclose(scaled_probabilities([0, 0, 0], 0.3), [1 / 3] * 3)
    e2 = math.exp(2)
    np.testing.assert_allclose(scaled_probabilities([2, 0], 1.0), [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-15)
    assert scaled_probabilities([2, 0], 1.0)[0] == pytest.approx(0.8808, abs=5e-5)


def test_scaled_probabilities_rejects_non_positive_t():
    with pytest.raises(CalibrationError):
        scaled_probabilities([1, 2], 0.0)


@given(
    hnp.arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)),
    st.floats(1e-3, 1e3),
)
def test_argmax_invariant_under_temperature(z, T):
    p = scaled_probabilities(z, T)
    assert p.sum() == pytest.approx(1.0)
    # softmax is monotone: probability order never contradicts logit order
    order = np.argsort(z, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def _fixed_confidence_records(conf, correct_flags):
    # two classes: logit gap g gives confidence sigmoid(g)
    g = math.log(conf / (1 - conf))
    return [LogitRecord(str(i), (g, 0.0), 0 if ok else 1) for i, ok in enumerate(correct_flags)]


def test_ece_hand_value():
    recs = _fixed_confidence_records(0.8, [True, True, False, False])
    assert compute_ece(recs, 1.0, 1) == pytest.approx(0.3, abs=1e-12)
    assert compute_ece(recs, 1.0, 10) == pytest.approx(0.3, abs=1e-12)


def test_ece_perfect_confidence_is_zero():
    recs = [LogitRecord(str(i), (800.0, 0.0, 0.0), 0) for i in range(5)]
    assert compute_ece(recs) == 0.0


def test_ece_unchanged_by_duplication():
    z, y = calibrated_reference(300, seed=1)
    recs = records(z, y)
    assert compute_ece(recs + recs, 1.3) == pytest.approx(compute_ece(recs, 1.3), abs=1e-12)


def test_histogram_examples():
    z, y = calibrated_reference(200, seed=2)
    recs = records(z, y)
    (only,) = reliability_histogram(recs, 1.0, 1)
    assert only.mean_confidence == pytest.approx(scaled_probabilities(z, 1.0).max(axis=1).mean())
    high = _fixed_confidence_records(0.95, [True, False, True])
    assert [b.count for b in reliability_histogram(high, 1.0, 10)] == [0] * 9 + [3]


def test_histogram_bins_are_right_closed():
    # confidence exactly 0.5 belongs to bin 5 of 10, not bin 6
    recs = [LogitRecord("a", (0.0, 0.0), 0)]
    assert [b.count for b in reliability_histogram(recs, 1.0, 10)][4] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10), st.integers(1, 20))
def test_ece_properties(seed, T, M):
    z, y = calibrated_reference(60, k=4, seed=seed, scale=2.0)
    recs = records(z, y)
    e = compute_ece(recs, T, M)
    assert 0.0 <= e <= 1.0
    assert ece_from_bins(reliability_histogram(recs, T, M)) == e


def test_fit_on_calibrated_set_stays_near_one():
    recs = records(*calibrated_reference())
    model = fit_temperature(recs)
    assert 0.85 < model.temperature < 1.15
    assert compute_ece(recs, model.temperature) <= compute_ece(recs, 1.0) + 1e-12
    assert compute_ece(recs, 1.0) - compute_ece(recs, model.temperature) < 0.01


def test_fit_on_overconfident_set():
    z, y = calibrated_reference()
    recs = records(3.0 * z, y)
    model = fit_temperature(recs)
    before, after = compute_ece(recs, 1.0), compute_ece(recs, model.temperature)
    assert model.temperature > 1.0
    assert after <= 0.5 * before
    # independent oracle: a dense exhaustive grid cannot do materially better
    grid, eces = grid_oracle(recs)
    assert after <= eces.min() + 1e-3
    assert grid[np.argmin(eces)] == pytest.approx(model.temperature, rel=0.1)
    preds = np.argmax(scaled_probabilities(3.0 * z, model.temperature), axis=1)
    assert np.array_equal(preds, np.argmax(3.0 * z, axis=1))


def test_fit_single_correct_record_drives_confidence_up():
    recs = [LogitRecord("x", (1.0, 0.0, -0.5), 0)]
    model = fit_temperature(recs)
    assert model.temperature < 0.1
    assert compute_ece(recs, model.temperature) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.3, 4.0))
def test_fit_never_worse_than_identity(seed, scale):
    z, y = calibrated_reference(80, k=3, seed=seed)
    recs = records(scale * z, y)
    model = fit_temperature(recs)
    assert compute_ece(recs, model.temperature) <= compute_ece(recs, 1.0) + 1e-12


def test_fit_rejects_bad_search_interval():
    with pytest.raises(CalibrationError):
        fit_temperature([LogitRecord("x", (1.0, 0.0), 0)], search=(2.0, 1.0))


def test_logit_record_validation():
    with pytest.raises(CalibrationError):
        LogitRecord("x", (1.0, float("nan")), 0)
    with pytest.raises(CalibrationError):
        LogitRecord("x", (1.0, 0.0), 2)


def test_csv_round_trip(tmp_path):
    recs = records(*calibrated_reference(20, seed=3))
    p = tmp_path / "logits.csv"
    write_logits_csv(p, recs)
    assert read_logits_csv(p) == recs


def test_csv_errors_are_row_numbered(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("sample_id,true_class,z_0,z_1\na,0,1.0,2.0\nb,0,1.0,oops\n")
    with pytest.raises(CalibrationError, match="bad.csv:3"):
        read_logits_csv(p)
    p.write_text("")
    with pytest.raises(CalibrationError, match="empty"):
        read_logits_csv(p)
    p.write_text("sample_id,true_class,z_0,z_1\n")
    with pytest.raises(CalibrationError, match="no logit rows"):
        read_logits_csv(p)
