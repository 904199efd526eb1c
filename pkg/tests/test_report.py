import json
import math
from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stepsaver.metrics import write_feature_file
from stepsaver.report import (
    LinearTimeModel,
    TimingSample,
    fid_eval,
    fit_time_model,
    parse_policy,
    read_step_table,
    render_report,
    savings_report,
    seconds_to_hours,
)

from oracles import frechet_diagonal, ols

STEP_TIMES = {30: 2.25, 50: 3.72, 100: 7.36}
LABEL_COUNTS = {30: 2337, 50: 420}


# time model ----------------------------------------------------------------------

def test_fit_reference_times():
    model = fit_time_model([TimingSample(s, t) for s, t in STEP_TIMES.items()])
    intercept, slope, rmse = ols(list(STEP_TIMES), list(STEP_TIMES.values()))
    assert model.seconds_per_step == pytest.approx(slope, rel=1e-12)
    assert model.intercept_seconds == pytest.approx(intercept, rel=1e-9)
    assert model.residual_rmse == pytest.approx(rmse, rel=1e-6)
    assert model.seconds_per_step == pytest.approx(0.0730, abs=1e-4)
    assert model.residual_rmse < 0.01


def test_fit_noiseless():
    model = fit_time_model([TimingSample(s, 0.07 * s) for s in range(10, 101, 10)])
    assert model.seconds_per_step == pytest.approx(0.07, abs=1e-12)
    assert model.intercept_seconds == pytest.approx(0.0, abs=1e-12)
    assert model.residual_rmse == pytest.approx(0.0, abs=1e-12)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_time_model([TimingSample(10, 1.0)])
    with pytest.raises(ValueError, match="singular"):
        fit_time_model([TimingSample(10, 1.0), TimingSample(10, 2.0)])
    with pytest.raises(ValueError):
        TimingSample(0, 1.0)
    with pytest.raises(ValueError):
        TimingSample(10, float("nan"))


@settings(max_examples=50, deadline=None)
@given(s1=st.integers(1, 200), ds=st.integers(1, 200), t1=st.floats(0.01, 20), dt=st.floats(0.01, 20))
def test_two_points_fit_exactly(s1, ds, t1, dt):
    model = fit_time_model([TimingSample(s1, t1), TimingSample(s1 + ds, t1 + dt)])
    assert model.residual_rmse < 1e-9 * max(1.0, t1 + dt)
    assert model(s1) == pytest.approx(t1, abs=1e-9)


# savings ----------------------------------------------------------------------------

def test_reference_savings_arithmetic():
    rep = savings_report(LABEL_COUNTS, STEP_TIMES)
    assert rep.row("flexi").total_seconds == Decimal("6820.65")
    assert rep.row("fixed-50").total_seconds == Decimal("10256.04")
    assert rep.row("fixed-100").total_seconds == Decimal("20291.52")
    assert [rep.row(p).total_hours for p in ("flexi", "fixed-50", "fixed-100")] == [
        Decimal("1.89"), Decimal("2.85"), Decimal("5.64")]
    assert rep.corpus_size == 2757
    assert rep.row("fixed-100").counts == {100: 2757}


def test_render_and_json():
    rep = savings_report(LABEL_COUNTS, STEP_TIMES)
    text = render_report(rep)
    assert "6,820.65" in text and "1.89" in text and "10,256.04" in text and "20,291.52" in text
    doc = json.loads(rep.to_json())
    flexi = next(p for p in doc["policies"] if p["policy"] == "flexi")
    assert flexi["total_seconds"] == "6820.65" and flexi["total_hours"] == "1.89"
    assert flexi["vs_baseline_percent"] == "-33.5"


def test_missing_time_entry_names_step():
    with pytest.raises(ValueError, match="100 steps"):
        savings_report(LABEL_COUNTS, {30: 2.25, 50: 3.72})


def test_linear_fallback_for_missing_step():
    fb = LinearTimeModel(0.0, 0.07, 0.0)
    rep = savings_report({20: 10}, {50: 3.5}, ["flexi", "fixed-50"], fallback=fb)
    assert float(rep.row("flexi").total_seconds) == pytest.approx(14.0, abs=1e-12)


def test_unknown_baseline_and_policy():
    with pytest.raises(ValueError, match="baseline"):
        savings_report(LABEL_COUNTS, STEP_TIMES, ["flexi"], baseline="fixed-50")
    with pytest.raises(ValueError):
        parse_policy("fixed-abc")


counts_st = st.dictionaries(st.sampled_from([20, 30, 50]), st.integers(0, 10_000), min_size=1)


@settings(max_examples=50, deadline=None)
@given(counts=counts_st, k=st.integers(1, 7))
def test_savings_permutation_and_linearity(counts, k):
    times = {20: 1.5, 30: 2.25, 50: 3.72, 100: 7.36}
    base = savings_report(counts, times)
    rev = savings_report(dict(reversed(list(counts.items()))), times)
    scaled = savings_report({s: n * k for s, n in counts.items()}, times)
    for a, b, c in zip(base.rows, rev.rows, scaled.rows):
        assert a.total_seconds == b.total_seconds
        assert c.total_seconds == k * a.total_seconds
        assert sum(a.counts.values()) == base.corpus_size


@settings(max_examples=100, deadline=None)
@given(sec=st.decimals(0, 10 ** 7, places=2))
def test_hours_rounding(sec):
    # half-up rounding to cents of an hour, in exact rational arithmetic
    cents = math.floor(Fraction(sec) * 100 / 3600 + Fraction(1, 2))
    assert seconds_to_hours(sec) == Decimal(cents) / 100


def test_hours_rounding_half_boundary():
    assert seconds_to_hours(Decimal("18")) == Decimal("0.01")


def test_read_step_table(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("# header\n30\t2.25\n\n50\t3.72\n")
    assert read_step_table(path, str) == {30: "2.25", 50: "3.72"}
    path.write_text("30 2.25\n")
    with pytest.raises(ValueError, match=":1:"):
        read_step_table(path, float)


# FID ------------------------------------------------------------------------------

def test_fid_identity(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "f.txt"
    write_feature_file(path, rng.standard_normal((50, 4)))
    res = fid_eval(path, path)
    assert res.value == pytest.approx(0.0, abs=1e-6)
    assert (res.dim, res.generated_count, res.reference_count) == (4, 50, 50)


def test_fid_gaussian_closed_form(tmp_path):
    rng = np.random.default_rng(2024)
    m1, v1 = np.array([0.0, 1.0, -1.0, 2.0]), np.array([1.0, 2.0, 0.5, 1.5])
    m2, v2 = np.array([1.0, 0.0, -1.5, 2.5]), np.array([2.0, 1.0, 1.5, 0.5])
    write_feature_file(tmp_path / "gen.txt", rng.normal(m1, np.sqrt(v1), (1000, 4)))
    write_feature_file(tmp_path / "ref.txt", rng.normal(m2, np.sqrt(v2), (1000, 4)))
    expected = frechet_diagonal(m1, v1, m2, v2)
    got = fid_eval(tmp_path / "gen.txt", tmp_path / "ref.txt").value
    assert abs(got - expected) / expected < 0.05


def test_fid_image_directories(tmp_path):
    rng = np.random.default_rng(4)
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        for i in range(6):
            arr = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(tmp_path / name / f"{i}.png")
    same = fid_eval(tmp_path / "a", tmp_path / "a")
    assert same.dim == 64 and same.value == pytest.approx(0.0, abs=1e-9)
    assert fid_eval(tmp_path / "a", tmp_path / "b").value > 0


def test_fid_dimension_mismatch(tmp_path):
    write_feature_file(tmp_path / "a.txt", np.ones((3, 2)) + np.arange(3)[:, None])
    write_feature_file(tmp_path / "b.txt", np.ones((3, 3)) + np.arange(3)[:, None])
    with pytest.raises(ValueError, match="dimension mismatch"):
        fid_eval(tmp_path / "a.txt", tmp_path / "b.txt")


def test_fid_too_few_vectors(tmp_path):
    write_feature_file(tmp_path / "a.txt", [[1.0, 2.0]])
    with pytest.raises(ValueError, match="at least 2"):
        fid_eval(tmp_path / "a.txt", tmp_path / "a.txt")
