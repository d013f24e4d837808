import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyalign.geometry import AnnotationSet, DomainError, Polygon
from polyalign.metrics import (
    RoundCurve,
    accuracy_cdf,
    default_thresholds,
    distances_array,
    emit_report,
    quantiles,
    read_cdf_csv,
    summarize,
    vertex_distances,
)


def tri(offset=(0.0, 0.0)):
    return AnnotationSet((Polygon(np.array([[1, 1], [5, 1], [3, 4]]) + offset),), "t", (8, 8))


def test_identical_sets_zero_distance():
    d = distances_array(vertex_distances(tri(), tri()))
    assert d.tolist() == [0.0, 0.0, 0.0]


def test_uniform_shift_step_cdf():
    d = vertex_distances(tri((3.0, 4.0)), tri())
    assert distances_array(d).tolist() == [5.0, 5.0, 5.0]
    cdf = dict(accuracy_cdf(d, [1.0, 4.999, 5.0, 5.001, 10.0]))
    assert cdf == {1.0: 0.0, 4.999: 0.0, 5.0: 0.0, 5.001: 1.0, 10.0: 1.0}


def test_records_carry_indices():
    a = AnnotationSet((Polygon([[0, 0], [1, 0], [0, 1]]), Polygon([[4, 4], [6, 4], [6, 6], [4, 6]])), "x", (8, 8))
    recs = vertex_distances(a, a)
    assert [(r.polygon, r.vertex) for r in recs][-4:] == [(1, 0), (1, 1), (1, 2), (1, 3)]


def test_structure_mismatch():
    other = AnnotationSet((Polygon([[1, 1], [5, 1], [5, 4], [1, 4]]),), "t", (8, 8))
    with pytest.raises(DomainError):
        vertex_distances(tri(), other)


def test_empty_records():
    with pytest.raises(DomainError):
        accuracy_cdf([], [1.0])


def test_descending_thresholds():
    with pytest.raises(DomainError):
        accuracy_cdf(np.array([1.0]), [2.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=60))
def test_cdf_monotone_and_matches_counting(ds):
    d = np.array(ds)
    t = default_thresholds(16)
    cdf = accuracy_cdf(d, t)
    fr = [f for _, f in cdf]
    assert all(b >= a for a, b in zip(fr, fr[1:]))
    assert all(0 <= f <= 1 for f in fr)
    for tau, f in cdf:
        assert f == sum(1 for x in ds if x < tau) / len(ds)


def test_quantiles_match_sorting_oracle():
    d = np.random.default_rng(4).exponential(2.0, 1000)
    s = np.sort(d)
    q = quantiles(d)
    for p in (50, 90, 95):
        rank = p / 100 * (len(s) - 1)
        lo = int(np.floor(rank))
        expected = s[lo] + (rank - lo) * (s[lo + 1] - s[lo])
        assert q[p] == pytest.approx(expected, rel=1e-12)


def test_summarize():
    s = summarize(np.array([1.0, 2.0, 3.0]))
    assert s["n"] == 3 and s["mean"] == 2.0 and s["max"] == 3.0 and s["q50"] == 2.0


def test_emit_report(tmp_path):
    curves = [RoundCurve(0, "standard", np.array([5.0, 5.0])), RoundCurve(1, "standard", np.array([0.5, 1.5]))]
    t = [1.0, 2.0, 8.0]
    paths = emit_report(curves, tmp_path, t)
    assert [p.name for p in paths] == ["cdf.csv", "quantiles.csv", "cdf.svg"]
    rows = read_cdf_csv(tmp_path / "cdf.csv")
    assert rows == [(0, "standard", 1.0, 0.0), (0, "standard", 2.0, 0.0), (0, "standard", 8.0, 1.0),
                    (1, "standard", 1.0, 0.5), (1, "standard", 2.0, 1.0), (1, "standard", 8.0, 1.0)]
    q = (tmp_path / "quantiles.csv").read_text().splitlines()
    assert q[0] == "round,mode,q50,q90,q95" and q[1].startswith("0,standard,5.0")
    svg = (tmp_path / "cdf.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


def test_emit_report_needs_curves(tmp_path):
    with pytest.raises(DomainError):
        emit_report([], tmp_path)
