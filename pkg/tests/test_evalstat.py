from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from trajstyle.evalstat import (DegenerateInput, anova_oneway, box_cox, build_report, compare_groups,
                                dtw_normalized, episode_metrics, format_report, hedges_g, hedges_j, holm,
                                kruskal_wallis, levene, pairwise_posthoc, read_metrics_csv, write_metrics_csv,
                                write_report)
from trajstyle.trajdata import DataError, Trajectory

from oracles import brute_dtw, grid_llf, hand_anova, hand_kw


# ---------------------------------------------------------------------------
# DTW


def test_dtw_small_examples():
    x = np.random.default_rng(0).normal(size=(7, 5))
    assert dtw_normalized(x, x) == 0.0
    assert dtw_normalized([0.0], [3.0]) == 3.0
    a, b = [1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 3.0]
    assert dtw_normalized(a, b) == brute_dtw(a, b) == 0.0


def test_dtw_battery_against_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(60):
        n, m = rng.integers(1, 7, size=2)
        a, b = rng.normal(size=(n, 5)), rng.normal(size=(m, 5))
        want = brute_dtw(a, b)
        assert dtw_normalized(a, b) == want


def test_dtw_max_normalisation_and_errors():
    a, b = [0.0, 0.0], [1.0, 1.0, 1.0]
    assert dtw_normalized(a, b, norm="max") == pytest.approx(3.0 / 3)
    assert dtw_normalized(a, b) == pytest.approx(3.0 / 3)
    with pytest.raises(DataError):
        dtw_normalized(np.zeros((0, 5)), np.zeros((2, 5)))
    with pytest.raises(DataError):
        dtw_normalized(np.zeros((2, 5)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        dtw_normalized(a, b, norm="bogus")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), m=st.integers(1, 6))
def test_dtw_symmetric_and_positive(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    d = dtw_normalized(a, b)
    assert d == pytest.approx(dtw_normalized(b, a), rel=1e-12)
    assert d > 0 and dtw_normalized(a, a.copy()) == 0.0


# ---------------------------------------------------------------------------
# episode metrics


def _constant_episode(n=800):
    states = np.zeros((n, 7))
    states[:, 1], states[:, 2] = -3.0, 4.0  # |F| = 5 N
    states[:, 3] = 0.75
    states[:, 4] = np.where(np.arange(n) % 2, 0.1, -0.3)
    states[:, 5] = 1.0
    actions = np.tile([0.0, 0.0, 800.0, 800.0, 800.0], (n, 1))
    return Trajectory("ep", 0.02, states, actions)


def test_removed_volume_hand_integration():
    m = episode_metrics(_constant_episode(), {"completion_time": 16.0})
    assert m.mrv == pytest.approx(100.0, rel=1e-12)
    assert m.avg_force == pytest.approx(5.0, rel=1e-12)
    assert m.avg_path_deviation == pytest.approx(0.2, rel=1e-12)
    assert m.completion_time == 16.0 and not m.no_contact


def test_zero_contact_episode_is_flagged():
    tr = _constant_episode(50)
    tr.states[:, 0:3] = 0.0
    m = episode_metrics(tr)
    assert m.avg_force == 0.0 and m.avg_path_deviation == 0.0 and m.no_contact
    assert m.completion_time == pytest.approx(1.0)


def test_identical_reference_gives_zero_dtw():
    tr = _constant_episode(30)
    bounds = (np.array([-0.5, -1.0, 100.0, 100.0, 100.0]), np.array([0.5, 1.0, 5000.0, 5000.0, 5000.0]))
    assert episode_metrics(tr, references=[tr.actions.copy()], bounds=bounds).dtw_to_expert == 0.0
    other = tr.actions.copy()
    other[:, 0] = 0.5
    mean = episode_metrics(tr, references=[tr.actions, other], bounds=bounds).dtw_to_expert
    low = episode_metrics(tr, references=[tr.actions, other], bounds=bounds, dtw_reduce="min").dtw_to_expert
    assert low == 0.0 and mean == pytest.approx(0.5, rel=1e-12)


def test_simulator_blocks_take_precedence():
    tr = _constant_episode(10)
    blocks = {"contact_steps": np.array([0, 2, 2, 0, 0, 0, 0, 0, 0, 0]), "force_sum": np.full(10, 6.0),
              "mrv": np.full(10, 0.5)}
    m = episode_metrics(tr, blocks=blocks)
    assert m.avg_force == pytest.approx(60.0 / 4) and m.mrv == pytest.approx(5.0)
    assert m.avg_path_deviation == pytest.approx(0.2)


def test_empty_trajectory_rejected():
    with pytest.raises(DataError):
        episode_metrics(Trajectory("e", 0.02, np.zeros((0, 7)), np.zeros((0, 5))))


# ---------------------------------------------------------------------------
# omnibus tests

TEXTBOOK = [[6.0, 8.0, 4.0, 5.0, 3.0, 4.0], [8.0, 12.0, 9.0, 11.0, 6.0, 8.0], [13.0, 9.0, 11.0, 8.0, 7.0, 12.0]]


def test_anova_matches_hand_decomposition():
    r = anova_oneway(TEXTBOOK)
    assert r.statistic == pytest.approx(hand_anova(TEXTBOOK), rel=1e-10)
    assert r.statistic == pytest.approx(9.264705882352942, rel=1e-10)
    ref = stats.f_oneway(*TEXTBOOK)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    assert r.df == (2, 15)


def test_anova_equal_means_and_two_group_identity():
    assert anova_oneway([[1.0, 3.0], [0.0, 4.0], [2.0, 2.0]]).statistic == 0.0
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=9), rng.normal(1.0, 2.0, size=13)
    sp2 = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    t = (a.mean() - b.mean()) / math.sqrt(sp2 * (1 / a.size + 1 / b.size))
    assert anova_oneway([a, b]).statistic == pytest.approx(t * t, rel=1e-10)


def test_anova_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        anova_oneway([[1.0, 2.0]])
    with pytest.raises(DegenerateInput):
        anova_oneway([[1.0], [2.0, 3.0]])
    assert anova_oneway([[1.0, 1.0], [2.0, 2.0]]).p_value == 0.0


def test_kruskal_matches_hand_ranking():
    data = [[2.9, 3.0, 2.5, 2.6, 3.2], [3.8, 2.7, 4.0, 2.4], [2.8, 3.4, 3.7, 2.2, 2.0]]
    r = kruskal_wallis(data)
    assert r.statistic == pytest.approx(hand_kw(data), rel=1e-10, abs=1e-12)
    tied = [[1.0, 2.0, 2.0, 3.0], [2.0, 3.0, 3.0, 4.0], [4.0, 4.0, 5.0, 1.0]]
    r2 = kruskal_wallis(tied)
    assert r2.statistic == pytest.approx(hand_kw(tied), rel=1e-10)
    assert r2.p_value == pytest.approx(stats.kruskal(*tied).pvalue, rel=1e-9)


def test_identical_groups_are_null():
    g = [1.0, 4.0, 2.5, 7.0]
    assert kruskal_wallis([g, g, g]).statistic == 0.0
    assert levene([g, g]).p_value > 0.99
    assert hedges_g(g, g) == 0.0


def test_levene_median_centred():
    rng = np.random.default_rng(7)
    groups = [rng.normal(0, s, size=n) for s, n in ((1.0, 12), (2.5, 15), (1.2, 9))]
    r = levene(groups)
    ref = stats.levene(*groups, center="median")
    assert r.statistic == pytest.approx(ref.statistic, rel=1e-10)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_hedges_correction_factor():
    for df in (2, 5, 18, 100):
        exact = math.gamma(df / 2) / (math.sqrt(df / 2) * math.gamma((df - 1) / 2))
        assert hedges_j(df) == pytest.approx(exact, rel=1e-12)
        assert abs(hedges_j(df) - (1 - 3 / (4 * df - 1))) < 0.01


def test_hedges_unit_gap():
    base = np.array([-1.3, 0.2, 0.4, 1.9, -0.6, 2.2, -0.1])
    s = base.std(ddof=1)
    assert hedges_g(base + s, base) == pytest.approx(hedges_j(12), rel=1e-12)
    assert hedges_g(base, base + s) == pytest.approx(-hedges_j(12), rel=1e-12)
    with pytest.raises(DegenerateInput):
        hedges_g([1.0, 1.0], [2.0, 2.0])


def test_holm_hand_example():
    np.testing.assert_allclose(holm([0.01, 0.04, 0.03, 0.005]), [0.03, 0.06, 0.06, 0.02], rtol=1e-12)
    np.testing.assert_array_equal(holm([0.6, 0.9]), [1.0, 1.0])


def test_posthoc_pairs_and_welch_reference():
    rng = np.random.default_rng(11)
    groups = {"a": rng.normal(0, 1, 10), "b": rng.normal(1, 2, 12), "c": rng.normal(0.5, 1, 8)}
    rows = pairwise_posthoc(groups, "welch")
    assert [r.test for r in rows] == ["welch-t:a|b", "welch-t:a|c", "welch-t:b|c"]
    raw = [stats.ttest_ind(groups[x], groups[y], equal_var=False).pvalue for x, y in (("a", "b"), ("a", "c"),
                                                                                    ("b", "c"))]
    np.testing.assert_allclose([r.p_value for r in rows], holm(raw), rtol=1e-9)
    mw = pairwise_posthoc(groups, "mannwhitney")
    assert all(0 <= r.p_value <= 1 and r.note == "holm-adjusted" for r in mw)
    with pytest.raises(ValueError):
        pairwise_posthoc(groups, "tukey")


# ---------------------------------------------------------------------------
# Box-Cox


def test_box_cox_fixed_lambdas():
    x = np.array([0.5, 1.0, 2.0, 7.5])
    y, lam = box_cox(x, 0.0)
    np.testing.assert_array_equal(y, np.log(x))
    assert lam == 0.0
    np.testing.assert_allclose(box_cox(x, 1.0)[0], x - 1.0, rtol=0, atol=1e-15)
    with pytest.raises(DegenerateInput):
        box_cox([1.0, 0.0, 2.0])


def test_box_cox_lognormal_against_grid():
    x = np.random.default_rng(2024).lognormal(0.0, 0.8, size=200)
    _, lam = box_cox(x)
    grid = np.round(np.arange(-5.0, 5.0 + 1e-9, 0.001), 6)
    oracle = grid[np.argmax([grid_llf(x, g) for g in grid])]
    assert abs(lam) <= 0.15
    assert abs(lam - oracle) <= 0.02
    assert abs(lam - stats.boxcox(x)[1]) <= 0.02


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_box_cox_unit_lambda_preserves_order(seed):
    x = np.random.default_rng(seed).uniform(0.01, 50.0, size=15)
    y, _ = box_cox(x, 1.0)
    np.testing.assert_array_equal(np.argsort(y, kind="stable"), np.argsort(x, kind="stable"))


# ---------------------------------------------------------------------------
# invariances


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.1, 50.0), beta=st.floats(-100, 100), flip=st.booleans())
def test_anova_affine_invariance(seed, alpha, beta, flip):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(m, 1.0, size=6) for m in (0.0, 0.4, 1.1)]
    a = -alpha if flip else alpha
    F = anova_oneway(groups).statistic
    assert F >= 0
    assert anova_oneway([a * g + beta for g in groups]).statistic == pytest.approx(F, rel=1e-8, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kruskal_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    groups = [np.round(rng.normal(m, 1.0, size=7), 1) for m in (0.0, 0.5, 1.0)]  # rounding creates ties
    H = kruskal_wallis(groups).statistic
    assert kruskal_wallis([np.exp(g) for g in groups]).statistic == pytest.approx(H, rel=1e-12, abs=1e-12)
    assert kruskal_wallis([g**3 + 2 * g for g in groups]).statistic == pytest.approx(H, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hedges_sign_flip(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=5), rng.normal(0.3, 1.5, size=8)
    assert hedges_g(a, b) == pytest.approx(-hedges_g(b, a), rel=1e-12)


# ---------------------------------------------------------------------------
# suite and reports


def _rows(strategies, n=8, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for k, s in enumerate(strategies):
        for i in range(n):
            rows.append({"strategy": s, "material": "plastic", "geometry": ("flat", "curved")[i % 2],
                         "completion_time": 16.0 + k + rng.normal(0, 0.3), "path_dev": abs(rng.normal(0.1, 0.02)),
                         "avg_force": 3.0 + 0.5 * k + rng.normal(0, 0.2), "mrv": 100.0 + rng.normal(0, 2.0),
                         "dtw": abs(rng.normal(0.2, 0.05)), "seed": 100 * k + i, "fault": False})
    return rows


def test_compare_groups_branches():
    rng = np.random.default_rng(3)
    equal = {"x": rng.normal(0, 1, 20), "y": rng.normal(2, 1, 20)}
    res = compare_groups(equal)
    assert res["omnibus"]["test"] == "anova" and res["omnibus"]["transform"] == "none"
    wild = {"x": rng.normal(0, 0.01, 20) + 5, "y": np.r_[rng.normal(5, 4, 19), -30.0]}
    res = compare_groups(wild)
    assert res["omnibus"]["test"] == "kruskal"
    assert "Holm" in res["note"]


def test_single_strategy_report_skips_statistics(tmp_path):
    rep = build_report(_rows(["expert"]))
    assert rep["statistics"] == {} and "single strategy" in rep["note"]
    assert "skipped" in format_report(rep) or "single strategy" in format_report(rep)
    write_report(rep, tmp_path)
    assert (tmp_path / "summary.csv").read_text().splitlines()[0].startswith("strategy,geometry,n,")


def test_metrics_csv_round_trip_and_report(tmp_path):
    rows = _rows(["baseline", "expert", "style-transfer"], seed=4)
    write_metrics_csv(rows, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == rows
    rep = build_report(back)
    assert set(rep["statistics"]) == {"completion_time", "path_dev", "avg_force", "mrv", "dtw"}
    for res in rep["statistics"].values():
        assert 0.0 <= res["omnibus"]["p_value"] <= 1.0
        assert len(res["posthoc"]) == 3
    assert rep["statistics"]["completion_time"]["omnibus"]["p_value"] < 1e-6
    text = format_report(rep)
    assert "Tukey" in text and "baseline" in text


def test_special_functions_against_tables():
    from trajstyle.evalstat import chi2_sf, f_sf, t_sf2
    assert f_sf(3.89, 2, 12) == pytest.approx(0.05, abs=2e-4)  # tabulated 5% critical value
    assert chi2_sf(3.841458820694124, 1) == pytest.approx(0.05, rel=1e-10)
    assert t_sf2(2.228138851986274, 10) == pytest.approx(0.05, rel=1e-10)
    assert f_sf(0.0, 2, 3) == 1.0 and f_sf(math.inf, 2, 3) == 0.0
