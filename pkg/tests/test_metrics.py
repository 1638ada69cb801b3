import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from quantsel.errors import ValidationError
from quantsel.metrics import (
    GAMMA_ABOVE_ALL, coverage_at_risk, ece, effective_reliability, eval_mixture, mixture_subsets,
    normalize_answer, rc_auc, reliability_report, risk_coverage_curve, select_threshold, soft_accuracy,
)
from quantsel.records import PredictionRecord


def recs(conf, acc, prefix="r"):
    return [PredictionRecord(f"{prefix}{i:03d}", float(c), float(a)) for i, (c, a) in enumerate(zip(conf, acc))]


def ranked_binary(n, n_correct):
    # confidence strictly decreasing, correct records first
    conf = 1.0 - (np.arange(n) + 1) / (n + 1)
    return recs(conf, [1.0] * n_correct + [0.0] * (n - n_correct))


seeds = st.integers(0, 2**32 - 1)


# --- soft accuracy ------------------------------------------------------------


def test_soft_accuracy_examples():
    assert soft_accuracy("cat", ["cat"] * 3 + ["dog"] * 7) == 1.0
    assert soft_accuracy("cat", ["cat"] * 5) == 1.0
    assert soft_accuracy("cow", ["cat"] * 10) == 0.0
    assert soft_accuracy("cat", ["cat"] + ["dog"] * 9) == 1 / 3
    assert soft_accuracy("", ["cat"]) == 0.0


def test_soft_accuracy_normalizes():
    assert normalize_answer("  The  Cat!  ") == "the cat"
    assert soft_accuracy("3 4", ["3  4.", "3 4", "3,4"]) == 2 / 3
    with pytest.raises(ValidationError):
        soft_accuracy("x", [])


# --- ECE ----------------------------------------------------------------------


def test_ece_trivial():
    assert ece(recs([0.8] * 5, [0.8] * 5)) == pytest.approx(0.0, abs=1e-15)
    assert ece(recs([1.0] * 4, [0.0] * 4)) == 1.0
    with pytest.raises(ValidationError):
        ece([])
    with pytest.raises(ValidationError):
        ece(recs([0.5], [1.0]), n_bins=0)


def test_ece_six_records_two_bins():
    r = recs([0.1, 0.5, 0.3, 0.6, 0.9, 1.0], [0, 1, 0, 1, 1, 0])
    # bin (0, .5]: conf .1 .5 .3 acc 0 1 0; bin (.5, 1]: conf .6 .9 1 acc 1 1 0
    low = abs((0.1 + 0.5 + 0.3) / 3 - 1 / 3)
    high = abs((0.6 + 0.9 + 1.0) / 3 - 2 / 3)
    assert ece(r, 2) == pytest.approx(0.5 * low + 0.5 * high, abs=1e-15)
    assert float(oracles.ece(r, 2)) == pytest.approx(ece(r, 2), abs=1e-15)


def test_ece_edges_are_right_closed():
    # 0.5 belongs to the lower bin and 0.0 to the first one
    r = recs([0.0, 0.5], [0.0, 0.5])
    assert ece(r, 2) == 0.0
    assert ece(recs([0.5, 0.5000001], [0.5, 0.0]), 2) == pytest.approx(0.5 * 0.5000001)


@given(seeds, st.sampled_from([1, 2, 7, 10, 15]))
def test_ece_matches_oracle(seed, bins):
    r = oracles.random_records(np.random.default_rng(seed))
    assert abs(ece(r, bins) - float(oracles.ece(r, bins))) <= 1e-12


# --- risk-coverage ------------------------------------------------------------


def test_curve_four_points():
    c = risk_coverage_curve(recs([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1]))
    assert c.coverage.tolist() == [0.25, 0.5, 0.75, 1.0]
    assert c.risk.tolist() == pytest.approx([0.0, 0.0, 1 / 3, 0.25], abs=1e-15)
    assert c.thresholds.tolist() == [0.9, 0.8, 0.7, 0.6]


def test_curve_reversed_confidences_is_worst_case():
    c = risk_coverage_curve(recs([0.6, 0.7, 0.8, 0.9], [1, 1, 0, 1]))
    flipped = risk_coverage_curve(recs([0.9, 0.8, 0.7, 0.6], [0, 1, 1, 1]))
    assert flipped.risk[0] == 1.0
    assert c.risk[1] == 0.5  # top two: the wrong one at 0.8 plus a correct one


def test_curve_all_correct_and_ties():
    c = risk_coverage_curve(recs([0.3, 0.9, 0.3, 0.9, 0.1], [1] * 5))
    assert c.risk.tolist() == [0.0, 0.0, 0.0]
    assert c.coverage.tolist() == [0.4, 0.8, 1.0]
    with pytest.raises(ValidationError):
        risk_coverage_curve([])


def test_curve_coverage_strictly_increasing(rng):
    for _ in range(20):
        c = risk_coverage_curve(oracles.random_records(rng))
        assert np.all(np.diff(c.coverage) > 0) and c.coverage[-1] == 1.0


def test_curve_does_not_depend_on_input_order(rng):
    r = oracles.random_records(rng, n=150)
    a = risk_coverage_curve(r)
    b = risk_coverage_curve([r[i] for i in rng.permutation(len(r))])
    assert np.array_equal(a.coverage, b.coverage) and np.array_equal(a.risk, b.risk)


@given(seeds)
def test_curve_matches_oracle(seed):
    r = oracles.random_records(np.random.default_rng(seed))
    c = risk_coverage_curve(r)
    pts = oracles.curve(r)
    assert len(pts) == len(c.coverage)
    for (cov, risk, t), c1, r1, t1 in zip(pts, c.coverage, c.risk, c.thresholds):
        assert abs(c1 - float(cov)) <= 1e-12 and abs(r1 - float(risk)) <= 1e-12 and t1 == t


# --- C@R and AUC --------------------------------------------------------------


def test_coverage_at_risk_hundred_records():
    c = risk_coverage_curve(ranked_binary(100, 90))
    assert coverage_at_risk(c, 0.05) == 0.94
    assert coverage_at_risk(c, 0.01) == 0.90
    assert coverage_at_risk(c, 0.005) == 0.90


def test_coverage_at_risk_scans_every_prefix():
    # risk crosses 0.2 at the second point but comes back down at the end
    c = risk_coverage_curve(recs([0.9, 0.8, 0.7, 0.6, 0.5], [1, 0, 1, 1, 1]))
    assert coverage_at_risk(c, 0.2) == 1.0
    assert coverage_at_risk(c, 0.0) == 0.2


def test_coverage_at_risk_trivial():
    assert coverage_at_risk(risk_coverage_curve(recs([0.5, 0.2], [1, 1])), 0.0) == 1.0
    assert coverage_at_risk(risk_coverage_curve(recs([0.5, 0.2], [0, 0])), 0.005) == 0.0
    with pytest.raises(ValidationError):
        coverage_at_risk(risk_coverage_curve(recs([0.5], [1])), -0.1)


@given(seeds, st.sampled_from([0.0, 0.005, 0.01, 0.05, 0.2, 0.5]))
def test_coverage_at_risk_matches_oracle(seed, r):
    rec = oracles.random_records(np.random.default_rng(seed))
    assert abs(coverage_at_risk(risk_coverage_curve(rec), r) - float(oracles.coverage_at_risk(rec, r))) <= 1e-12


@given(seeds, st.floats(0, 1), st.floats(0, 1))
def test_coverage_at_risk_monotone_in_r(seed, r1, r2):
    c = risk_coverage_curve(oracles.random_records(np.random.default_rng(seed)))
    lo, hi = sorted((r1, r2))
    assert coverage_at_risk(c, lo) <= coverage_at_risk(c, hi)


def test_auc_trivial_and_small():
    assert rc_auc(risk_coverage_curve(recs([0.9, 0.1], [1, 1]))) == 0.0
    # points (.25,0) (.5,0) (.75,1/3) (1,.25): trapezoids 0, 0, 1/24, 7/96
    c = risk_coverage_curve(recs([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1]))
    assert rc_auc(c) == pytest.approx(1 / 24 + 7 / 96, abs=1e-15)


def test_auc_analytic_perfect_ranking():
    a = 0.9
    auc = rc_auc(risk_coverage_curve(ranked_binary(10_000, 9_000)))
    assert abs(auc - ((1 - a) + a * math.log(a))) < 1e-3


def test_auc_random_confidence_is_overall_risk():
    rng = np.random.default_rng(7)
    acc = (rng.random(10_000) < 0.7).astype(float)
    auc = rc_auc(risk_coverage_curve(recs(rng.random(10_000), acc)))
    assert abs(auc - (1 - acc.mean())) < 0.01


@given(seeds)
def test_auc_matches_oracle(seed):
    r = oracles.random_records(np.random.default_rng(seed))
    assert abs(rc_auc(risk_coverage_curve(r)) - float(oracles.rc_auc(r))) <= 1e-12


@pytest.mark.parametrize("n", range(1, 8))
def test_perfect_ranking_minimizes_auc(n):
    rng = np.random.default_rng(n)
    acc = [float(a) for a in rng.choice([0.0, 1 / 3, 2 / 3, 1.0], n)]
    ranked_conf = np.argsort(np.argsort(acc, kind="stable"), kind="stable") + 1.0
    best = rc_auc(risk_coverage_curve(recs(ranked_conf / (n + 1), acc)))
    for perm in itertools.permutations(range(n)):
        conf = (np.array(perm) + 1.0) / (n + 1)
        assert best <= rc_auc(risk_coverage_curve(recs(conf, acc))) + 1e-15


# --- effective reliability and thresholds -------------------------------------


def test_phi_examples():
    assert effective_reliability(recs([0.5] * 4, [1] * 4), 0.0, 10) == 100.0
    assert effective_reliability(recs([0.5, 0.9], [1, 0]), GAMMA_ABOVE_ALL, 10) == 0.0
    r = recs([0.9] * 11, [1] * 10 + [0])
    assert effective_reliability(r, 0.5, 10) == 0.0
    with pytest.raises(ValidationError):
        effective_reliability(r, 0.5, -1)


def test_phi_soft_accuracy_counts_as_credit():
    r = recs([0.9, 0.9, 0.1], [1 / 3, 0.0, 1.0])
    assert effective_reliability(r, 0.5, 100) == pytest.approx(100 * (1 / 3 - 100) / 3)


@given(seeds, st.sampled_from([0.0, 1.0, 10.0, 100.0]))
def test_phi_at_zero_binary(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 100))
    acc = rng.integers(0, 2, n).astype(float)
    r = recs(rng.random(n), acc)
    k = acc.sum()
    assert abs(effective_reliability(r, 0.0, c) - 100 * (k - c * (n - k)) / n) <= 1e-9


@given(seeds, st.floats(0, 1.01), st.sampled_from([0.0, 10.0, 100.0]))
def test_phi_matches_oracle(seed, gamma, c):
    r = oracles.random_records(np.random.default_rng(seed))
    assert abs(effective_reliability(r, gamma, c) - float(oracles.phi(r, gamma, c))) <= 1e-12


def test_select_threshold_examples():
    assert select_threshold(recs([0.2, 0.7, 0.9], [1, 1, 1]), 10) == 0.0
    assert select_threshold(recs([0.2, 0.7, 0.9], [0, 0, 0]), 10) > 0.9
    r = recs([0.95, 0.9, 0.8, 0.4, 0.3], [1, 1, 1, 0, 0])
    g = select_threshold(r, 10)
    assert 0.4 < g < 0.8 and g == pytest.approx(0.6)


def test_select_threshold_prefers_abstaining_on_ties():
    # answering the single record scores 0 either way with c=0 and soft_acc 0
    assert select_threshold(recs([0.5], [0.0]), 0.0) == GAMMA_ABOVE_ALL


@given(seeds, st.sampled_from([0.0, 1.0, 10.0, 100.0]))
def test_select_threshold_matches_oracle(seed, c):
    r = oracles.random_records(np.random.default_rng(seed))
    assert select_threshold(r, c) == oracles.select_threshold(r, c)


# --- rank invariance ----------------------------------------------------------


@given(seeds)
def test_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    dev = oracles.random_records(rng)
    # test confidences drawn from the dev levels: a dev midpoint and its warped
    # counterpart then split the test set identically
    levels = sorted({r.confidence for r in dev})
    test = [r.with_confidence(levels[int(rng.integers(len(levels)))]) for r in oracles.random_records(rng)]

    def warp(rs):
        return [r.with_confidence(r.confidence ** 3 * 0.5 + 0.1) for r in rs]

    a = reliability_report(test, dev)
    b = reliability_report(warp(test), warp(dev))
    assert np.array_equal(a.curve.coverage, b.curve.coverage)
    assert np.allclose(a.curve.risk, b.curve.risk, atol=1e-15, rtol=0)
    assert a.c_at_r == b.c_at_r
    assert a.rc_auc == pytest.approx(b.rc_auc, abs=1e-15)
    assert a.phi == pytest.approx(b.phi, abs=1e-12)
    for c in (10.0, 100.0):
        assert effective_reliability(dev, a.thresholds[c], c) == pytest.approx(
            effective_reliability(warp(dev), b.thresholds[c], c), abs=1e-12)


def test_report_is_pure():
    rng = np.random.default_rng(3)
    test, dev = oracles.random_records(rng), oracles.random_records(rng)
    assert reliability_report(test, dev, "x").metrics() == reliability_report(test, dev, "x").metrics()


@given(seeds)
def test_report_does_not_depend_on_record_order(seed):
    rng = np.random.default_rng(seed)
    records = oracles.random_records(rng)
    shuffled = [records[i] for i in rng.permutation(len(records))]
    a, b = reliability_report(records, records), reliability_report(shuffled, records)
    assert a.accuracy == b.accuracy
    assert a.phi == b.phi


def test_report_keys():
    rep = reliability_report(recs([0.9, 0.2], [1, 0]), recs([0.8, 0.1], [1, 0]), "int4_HQQ")
    assert set(rep.metrics()) == {"acc", "ece", "c@0.5", "c@1", "c@5", "auc", "phi10", "phi100",
                                  "gamma10", "gamma100", "n", "label"}
    assert rep.metrics()["acc"] == 0.5 and rep.metrics()["n"] == 2


# --- mixture ------------------------------------------------------------------


def _mix_sets(rng):
    ids = recs(rng.random(40), rng.integers(0, 2, 40), "id")
    oods = recs(rng.random(25), rng.choice([0, 1 / 3, 1], 25), "ood")
    return ids, oods


def test_mixture_endpoints(rng):
    ids, oods = _mix_sets(rng)
    rows = eval_mixture(ids, oods, [0.0, 1.0], gamma=0.4, c=10)
    assert (rows[0].n_id, rows[0].n_ood) == (40, 0) and (rows[1].n_id, rows[1].n_ood) == (0, 25)
    assert rows[0].phi == effective_reliability(ids, 0.4, 10)
    assert rows[1].phi == effective_reliability(oods, 0.4, 10)
    assert rows[0].accuracy == np.mean([r.soft_acc for r in ids])


def test_mixture_weighted_mean(rng):
    ids, oods = _mix_sets(rng)
    for f in (0.1, 0.3, 0.5, 0.9):
        a, b = mixture_subsets(ids, oods, f, seed=5)
        assert len(a) == math.ceil(round((1 - f) * 40, 9)) and len(b) == math.ceil(round(f * 25, 9))
        row = eval_mixture(ids, oods, [f], 0.4, 10, seed=5)[0]
        acc_a = np.mean([r.soft_acc for r in a])
        acc_b = np.mean([r.soft_acc for r in b])
        assert abs(row.accuracy - (len(a) * acc_a + len(b) * acc_b) / (len(a) + len(b))) <= 1e-12


def test_mixture_subsets_nested(rng):
    ids, oods = _mix_sets(rng)
    prev = None
    for f in np.linspace(0, 1, 11):
        a, b = mixture_subsets(ids, oods, f, seed=1)
        if prev is not None:
            assert {r.id for r in a} <= {r.id for r in prev[0]}
            assert {r.id for r in prev[1]} <= {r.id for r in b}
        prev = (a, b)


def test_mixture_rejects_bad_input():
    with pytest.raises(ValidationError):
        eval_mixture([], recs([0.5], [1]), [0.0], 0.5, 10)
    with pytest.raises(ValidationError):
        mixture_subsets(recs([0.5], [1]), [], 1.5)
