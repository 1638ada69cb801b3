"""Selective-prediction reliability metrics.

A selective model answers a sample iff ``confidence >= gamma``. Risk is
``1 - mean(soft_acc)`` over the answered samples, coverage the answered
fraction. Samples with equal confidence always enter or leave coverage
together; orderings break remaining ties by record id.
"""

from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ValidationError

# comparison slack for risk <= r and for Phi ties; both far below any
# difference between distinct finite-sample values
RISK_TOL = 1e-12
PHI_TOL = 1e-9
GAMMA_ABOVE_ALL = 1.0 + 1e-6
RISK_LEVELS = (0.005, 0.01, 0.05)
PHI_COSTS = (10.0, 100.0)
DEFAULT_BINS = 15

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize_answer(text: str) -> str:
    return " ".join(_PUNCT.sub("", text.lower()).split())


def soft_accuracy(answer: str, refs) -> float:
    """VQA-style accuracy ``min(#matching refs / 3, 1)`` after normalization."""
    refs = list(refs)
    if not refs:
        raise ValidationError("soft_accuracy needs at least one reference")
    a = normalize_answer(answer or "")
    if not a:
        return 0.0
    matches = sum(normalize_answer(r) == a for r in refs)
    return min(matches / 3.0, 1.0)


def _arrays(records):
    records = list(records)
    if not records:
        raise ValidationError("empty record set")
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    acc = np.array([r.soft_acc for r in records], dtype=np.float64)
    ids = [r.id for r in records]
    return conf, acc, ids


def _ranked(records):
    conf, acc, ids = _arrays(records)
    order = sorted(range(len(ids)), key=lambda i: (-conf[i], ids[i]))
    return conf[order], acc[order]


def ece(records, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error with equal-width, right-closed bins.

    Bin ``b`` covers ``(b/n, (b+1)/n]``; the first bin also takes confidence 0.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    conf, acc, _ = _arrays(records)
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    total = 0.0
    n = len(conf)
    for b in range(n_bins):
        sel = idx == b
        k = int(sel.sum())
        if k:
            total += k / n * abs(conf[sel].mean() - acc[sel].mean())
    return float(total)


@dataclass(frozen=True, eq=False)
class RiskCoverageCurve:
    coverage: np.ndarray
    risk: np.ndarray
    thresholds: np.ndarray
    n: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.coverage.tolist(), self.risk.tolist()))

    def to_csv(self) -> str:
        lines = ["coverage,risk,threshold"]
        lines += [f"{c!r},{r!r},{t!r}" for c, r, t in
                  zip(self.coverage.tolist(), self.risk.tolist(), self.thresholds.tolist())]
        return "\n".join(lines) + "\n"


def risk_coverage_curve(records) -> RiskCoverageCurve:
    """One point per distinct confidence level, in decreasing-threshold order."""
    conf, acc = _ranked(records)
    n = len(conf)
    csum = np.cumsum(acc)
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True)) + 1
    cov = ends / n
    risk = 1.0 - csum[ends - 1] / ends
    return RiskCoverageCurve(cov, risk, conf[ends - 1], n)


def coverage_at_risk(curve: RiskCoverageCurve, r: float) -> float:
    """Largest coverage over all curve points with risk <= r (0 if none)."""
    if r < 0:
        raise ValidationError("risk level must be >= 0")
    ok = curve.risk <= r + RISK_TOL
    return float(curve.coverage[ok].max()) if ok.any() else 0.0


def rc_auc(curve: RiskCoverageCurve) -> float:
    """Trapezoidal area under risk(coverage) on [0, 1]; risk(0) := first point's risk."""
    c = np.concatenate([[0.0], curve.coverage])
    r = np.concatenate([[curve.risk[0]], curve.risk])
    return float(np.sum(np.diff(c) * (r[1:] + r[:-1]) / 2.0))


def _scores(acc, c):
    return np.where(acc > 0, acc, -c)


def _mean(x) -> float:
    # exactly rounded sum, so the mean does not depend on record order
    return math.fsum(x) / len(x)


def effective_reliability(records, gamma: float, c: float) -> float:
    """Phi_c on a percentage scale: answered samples score soft_acc, or -c if wrong."""
    if c < 0:
        raise ValidationError("cost c must be >= 0")
    conf, acc, _ = _arrays(records)
    s = _scores(acc, c)[conf >= gamma]
    # exact sum and one rounding, so Phi does not depend on record order
    return float(100 * sum(map(Fraction, s.tolist()), Fraction(0)) / len(conf))


def threshold_candidates(conf) -> list[float]:
    """Candidate thresholds in decreasing order: above-all, midpoints, 0."""
    u = np.unique(np.asarray(conf, dtype=np.float64))[::-1]
    cands = [GAMMA_ABOVE_ALL]
    for hi, lo in zip(u[:-1], u[1:]):
        mid = (hi + lo) / 2.0
        if mid <= lo:
            mid = float(np.nextafter(lo, np.inf))
        cands.append(float(mid))
    cands.append(0.0)
    return cands


def select_threshold(dev_records, c: float) -> float:
    """gamma maximizing Phi_c on the dev set; ties go to the largest gamma."""
    if c < 0:
        raise ValidationError("cost c must be >= 0")
    conf, acc = _ranked(dev_records)
    n = len(conf)
    csum = np.concatenate([[0.0], np.cumsum(_scores(acc, c))])
    cands = threshold_candidates(conf)
    # conf is sorted descending: answered count = #(conf >= gamma)
    ks = np.searchsorted(-conf, -np.asarray(cands), side="right")
    best_gamma, best_phi = None, -math.inf
    for gamma, k in zip(cands, ks):
        phi = 100.0 * csum[k] / n
        if phi > best_phi + PHI_TOL:
            best_gamma, best_phi = gamma, phi
    return float(best_gamma)


@dataclass
class ReliabilityReport:
    accuracy: float
    ece: float
    c_at_r: dict[float, float]
    rc_auc: float
    phi: dict[float, float]
    thresholds: dict[float, float]
    n_samples: int
    label: str
    ece_bins: int = DEFAULT_BINS
    curve: RiskCoverageCurve | None = field(default=None, repr=False)

    def metrics(self) -> dict:
        """The report's metric fields under their JSON keys."""
        return {
            "acc": self.accuracy,
            "ece": self.ece,
            "c@0.5": self.c_at_r[0.005],
            "c@1": self.c_at_r[0.01],
            "c@5": self.c_at_r[0.05],
            "auc": self.rc_auc,
            "phi10": self.phi[10.0],
            "phi100": self.phi[100.0],
            "gamma10": self.thresholds[10.0],
            "gamma100": self.thresholds[100.0],
            "n": self.n_samples,
            "label": self.label,
        }


def reliability_report(records, dev_records, label: str = "", n_bins: int = DEFAULT_BINS) -> ReliabilityReport:
    """All metrics on ``records`` with Phi thresholds chosen on ``dev_records``."""
    records = list(records)
    _, acc, _ = _arrays(records)
    curve = risk_coverage_curve(records)
    gammas = {c: select_threshold(dev_records, c) for c in PHI_COSTS}
    return ReliabilityReport(
        accuracy=_mean(acc),
        ece=ece(records, n_bins),
        c_at_r={r: coverage_at_risk(curve, r) for r in RISK_LEVELS},
        rc_auc=rc_auc(curve),
        phi={c: effective_reliability(records, gammas[c], c) for c in PHI_COSTS},
        thresholds=gammas,
        n_samples=len(records),
        label=label,
        ece_bins=n_bins,
        curve=curve,
    )


@dataclass(frozen=True)
class MixtureRow:
    fraction: float
    accuracy: float
    coverage: float
    phi: float
    n_id: int
    n_ood: int


def _ceil_count(x: float) -> int:
    # guard against 0.9*10 = 9.000000000000002 style overshoot
    return int(math.ceil(x - 1e-9))


def mixture_subsets(id_records, ood_records, fraction: float, seed: int = 0):
    """The ID and OOD subsets used at ``fraction``.

    Each source is permuted once with ``default_rng([seed, source_index])``;
    the first ``ceil((1-f)N)`` ID and ``ceil(f M)`` OOD records are taken, so
    subsets are nested as ``f`` varies.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction {fraction} outside [0, 1]")
    id_records, ood_records = list(id_records), list(ood_records)
    pid = np.random.default_rng([seed, 0]).permutation(len(id_records))
    pood = np.random.default_rng([seed, 1]).permutation(len(ood_records))
    k_id = _ceil_count((1.0 - fraction) * len(id_records))
    k_ood = _ceil_count(fraction * len(ood_records))
    return [id_records[i] for i in pid[:k_id]], [ood_records[i] for i in pood[:k_ood]]


def eval_mixture(id_records, ood_records, fractions, gamma: float, c: float, seed: int = 0) -> list[MixtureRow]:
    rows = []
    for f in fractions:
        ids, oods = mixture_subsets(id_records, ood_records, f, seed)
        combined = ids + oods
        if not combined:
            raise ValidationError(f"empty evaluation set at fraction {f}")
        conf, acc, _ = _arrays(combined)
        rows.append(MixtureRow(
            fraction=float(f),
            accuracy=_mean(acc),
            coverage=float(np.mean(conf >= gamma)),
            phi=effective_reliability(combined, gamma, c),
            n_id=len(ids),
            n_ood=len(oods),
        ))
    return rows


def mixture_csv(rows: list[MixtureRow]) -> str:
    lines = ["fraction,accuracy,coverage,phi,n_id,n_ood"]
    lines += [f"{r.fraction!r},{r.accuracy!r},{r.coverage!r},{r.phi!r},{r.n_id},{r.n_ood}" for r in rows]
    return "\n".join(lines) + "\n"
