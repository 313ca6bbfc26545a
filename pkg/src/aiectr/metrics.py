"""Auction-aware offline metrics.

* ``auc``            -- rank-statistic ROC AUC, ties credited 0.5
* ``cs_auc``         -- CPM-sensitive AUC over (high-level, low-level) pairs
* ``rev``            -- simulated single-slot revenue over (weekday, hour, slotid) groups
* ``rev_ndcg``       -- ``rev`` divided by the best attainable revenue
* ``predicted_bias`` -- (mean pCTR - CTR) / CTR in percent
* ``relaimpr``       -- relative improvement for AUC-like or revenue-like metrics

Sums that two code paths must reproduce bit-for-bit (csAUC, revenue) are
accumulated with ``math.fsum`` over exactly representable terms, so the
result is the correctly rounded exact sum regardless of summation order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import Dataset


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. a single class)."""


@dataclass
class ScoredSet:
    """Column-wise scored samples; ``group`` holds dense integer group ids."""

    pctr: np.ndarray
    y: np.ndarray
    bid: np.ndarray
    payprice: np.ndarray
    group: np.ndarray | None = None

    def __post_init__(self):
        self.pctr = np.asarray(self.pctr, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.bid = np.asarray(self.bid, dtype=np.float64)
        self.payprice = np.asarray(self.payprice, dtype=np.float64)
        if self.group is not None:
            self.group = np.asarray(self.group, dtype=np.int64)

    @classmethod
    def from_dataset(cls, dataset: Dataset, pctr: np.ndarray) -> "ScoredSet":
        group, _ = dataset.group_ids()
        return cls(pctr, dataset.y, dataset.bid, dataset.payprice, group)

    @property
    def ecpm(self) -> np.ndarray:
        return self.pctr * self.bid

    def n_groups(self) -> int:
        if self.group is None:
            raise ValueError("scored set has no group ids")
        return int(self.group.max()) + 1 if len(self.group) else 0


# ------------------------------------------------------------------------ AUC
def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks, so ties get half credit
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------- csAUC
def _split_exact(x: np.ndarray):
    """Veltkamp split: ``x == hi + lo`` with each part carrying <= 26 significant
    bits, so ``hi * n`` and ``lo * n`` are exact for integers ``n < 2**27``."""
    t = x * 134217729.0  # 2**27 + 1
    hi = t - (t - x)
    return hi, x - hi


def _exact_dot(values: np.ndarray, counts: np.ndarray) -> float:
    """Correctly rounded ``sum(values * counts)`` for non-negative integer counts."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) and counts.max() >= 2**27:
        return _fraction_dot(values, counts)
    hi, lo = _split_exact(np.asarray(values, dtype=np.float64))
    c = counts.astype(np.float64)
    return math.fsum(np.concatenate([hi * c, lo * c]).tolist())


def _fraction_dot(values, counts) -> float:
    from fractions import Fraction

    return float(sum((Fraction(float(v)) * int(c) for v, c in zip(values, counts)), Fraction(0)))


def cs_auc_terms(s: ScoredSet):
    """Exact ``(numerator, denominator, n_pairs)`` of csAUC, O(n log n)."""
    e = s.ecpm
    pos = s.y == 1
    neg = ~pos
    bid_p, e_p = s.bid[pos], e[pos]
    e_n = np.sort(e[neg])
    n_neg = len(e_n)

    # positive (level = bid > 0) against negatives (level 0)
    active = bid_p > 0
    wins_vs_neg = np.searchsorted(e_n, e_p, side="right") * active
    pairs_vs_neg = n_neg * active

    # positive against positive with strictly smaller bid
    uniq, rank = np.unique(e_p, return_inverse=True)
    rank = np.ascontiguousarray(rank.reshape(-1), dtype=np.int64)
    below, above = kernels.dominance_counts(np.ascontiguousarray(bid_p), rank, len(uniq))
    sorted_bids = np.sort(bid_p)
    n_lower = np.searchsorted(sorted_bids, bid_p, side="left")
    n_higher = len(bid_p) - np.searchsorted(sorted_bids, bid_p, side="right")

    # pair (h, l): Rev = bid_h if e_h >= e_l else bid_l (l is positive)
    num = _exact_dot(
        np.concatenate([bid_p, bid_p]),
        np.concatenate([wins_vs_neg + below, n_higher - above]),
    )
    den = _exact_dot(bid_p, pairs_vs_neg + n_lower)
    n_pairs = int(pairs_vs_neg.sum() + n_lower.sum())
    return num, den, n_pairs


def cs_auc(s: ScoredSet) -> float:
    num, den, n_pairs = cs_auc_terms(s)
    if n_pairs == 0 or den == 0:
        raise UndefinedMetricError("csAUC needs at least one (high-level, low-level) pair with positive bid")
    return num / den


def cs_auc_bruteforce(s: ScoredSet) -> float:
    """O(n^2) enumeration of every (high, low) pair; the reference for :func:`cs_auc`."""
    level = np.where(s.y == 1, s.bid, 0.0)
    e = s.ecpm
    T = np.where(s.y == 1, s.bid, 0.0)
    hi_mask = level[:, None] > level[None, :]
    if not hi_mask.any():
        raise UndefinedMetricError("csAUC needs at least one (high-level, low-level) pair")
    bid_h = np.broadcast_to(s.bid[:, None], hi_mask.shape)
    win = e[:, None] >= e[None, :]
    rev = np.where(win, bid_h, np.broadcast_to(T[None, :], hi_mask.shape))
    den = math.fsum(bid_h[hi_mask].tolist())
    if den == 0:
        raise UndefinedMetricError("csAUC denominator is zero")
    return math.fsum(rev[hi_mask].tolist()) / den


# -------------------------------------------------------------------- revenue
@dataclass
class RevenueBreakdown:
    rev: float
    rev_max: float
    winners: np.ndarray  # winning sample index per group
    per_group: np.ndarray  # revenue per group
    per_group_max: np.ndarray


def revenue(s: ScoredSet) -> RevenueBreakdown:
    """Winner per group is the highest eCPM (ties: lowest log index); revenue is
    the winner's paying price when it was clicked."""
    n_groups = s.n_groups()
    winners = kernels.group_argmax(s.group, np.ascontiguousarray(s.ecpm), n_groups)
    won = winners >= 0
    per_group = np.zeros(n_groups)
    w = winners[won]
    per_group[won] = np.where(s.y[w] == 1, s.payprice[w], 0.0)
    clicked_price = np.where(s.y == 1, s.payprice, -np.inf)
    per_group_max = np.full(n_groups, -np.inf)
    np.maximum.at(per_group_max, s.group, clicked_price)
    per_group_max[~np.isfinite(per_group_max)] = 0.0  # groups without clicks add nothing
    return RevenueBreakdown(
        math.fsum(per_group.tolist()), math.fsum(per_group_max.tolist()), winners, per_group, per_group_max
    )


def rev(s: ScoredSet) -> float:
    return revenue(s).rev


def rev_ndcg(s: ScoredSet) -> float:
    r = revenue(s)
    if r.rev_max == 0:
        raise UndefinedMetricError("Rev NDCG undefined: no group has a clicked item with positive price")
    return r.rev / r.rev_max


def predicted_bias(pctr: np.ndarray, y: np.ndarray) -> float:
    ctr = float(np.mean(y))
    if ctr == 0:
        raise UndefinedMetricError("predicted bias needs at least one click")
    return (float(np.mean(pctr)) - ctr) / ctr * 100.0


def relaimpr(measured: float, base: float, kind: str) -> float:
    if kind == "auc_like":
        if base <= 0.5:
            raise UndefinedMetricError("AUC-like RelaImpr needs base > 0.5")
        return ((measured - 0.5) / (base - 0.5) - 1.0) * 100.0
    if kind == "revenue_like":
        if base <= 0:
            raise UndefinedMetricError("revenue-like RelaImpr needs base > 0")
        return (measured / base - 1.0) * 100.0
    raise ValueError(f"unknown RelaImpr kind {kind!r}")


METRIC_KINDS = {"auc": "auc_like", "cs_auc": "auc_like", "rev": "revenue_like", "rev_ndcg": "revenue_like"}


# ----------------------------------------------------------------- terciles
TERCILES = ("low", "medium", "high")


def bid_tercile_distribution(s: ScoredSet) -> dict:
    """Share of group winners whose bid falls in each tercile of the test bids.

    Edges are the 1/3 and 2/3 quantiles; ``low`` is below the first edge,
    ``high`` at or above the second.  With all bids equal every winner is
    ``high``.
    """
    q1, q2 = np.quantile(s.bid, [1 / 3, 2 / 3])
    winners = revenue(s).winners
    wb = s.bid[winners[winners >= 0]]
    if len(wb) == 0:
        raise UndefinedMetricError("no groups")
    counts = {
        "low": int(np.sum(wb < q1)),
        "medium": int(np.sum((wb >= q1) & (wb < q2))),
        "high": int(np.sum(wb >= q2)),
    }
    return {k: counts[k] / len(wb) for k in TERCILES}


# ------------------------------------------------------------------- report
@dataclass
class MetricsReport:
    auc: float
    cs_auc: float
    rev: float
    rev_ndcg: float
    predicted_bias: float
    n_groups: int
    n_pairs: int
    rev_div1000: float = 0.0
    tercile_shares: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(s: ScoredSet, segments: dict | None = None) -> MetricsReport:
    """All scalar metrics on one scored set.  ``segments`` maps a name to a
    boolean mask; each gets its own predicted bias."""
    num, den, n_pairs = cs_auc_terms(s)
    if n_pairs == 0 or den == 0:
        raise UndefinedMetricError("csAUC undefined on this set")
    r = revenue(s)
    if r.rev_max == 0:
        raise UndefinedMetricError("Rev NDCG undefined on this set")
    seg = {}
    for name, mask in (segments or {}).items():
        seg[name] = {"predicted_bias": predicted_bias(s.pctr[mask], s.y[mask]), "n": int(mask.sum())}
    return MetricsReport(
        auc=auc(s.pctr, s.y),
        cs_auc=num / den,
        rev=r.rev,
        rev_ndcg=r.rev / r.rev_max,
        predicted_bias=predicted_bias(s.pctr, s.y),
        n_groups=s.n_groups(),
        n_pairs=n_pairs,
        rev_div1000=r.rev / 1000.0,
        tercile_shares=bid_tercile_distribution(s),
        segments=seg,
    )
