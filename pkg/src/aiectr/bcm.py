"""Bid calibration: bid-driven weights for positive samples.

Per scene, positive-sample CPC bids are clipped to robust bounds (empirical
quantiles of the positives' bids), min-max scaled into ``[a, b]`` and then
multiplied by a per-scene normalizer so the mean positive weight is 1, which
keeps the weighted positive ratio equal to the raw one.  Negatives always get
weight 1.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

log = logging.getLogger(__name__)

GLOBAL_SCENE = -1


@dataclass
class SceneStats:
    lo: float
    hi: float
    normalizer: float
    n_pos: int
    degenerate: bool


@dataclass
class BcmStats:
    a: float
    b: float
    quantiles: tuple
    per_scene: bool
    scenes: dict = field(default_factory=dict)  # scene index -> SceneStats
    scene_field: str | None = None  # None: the schema's scenario field

    def scene_key(self, scenario: int) -> int:
        return int(scenario) if self.per_scene else GLOBAL_SCENE

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b, "quantiles": list(self.quantiles), "per_scene": self.per_scene,
            "scene_field": self.scene_field,
            "scenes": {str(k): vars(v) for k, v in sorted(self.scenes.items())},
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _unscaled(bid, a: float, b: float, lo: float, hi: float):
    clipped = np.clip(bid, lo, hi)
    t = (clipped - lo) / (hi - lo)
    return a * (1.0 - t) + b * t  # exact at both endpoints


def _scene_keys(dataset: Dataset, per_scene: bool, scene_field: str | None) -> np.ndarray:
    if not per_scene:
        return np.full(len(dataset), GLOBAL_SCENE)
    return dataset.scenario if scene_field is None else dataset.column(scene_field)


def fit_stats(train: Dataset, a: float = 0.5, b: float = 1.5, quantiles=(0.01, 0.99),
              per_scene: bool = True, min_positives: int = 10, scene_field: str | None = None) -> BcmStats:
    q_lo, q_hi = quantiles
    if a > b:
        raise ValueError(f"need a <= b, got a={a}, b={b}")
    if not 0 <= q_lo < q_hi <= 1:
        raise ValueError(f"need 0 <= q_lo < q_hi <= 1, got {quantiles}")
    pos = train.y == 1
    if not pos.any():
        raise ValueError("BCM needs at least one positive sample")
    keys = _scene_keys(train, per_scene, scene_field)
    stats = BcmStats(float(a), float(b), (float(q_lo), float(q_hi)), per_scene, scene_field=scene_field)
    for scene in np.unique(keys):
        bids = train.bid[pos & (keys == scene)]
        if len(bids) == 0:
            continue
        lo, hi = (float(v) for v in np.quantile(bids, [q_lo, q_hi]))
        degenerate = len(bids) < min_positives or not lo < hi
        if degenerate:
            norm = 1.0
        else:
            total = float(np.sum(_unscaled(bids, a, b, lo, hi)))
            if total <= 0:
                raise ValueError(f"scene {int(scene)}: every positive weight is zero (a={a}), "
                                 "so the normalizer is undefined")
            norm = len(bids) / total
        stats.scenes[int(scene)] = SceneStats(lo, hi, norm, int(len(bids)), degenerate)
    return stats


def weight_for(y: int, bid: float, scenario: int, stats: BcmStats, normalized: bool = True) -> float:
    """Weight of one sample; ``normalized=False`` gives the raw min-max value in ``[a, b]``."""
    if y != 1:
        return 1.0
    sc = stats.scenes.get(stats.scene_key(scenario))
    if sc is None or sc.degenerate:
        return 1.0
    alpha = float(_unscaled(bid, stats.a, stats.b, sc.lo, sc.hi))
    return alpha * sc.normalizer if normalized else alpha


def apply(dataset: Dataset, stats: BcmStats, return_unseen: bool = False):
    """Weight vector aligned with ``dataset`` rows."""
    w = np.ones(len(dataset))
    pos = dataset.y == 1
    keys = _scene_keys(dataset, stats.per_scene, stats.scene_field)
    unseen = 0
    for scene in np.unique(keys[pos]):
        m = pos & (keys == scene)
        sc = stats.scenes.get(int(scene))
        if sc is None:
            unseen += int(m.sum())
            continue
        if sc.degenerate:
            continue
        w[m] = _unscaled(dataset.bid[m], stats.a, stats.b, sc.lo, sc.hi) * sc.normalizer
    if unseen:
        log.warning("BCM: %d positive samples in scenes unseen at fit time got weight 1", unseen)
    return (w, unseen) if return_unseen else w


@dataclass
class IPSView:
    propensity: np.ndarray  # 1 / weight for kept samples
    kept: np.ndarray  # boolean mask of samples with weight > 0
    n_excluded: int


def ips_view(weights: np.ndarray) -> IPSView:
    """Read BCM weights as inverse propensities, ``p_i = 1 / alpha_i``."""
    weights = np.asarray(weights, dtype=np.float64)
    kept = weights > 0
    return IPSView(1.0 / weights[kept], kept, int((~kept).sum()))


def ips_loss(per_sample_loss: np.ndarray, view: IPSView) -> float:
    """``sum_i l_i / p_i`` over the kept samples."""
    return float(np.sum(per_sample_loss[view.kept] / view.propensity))
