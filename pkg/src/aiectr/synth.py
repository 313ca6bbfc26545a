"""Synthetic second-price auction world with a known click model.

Each auction draws a request ``(user, context, slot, weekday, hour)``, a
per-request user-intent shock and ``n_candidates`` candidate ads, each with
its own ad-request match shock.  Click probability of an impression is::

    p_imp = sigmoid(logit(user, ad, context) + intent + match)

The platform ranks its candidates by ``p_imp * bid`` (an accurate ranker) and
the best candidate is exposed only if its eCPM beats the strongest competing
DSP.  Competitor eCPM is lognormal per slot, with its location tilted by the
request's click quality ``user_bias + context_bias + intent`` (so market
price rises with CTR).  The charge is ``competitor_eCPM / p_imp`` clipped to
``[0, bid]``.

Two selection forces shape the log.  Normal bidders win the platform ranking
only with a strong match, which pulls their logged CTR up.  Competitors buy
the high-intent requests, which pulls every logged CTR down, and inflated
bidders no longer need a good match to win, so for them the downward pull
dominates.  With both shock scales set to 0 the world reduces to a plain
linear-logistic CTR model in which only the mix of exposed triples is
selected.

``true_ctr(user, ad, context)`` is the population CTR of a triple, i.e. the
impression CTR averaged over both shocks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, FeatureSchema
from .tensor import derive_rng

CHUNK = 4096


class SynthError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_ads: int = 60
    n_users: int = 300
    n_contexts: int = 30
    n_scenarios: int = 40
    n_weekdays: int = 7
    n_hours: int = 24
    true_model_seed: int = 0
    n_auctions: int = 450_000
    n_candidates: int = 6
    # click model
    base_logit: float = -3.0
    main_effect_std: float = 0.5
    interaction_rank: int = 4
    interaction_std: float = 0.5
    intent_std: float = 1.5
    match_std: float = 1.0
    # bids (currency units)
    bid_mu: float = 0.0
    bid_sigma: float = 0.6
    high_bid_fraction: float = 0.2
    bid_inflation_factor: float = 10.0
    # competing DSPs: log eCPM ~ N(mu_s + rho * elasticity * quality, sigma_s)
    competitor_mu: list | None = None  # per scenario; default derived from base_logit and the seed
    competitor_mu_offset: float = 1.0
    competitor_mu_spread: float = 0.3
    competitor_sigma: list | float = 0.3
    price_ctr_correlation: float = 0.9
    competitor_elasticity: float = 9.0

    def __post_init__(self):
        counts = ("n_ads", "n_users", "n_contexts", "n_scenarios", "n_weekdays", "n_hours",
                  "n_auctions", "n_candidates")
        bad = [c for c in counts if int(getattr(self, c)) < 1]
        if bad:
            raise SynthError(f"counts must be >= 1: {bad}")
        if not 0 <= self.high_bid_fraction <= 1:
            raise SynthError("high_bid_fraction must be in [0, 1]")
        if not 0 <= self.price_ctr_correlation <= 1:
            raise SynthError("price_ctr_correlation must be in [0, 1]")
        if self.bid_sigma <= 0 or np.any(np.asarray(self.competitor_sigma) <= 0):
            raise SynthError("lognormal sigmas must be > 0")
        if self.bid_inflation_factor <= 0:
            raise SynthError("bid_inflation_factor must be > 0")
        if self.intent_std < 0 or self.match_std < 0:
            raise SynthError("shock standard deviations must be >= 0")
        if self.competitor_mu is not None and len(self.competitor_mu) != self.n_scenarios:
            raise SynthError("competitor_mu needs one entry per scenario")

    def to_dict(self) -> dict:
        return asdict(self)

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            (
                ("weekday", self.n_weekdays),
                ("hour", self.n_hours),
                ("slotid", self.n_scenarios),
                ("user", self.n_users),
                ("ad", self.n_ads),
                ("context", self.n_contexts),
            ),
            scenario_field="slotid",
        )


@dataclass
class GroundTruth:
    base_logit: float
    user_bias: np.ndarray
    ad_bias: np.ndarray
    context_bias: np.ndarray
    user_vec: np.ndarray
    ad_vec: np.ndarray
    context_vec: np.ndarray
    shock_std: float
    _gh: tuple = field(default=None, repr=False)

    def logit(self, user, ad, context) -> np.ndarray:
        user, ad, context = (np.asarray(v, dtype=np.int64) for v in (user, ad, context))
        return (
            self.base_logit
            + self.user_bias[user]
            + self.ad_bias[ad]
            + self.context_bias[context]
            + np.einsum("...d,...d->...", self.user_vec[user] + self.context_vec[context], self.ad_vec[ad])
        )

    def true_ctr(self, user, ad, context) -> np.ndarray:
        """Population CTR of each triple: ``E[sigmoid(logit + z)]``, ``z ~ N(0, shock_std^2)``."""
        for name, idx, n in (("user", user, len(self.user_bias)), ("ad", ad, len(self.ad_bias)),
                             ("context", context, len(self.context_bias))):
            idx = np.asarray(idx)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"{name} index outside [0, {n})")
        l = self.logit(user, ad, context)
        if self.shock_std == 0:
            return expit(l)
        if self._gh is None:
            x, w = np.polynomial.hermite_e.hermegauss(64)
            self._gh = (x, w / w.sum())
        x, w = self._gh
        return np.tensordot(expit(l[..., None] + self.shock_std * x), w, axes=([-1], [0]))


@dataclass
class World:
    config: WorldConfig
    truth: GroundTruth
    base_bid: np.ndarray  # per ad, before inflation
    high_bid: np.ndarray  # bool per ad
    competitor_mu: np.ndarray
    competitor_sigma: np.ndarray

    @property
    def bid(self) -> np.ndarray:
        return self.base_bid * np.where(self.high_bid, self.config.bid_inflation_factor, 1.0)

    def true_ctr(self, user, ad, context):
        return self.truth.true_ctr(user, ad, context)


def build_world(cfg: WorldConfig) -> World:
    seed = cfg.true_model_seed
    rng = derive_rng(seed, "truth")
    r = cfg.interaction_rank
    truth = GroundTruth(
        cfg.base_logit,
        rng.normal(0, cfg.main_effect_std, cfg.n_users),
        rng.normal(0, cfg.main_effect_std, cfg.n_ads),
        rng.normal(0, cfg.main_effect_std, cfg.n_contexts),
        rng.normal(0, cfg.interaction_std, (cfg.n_users, r)),
        rng.normal(0, cfg.interaction_std, (cfg.n_ads, r)),
        rng.normal(0, cfg.interaction_std, (cfg.n_contexts, r)),
        float(np.hypot(cfg.intent_std, cfg.match_std)),
    )
    brng = derive_rng(seed, "bids")
    base_bid = np.exp(brng.normal(cfg.bid_mu, cfg.bid_sigma, cfg.n_ads))
    high = np.zeros(cfg.n_ads, dtype=bool)
    n_high = int(round(cfg.high_bid_fraction * cfg.n_ads))
    high[brng.permutation(cfg.n_ads)[:n_high]] = True
    crng = derive_rng(seed, "competitors")
    if cfg.competitor_mu is None:
        mu = np.log(expit(cfg.base_logit)) + cfg.bid_mu + cfg.competitor_mu_offset + crng.normal(0, cfg.competitor_mu_spread, cfg.n_scenarios)
    else:
        mu = np.asarray(cfg.competitor_mu, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(cfg.competitor_sigma, dtype=np.float64), (cfg.n_scenarios,)).copy()
    return World(cfg, truth, base_bid, high, mu, sigma)


def _draw_requests(world: World, rng: np.random.Generator, n: int, n_cand: int) -> dict:
    cfg = world.config
    return {
        "user": rng.integers(0, cfg.n_users, n),
        "context": rng.integers(0, cfg.n_contexts, n),
        "slot": rng.integers(0, cfg.n_scenarios, n),
        "weekday": rng.integers(0, cfg.n_weekdays, n),
        "hour": rng.integers(0, cfg.n_hours, n),
        "ads": rng.integers(0, cfg.n_ads, (n, n_cand)),
        "intent": rng.normal(0, cfg.intent_std, n) if cfg.intent_std else np.zeros(n),
        "match": rng.normal(0, cfg.match_std, (n, n_cand)) if cfg.match_std else np.zeros((n, n_cand)),
        "comp_noise": rng.normal(0, 1, n),
        "click_u": rng.random(n),
    }


def _competitor_ecpm(world: World, req: dict) -> np.ndarray:
    cfg, t = world.config, world.truth
    quality = t.user_bias[req["user"]] + t.context_bias[req["context"]] + req["intent"]
    s = req["slot"]
    tilt = cfg.price_ctr_correlation * cfg.competitor_elasticity * quality
    return np.exp(world.competitor_mu[s] + tilt + world.competitor_sigma[s] * req["comp_noise"])


def _run_chunk(world: World, req: dict, bids: np.ndarray) -> dict:
    t = world.truth
    user, context, ads = req["user"], req["context"], req["ads"]
    base = t.logit(user[:, None], ads, context[:, None])
    p_imp = expit(base + req["intent"][:, None] + req["match"])
    ecpm = p_imp * bids[ads]
    k = ecpm.argmax(axis=1)
    rows = np.arange(len(k))
    ad = ads[rows, k]
    p = p_imp[rows, k]
    comp = _competitor_ecpm(world, req)
    exposed = ecpm[rows, k] >= comp
    bid = bids[ad]
    return {
        "ad": ad,
        "p_imp": p,
        "bid": bid,
        "payprice": np.clip(comp / p, 0.0, bid),
        "click": (req["click_u"] < p).astype(np.float64),
        "exposed": exposed,
    }


def simulate_auctions(world: World, seed: int, bids: np.ndarray | None = None) -> dict:
    """Run every auction; randomness per chunk derives from ``(seed, chunk index)``
    so the result does not depend on evaluation order.  ``bids`` overrides the
    per-ad bids while keeping all other draws (common random numbers)."""
    cfg = world.config
    bids = world.bid if bids is None else np.asarray(bids, dtype=np.float64)
    out = []
    for start in range(0, cfg.n_auctions, CHUNK):
        n = min(CHUNK, cfg.n_auctions - start)
        rng = derive_rng(seed, f"auction-chunk-{start // CHUNK}")
        req = _draw_requests(world, rng, n, cfg.n_candidates)
        res = _run_chunk(world, req, bids)
        res.update({k: req[k] for k in ("user", "context", "slot", "weekday", "hour")})
        out.append(res)
    return {k: np.concatenate([o[k] for o in out]) for k in out[0]}


def _to_dataset(world: World, sim: dict, mask: np.ndarray, split_tag: str) -> Dataset:
    cfg = world.config
    X = np.stack([sim["weekday"], sim["hour"], sim["slot"], sim["user"], sim["ad"], sim["context"]], axis=1)[mask]
    meta = {
        "true_ctr": world.true_ctr(sim["user"][mask], sim["ad"][mask], sim["context"][mask]),
        "p_imp": sim["p_imp"][mask],
        "high_bid": world.high_bid[sim["ad"][mask]],
    }
    return Dataset(cfg.schema(), X, sim["click"][mask], sim["bid"][mask], sim["payprice"][mask], split_tag, meta)


def generate_biased_log(cfg: WorldConfig, seed: int = 0, world: World | None = None) -> Dataset:
    """Exposed impressions only, in auction order."""
    world = world or build_world(cfg)
    sim = simulate_auctions(world, seed)
    if not sim["exposed"].any():
        raise SynthError(
            "no auction was won; lower competitor_mu, raise bids or reduce competitor_elasticity"
        )
    return _to_dataset(world, sim, sim["exposed"], "train")


def generate_unbiased_log(cfg: WorldConfig, n: int, seed: int = 0, world: World | None = None) -> Dataset:
    """Impressions over uniformly random (user, ad, context) with no auction gate.

    Each row still carries the second-price charge it would incur against the
    competing DSPs, so revenue metrics are defined on this set.
    """
    world = world or build_world(cfg)
    rng = derive_rng(seed, "unbiased")
    req = _draw_requests(world, rng, n, 1)
    res = _run_chunk(world, req, world.bid)
    sim = {**res, **{k: req[k] for k in ("user", "context", "slot", "weekday", "hour")}}
    return _to_dataset(world, sim, np.ones(n, dtype=bool), "unbiased_test")


def auction_bias_gap(cfg: WorldConfig, seed: int = 0, world: World | None = None) -> dict:
    """Logged CTR of each ad group minus the expected CTR the same ads get when
    nobody inflates (same random draws, base bids).  Keys ``high`` / ``normal``."""
    world = world or build_world(cfg)
    biased = simulate_auctions(world, seed)
    target = simulate_auctions(world, seed, bids=world.base_bid)
    out = {}
    for name, group in (("high", world.high_bid), ("normal", ~world.high_bid)):
        mb = biased["exposed"] & group[biased["ad"]]
        mt = target["exposed"] & group[target["ad"]]
        if not mb.any() or not mt.any():
            continue
        out[name] = {
            "logged_ctr": float(biased["click"][mb].mean()),
            "target_ctr": float(target["p_imp"][mt].mean()),
            "gap": float(biased["click"][mb].mean() - target["p_imp"][mt].mean()),
            "n_logged": int(mb.sum()),
            "n_target": int(mt.sum()),
        }
    return out
