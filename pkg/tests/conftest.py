import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aiectr.data import Dataset, FeatureSchema  # noqa: E402
from aiectr.model import loss_and_grads  # noqa: E402

import oracles  # noqa: E402

FD_EPS = 1e-6
FD_TOL = 1e-5

# The latent-free world: no intent or match shocks, so P(click | user, ad, context)
# is the plain linear-logistic model and only the mix of exposed triples is selected.
LATENT_FREE = dict(
    intent_std=0.0, match_std=0.0, competitor_elasticity=5.0, main_effect_std=0.3,
    interaction_std=0.2, bid_sigma=0.2, competitor_sigma=0.1, n_candidates=6, n_auctions=100_000,
)


def small_schema(cards=(3, 4, 5, 4), scenario="slotid") -> FeatureSchema:
    names = ("weekday", "hour", "slotid", "ad")
    return FeatureSchema(tuple(zip(names, cards)), scenario_field=scenario)


def random_dataset(rng, n, schema=None, pos_rate=0.4, split_tag="train") -> Dataset:
    schema = schema or small_schema()
    X = np.stack([rng.integers(0, c, n) for c in schema.cardinalities], axis=1)
    y = (rng.random(n) < pos_rate).astype(float)
    bid = rng.lognormal(0.0, 0.7, n)
    pay = bid * rng.random(n)
    return Dataset(schema, X, y, bid, pay, split_tag)


def randomize_biases(store, rng, scale=0.1):
    """Zero-initialized biases put every relu of an all-dead input exactly on
    its kink, where central differences are meaningless; a random
    configuration has nonzero biases."""
    for name in store.names():
        if "/b" in name or name == "am2/static_theta":
            store[name][...] += rng.normal(0, scale, store[name].shape)


def fd_check(model, store, X, y, payprice, weights=None, am2_w=0.0, max_entries=40, seed=0):
    """Relative error of the analytic gradient against central differences,
    per parameter group.  At most ``max_entries`` entries per group are probed.
    Biases are randomized first (see :func:`randomize_biases`)."""
    randomize_biases(store, np.random.default_rng(seed + 991))
    _, _, _, grads = loss_and_grads(model, store, X, y, payprice, weights, am2_w)

    def f():
        return loss_and_grads(model, store, X, y, payprice, weights, am2_w)[0]

    rng = np.random.default_rng(seed)
    errors = {}
    for name in store.names():
        arr = store[name]
        idx = list(np.ndindex(arr.shape))
        if len(idx) > max_entries:
            idx = [idx[i] for i in rng.choice(len(idx), max_entries, replace=False)]
        fd = oracles.central_diff(f, arr, FD_EPS, idx)
        sel = tuple(np.array(idx).T)
        errors[name] = oracles.rel_error(fd[sel], grads[name][sel])
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------- acceptance reporting
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ----------------------------------------------------------- tiny run configs
TINY_WORLD = dict(n_ads=20, n_users=40, n_contexts=8, n_scenarios=6, n_auctions=6_000)


def tiny_config(**sections) -> dict:
    """A run config small enough to train in well under a second per seed."""
    cfg = {
        "name": "tiny",
        "epochs": 2,
        "seeds": [0],
        "data": {"world": dict(TINY_WORLD), "unbiased_test_size": 3_000},
        "backbone": {"hidden_layers": [8], "embed_dim": 3},
        "am2": {"tower_widths": [4], "scen_dim": 3},
        "optim": {"lr": 5e-3, "batch_size": 256},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg
