"""Backbone CTR models with hand-written backward passes.

Two backbones share one embedding table per categorical field:

* ``dnn``      -- concatenated embeddings -> relu MLP -> ``h0``
* ``crossnet`` -- concatenated embeddings -> cross layers
  (``x_{l+1} = x_0 * (x_l . w_l) + b_l + x_l``) -> relu MLP -> ``h0``

``h0`` (the last hidden layer) feeds the CTR head and, when enabled, the
market-price tower from :mod:`aiectr.am2`.  With zero cross layers the
crossnet backbone is exactly the dnn backbone.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import am2 as am2_mod
from . import kernels
from .data import Dataset, FeatureSchema
from .tensor import DivergenceError, ParameterStore, derive_rng, seeded_init, sigmoid, PROB_FLOOR

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from an earlier parameter version."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, msg: str):
        self.last_good_step = step
        super().__init__(f"{msg} (last good step {step})")


@dataclass
class BackboneConfig:
    kind: str = "dnn"
    hidden_layers: list = field(default_factory=lambda: [64, 32])
    n_cross_layers: int = 0
    embed_dim: int = 8
    head_layers: list = field(default_factory=list)  # hidden widths of the CTR head; output width 1 implicit

    def __post_init__(self):
        if self.kind not in ("dnn", "crossnet"):
            raise ValueError(f"backbone kind must be 'dnn' or 'crossnet', got {self.kind!r}")
        if any(int(w) < 1 for w in list(self.hidden_layers) + list(self.head_layers)):
            raise ValueError("layer widths must be >= 1")
        if self.embed_dim < 1 or self.n_cross_layers < 0:
            raise ValueError("embed_dim must be >= 1 and n_cross_layers >= 0")
        if self.kind == "dnn" and self.n_cross_layers:
            raise ValueError("n_cross_layers is only meaningful for the crossnet backbone")


@dataclass
class ForwardOutput:
    pctr: np.ndarray
    logit: np.ndarray
    h0: np.ndarray
    price: np.ndarray | None
    cache: dict


class CTRModel:
    def __init__(self, schema: FeatureSchema, backbone: BackboneConfig, am2: am2_mod.AM2Config | None = None):
        self.schema = schema
        self.backbone = backbone
        self.am2 = am2 or am2_mod.AM2Config(enabled=False)
        self.n_fields = len(schema.categorical_fields)
        self.input_dim = self.n_fields * backbone.embed_dim
        self.h0_dim = backbone.hidden_layers[-1] if backbone.hidden_layers else self.input_dim
        self.tower_spec = None
        if self.am2.enabled:
            if self.am2.scenario_field not in schema.field_names:
                raise ValueError(f"am2.scenario_field {self.am2.scenario_field!r} not in schema")
            self.tower_spec = am2_mod.DynamicTowerSpec.build(self.h0_dim, self.am2.tower_widths)
            self.scen_col = schema.index(self.am2.scenario_field)

    # ------------------------------------------------------------------ params
    def init_params(self, seed: int) -> ParameterStore:
        """Every group draws from its own ``(seed, name)`` stream, so enabling
        the price tower never perturbs the backbone's initial values."""
        store = ParameterStore()
        d = self.backbone.embed_dim
        for name, card in self.schema.categorical_fields:
            store.add(f"emb/{name}", seeded_init((card, d), seed=seed, name=f"emb/{name}"))
        for l in range(self.backbone.n_cross_layers):
            store.add(f"cross/w{l}", seeded_init((self.input_dim,), seed=seed, name=f"cross/w{l}"))
            store.add(f"cross/b{l}", np.zeros(self.input_dim))
        width = self.input_dim
        for k, h in enumerate(self.backbone.hidden_layers):
            store.add(f"deep/W{k}", seeded_init((h, width), seed=seed, name=f"deep/W{k}"))
            store.add(f"deep/b{k}", np.zeros(h))
            width = h
        for k, h in enumerate(list(self.backbone.head_layers) + [1]):
            store.add(f"head/W{k}", seeded_init((h, width), seed=seed, name=f"head/W{k}"))
            store.add(f"head/b{k}", np.zeros(h))
            width = h
        if self.am2.enabled:
            am2_mod.init_hypernet(store, self.schema.cardinalities[self.scen_col], self.tower_spec, self.am2, seed)
        return store

    # ----------------------------------------------------------------- forward
    def _check_indices(self, X: np.ndarray) -> None:
        if X.ndim != 2 or X.shape[1] != self.n_fields:
            raise ValueError(f"expected [batch, {self.n_fields}] indices, got {X.shape}")
        if len(X) == 0:
            raise ValueError("empty batch")
        for j, (name, card) in enumerate(self.schema.categorical_fields):
            col = X[:, j]
            if col.min() < 0 or col.max() >= card:
                raise IndexError(f"field {name!r}: index outside [0, {card})")

    def _backbone_forward(self, store: ParameterStore, X: np.ndarray):
        embs = [store[f"emb/{name}"][X[:, j]] for j, name in enumerate(self.schema.field_names)]
        x0 = np.concatenate(embs, axis=1)
        cache = {"X": X, "x0": x0, "cross_in": [], "cross_s": [], "deep_in": [], "deep_z": []}
        x = x0
        for l in range(self.backbone.n_cross_layers):
            s = x @ store[f"cross/w{l}"]
            cache["cross_in"].append(x)
            cache["cross_s"].append(s)
            x = x0 * s[:, None] + store[f"cross/b{l}"] + x
        for k in range(len(self.backbone.hidden_layers)):
            cache["deep_in"].append(x)
            z = x @ store[f"deep/W{k}"].T + store[f"deep/b{k}"]
            cache["deep_z"].append(z)
            x = np.maximum(z, 0.0)
        return x, cache

    def _head_forward(self, store: ParameterStore, h0: np.ndarray):
        x = h0
        ins, zs = [], []
        n = len(self.backbone.head_layers) + 1
        for k in range(n):
            ins.append(x)
            z = x @ store[f"head/W{k}"].T + store[f"head/b{k}"]
            zs.append(z)
            x = np.maximum(z, 0.0) if k < n - 1 else z
        return x[:, 0], {"head_in": ins, "head_z": zs}

    def forward(self, store: ParameterStore, X: np.ndarray, payprice: np.ndarray | None = None,
                with_price: bool = True) -> ForwardOutput:
        """Training-time forward.  The price tower only runs when AM2 is enabled
        and ``with_price`` is set; ``payprice`` is never read here (targets are
        consumed by the loss)."""
        X = np.asarray(X, dtype=np.int64)
        self._check_indices(X)
        h0, cache = self._backbone_forward(store, X)
        logit, head_cache = self._head_forward(store, h0)
        cache.update(head_cache)
        cache["store"] = store
        cache["version"] = store.version
        price = None
        if self.am2.enabled and with_price:
            scen = X[:, self.scen_col]
            theta = am2_mod.hypernet_output(store, scen)
            price, pcache = am2_mod.price_forward_batch(theta, h0, self.tower_spec)
            cache["price"] = pcache
            cache["scen"] = scen
        return ForwardOutput(sigmoid(logit), logit, h0, price, cache)

    def predict(self, store: ParameterStore, X: np.ndarray, batch_size: int = 65536) -> np.ndarray:
        """Serving path: categorical features in, pCTR out.  Auction features
        are not an input and the price tower is never evaluated."""
        X = np.asarray(X, dtype=np.int64)
        out = []
        for start in range(0, len(X), batch_size):
            xb = X[start:start + batch_size]
            self._check_indices(xb)
            h0, _ = self._backbone_forward(store, xb)
            logit, _ = self._head_forward(store, h0)
            out.append(sigmoid(logit))
        return np.concatenate(out) if out else np.zeros(0)

    # ---------------------------------------------------------------- backward
    def backward(self, cache: dict, dlogit: np.ndarray, dprice: np.ndarray | None = None) -> dict:
        """Gradients for every parameter given ``dL/dlogit`` and, when the
        price tower ran, ``dL/dprice`` (already scaled by the joint-loss weight)."""
        store = cache["store"]
        if cache["version"] != store.version:
            raise StaleCacheError(
                f"cache from parameter version {cache['version']}, store is at {store.version}"
            )
        grads = {}
        g = dlogit[:, None]
        n_head = len(self.backbone.head_layers) + 1
        for k in range(n_head - 1, -1, -1):
            if k < n_head - 1:
                g = g * (cache["head_z"][k] > 0)
            W = store[f"head/W{k}"]
            grads[f"head/W{k}"] = g.T @ cache["head_in"][k]
            grads[f"head/b{k}"] = g.sum(axis=0)
            g = g @ W
        dh0 = g

        if "price" in cache:
            if dprice is None:
                dprice = np.zeros(len(dlogit))
            dtheta, dh0_price = am2_mod.price_backward_batch(cache["price"], dprice)
            dh0 = dh0 + dh0_price
            grads.update(am2_mod.hypernet_backward(store, cache["scen"], dtheta))
        elif self.am2.enabled:
            for name in store.names():
                if name.startswith("am2/"):
                    grads[name] = np.zeros_like(store[name])

        g = dh0
        for k in range(len(self.backbone.hidden_layers) - 1, -1, -1):
            g = g * (cache["deep_z"][k] > 0)
            grads[f"deep/W{k}"] = g.T @ cache["deep_in"][k]
            grads[f"deep/b{k}"] = g.sum(axis=0)
            g = g @ store[f"deep/W{k}"]

        x0 = cache["x0"]
        dx0 = np.zeros_like(x0)
        for l in range(self.backbone.n_cross_layers - 1, -1, -1):
            x_in, s = cache["cross_in"][l], cache["cross_s"][l]
            w = store[f"cross/w{l}"]
            grads[f"cross/b{l}"] = g.sum(axis=0)
            ds = np.einsum("bi,bi->b", g, x0)
            grads[f"cross/w{l}"] = x_in.T @ ds
            dx0 += g * s[:, None]
            g = g + ds[:, None] * w[None, :]
        dx0 += g

        X = cache["X"]
        d = self.backbone.embed_dim
        for j, name in enumerate(self.schema.field_names):
            table = store[f"emb/{name}"]
            dE = np.zeros_like(table)
            kernels.scatter_add_rows(dE, np.ascontiguousarray(X[:, j]),
                                     np.ascontiguousarray(dx0[:, j * d:(j + 1) * d]))
            grads[f"emb/{name}"] = dE
        return grads


# -------------------------------------------------------------------- losses
def bce_loss(pctr: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Positive-weighted cross entropy, mean over the batch.

    ``-(1/B) sum_i [w_i y_i log p_i + (1 - y_i) log(1 - p_i)]``
    """
    p = np.clip(np.asarray(pctr, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("sample weights must be >= 0")
    return float(-np.sum(w * y * np.log(p) + (1.0 - y) * np.log1p(-p)) / len(y))


def bce_grad_logit(pctr: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """d bce_loss / d logit for ``pctr = sigmoid(logit)``."""
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    return (-w * y * (1.0 - pctr) + (1.0 - y) * pctr) / len(y)


# ------------------------------------------------------------------ training
@dataclass
class AdamConfig:
    lr: float = 1e-3
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LossSpec:
    """``weights`` aligns with the dataset rows (BCM output) or is None."""

    am2_w: float = 0.0
    weights: np.ndarray | None = None


@dataclass
class EpochStats:
    mean_loss: float
    mean_ctr_loss: float
    mean_price_loss: float
    steps: int


def loss_and_grads(model: CTRModel, store: ParameterStore, X, y, payprice, weights, am2_w: float):
    out = model.forward(store, X)
    l_ctr = bce_loss(out.pctr, y, weights)
    dlogit = bce_grad_logit(out.pctr, y, weights)
    l_price, dprice = 0.0, None
    if out.price is not None:
        target = am2_mod.price_target(payprice, model.am2)
        l_price = am2_mod.mae_loss(out.price, target)
        dprice = am2_w * am2_mod.mae_grad(out.price, target)
    grads = model.backward(out.cache, dlogit, dprice)
    return am2_mod.joint_loss(l_ctr, l_price, am2_w), l_ctr, l_price, grads


def train_epoch(model: CTRModel, store: ParameterStore, dataset: Dataset, loss_spec: LossSpec,
                optimizer: AdamConfig, batch_size: int = 2000, seed: int = 0) -> EpochStats:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    order = derive_rng(seed, "shuffle").permutation(len(dataset))
    weights = loss_spec.weights
    tot = ctr = price = 0.0
    steps = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        w = None if weights is None else weights[idx]
        loss, l_ctr, l_price, grads = loss_and_grads(
            model, store, dataset.X[idx], dataset.y[idx], dataset.payprice[idx], w, loss_spec.am2_w
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(store.version, "non-finite training loss")
        try:
            store.step(grads, optimizer.lr, optimizer.l2, (optimizer.beta1, optimizer.beta2), optimizer.eps)
        except DivergenceError as exc:
            raise TrainingDiverged(store.version, str(exc)) from None
        tot += loss * len(idx)
        ctr += l_ctr * len(idx)
        price += l_price * len(idx)
        steps += 1
    n = len(order)
    return EpochStats(tot / n, ctr / n, price / n, steps)


# --------------------------------------------------------------- checkpoints
def save_checkpoint(path, model: CTRModel, store: ParameterStore, extra: dict | None = None) -> None:
    """``<path>.json`` manifest plus ``<path>.npz`` with the float64 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "schema": model.schema.to_dict(),
        "backbone": asdict(model.backbone),
        "am2": asdict(model.am2),
        "param_version": store.version,
        "params": {k: list(v.shape) for k, v in store.params.items()},
        "extra": extra or {},
    }
    np.savez(path.with_suffix(".npz"), **{k.replace("/", "__"): v for k, v in store.params.items()})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    model = CTRModel(
        FeatureSchema.from_dict(manifest["schema"]),
        BackboneConfig(**manifest["backbone"]),
        am2_mod.AM2Config(**manifest["am2"]),
    )
    store = ParameterStore(version=manifest["param_version"])
    with np.load(path.with_suffix(".npz")) as arrays:
        for name, shape in manifest["params"].items():
            arr = arrays[name.replace("/", "__")]
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint array {name} has shape {arr.shape}, manifest says {shape}")
            store.params[name] = arr.astype(np.float64)
    return model, store, manifest.get("extra", {})
