"""Adaptive market-price auxiliary tower.

A small MLP regresses the (log1p) market price from the backbone's last
hidden representation ``h0``.  Its weights are not free parameters: each
scenario owns an embedding, a single affine projection maps that embedding to
a flat vector of ``param_count`` numbers, and the vector is split and
reshaped into the tower's layers.

Flat layout, per layer k = 1..N: ``W_k`` (shape ``[d_k, d_{k-1}]``,
row-major) followed by ``b_k`` (shape ``[d_k]``).  Checkpoints depend on this
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, ParameterStore, seeded_init


@dataclass
class AM2Config:
    enabled: bool = False
    w: float = 1e-4
    tower_widths: list = field(default_factory=lambda: [16])  # hidden widths; output width 1 is implicit
    scenario_field: str = "slotid"
    scen_dim: int = 8
    dynamic: bool = True  # False: one static tower shared by every scenario
    target: str = "log1p"  # or "raw"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"am2.w must be >= 0, got {self.w}")
        if self.target not in ("log1p", "raw"):
            raise ValueError(f"am2.target must be 'log1p' or 'raw', got {self.target!r}")


@dataclass(frozen=True)
class DynamicTowerSpec:
    layer_widths: tuple  # (d_0, d_1, ..., d_N = 1)

    def __post_init__(self):
        widths = tuple(int(d) for d in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
            raise ValueError(f"tower widths must be positive and end in 1, got {widths}")

    @classmethod
    def build(cls, d0: int, hidden) -> "DynamicTowerSpec":
        return cls((d0, *hidden, 1))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def param_count(self) -> int:
        d = self.layer_widths
        return sum(d[k] * d[k - 1] + d[k] for k in range(1, len(d)))

    def boundaries(self) -> list:
        """Cumulative end offsets of W_1, b_1, W_2, b_2, ... in the flat vector."""
        d, out, pos = self.layer_widths, [], 0
        for k in range(1, len(d)):
            pos += d[k] * d[k - 1]
            out.append(pos)
            pos += d[k]
            out.append(pos)
        return out


def split_params(theta: np.ndarray, spec: DynamicTowerSpec) -> list:
    """Reshape a flat ``[..., param_count]`` vector into ``[(W_k, b_k), ...]``.

    Leading batch dimensions are carried through, so a ``[B, param_count]``
    input yields per-sample ``W_k`` of shape ``[B, d_k, d_{k-1}]``.
    """
    if theta.shape[-1] != spec.param_count:
        raise ValueError(
            f"generated vector has {theta.shape[-1]} entries but the tower needs {spec.param_count}"
        )
    lead = theta.shape[:-1]
    d = spec.layer_widths
    layers, pos = [], 0
    for k in range(1, len(d)):
        n_w = d[k] * d[k - 1]
        W = theta[..., pos:pos + n_w].reshape(*lead, d[k], d[k - 1])
        pos += n_w
        b = theta[..., pos:pos + d[k]]
        pos += d[k]
        layers.append((W, b))
    return layers


def init_hypernet(store: ParameterStore, n_scenarios: int, spec: DynamicTowerSpec, cfg: AM2Config, seed: int) -> None:
    store.add("am2/scen_emb", seeded_init((n_scenarios, cfg.scen_dim), seed=seed, name="am2/scen_emb"))
    if cfg.dynamic:
        store.add("am2/proj_W", seeded_init((spec.param_count, cfg.scen_dim), seed=seed, name="am2/proj_W"))
        store.add("am2/proj_b", np.zeros(spec.param_count))
    else:
        store.add("am2/static_theta", _static_tower_init(spec, seed))


def _static_tower_init(spec: DynamicTowerSpec, seed: int) -> np.ndarray:
    parts = []
    d = spec.layer_widths
    for k in range(1, len(d)):
        parts.append(seeded_init((d[k], d[k - 1]), seed=seed, name=f"am2/static_W{k}").ravel())
        parts.append(np.zeros(d[k]))
    return np.concatenate(parts)


def hypernet_output(store: ParameterStore, scenario: np.ndarray) -> np.ndarray:
    """Flat tower parameters for each entry of ``scenario`` (``[B, param_count]``)."""
    scenario = np.asarray(scenario, dtype=np.int64)
    if "am2/static_theta" in store:
        theta = store["am2/static_theta"]
        return np.broadcast_to(theta, (len(scenario), theta.size))
    emb = store["am2/scen_emb"]
    if scenario.size and (scenario.min() < 0 or scenario.max() >= emb.shape[0]):
        raise IndexError(f"scenario index outside [0, {emb.shape[0]})")
    return emb[scenario] @ store["am2/proj_W"].T + store["am2/proj_b"]


def generate_tower(store: ParameterStore, scenario_index: int, spec: DynamicTowerSpec) -> list:
    theta = hypernet_output(store, np.array([scenario_index]))[0]
    return split_params(theta, spec)


def price_forward(tower: list, h0: np.ndarray) -> float:
    """Single-sample tower evaluation: relu hidden layers, identity output."""
    h = np.asarray(h0, dtype=np.float64)
    if h.shape != (tower[0][0].shape[1],):
        raise DimensionError("price_forward", tower[0][0].shape, h.shape)
    for k, (W, b) in enumerate(tower):
        z = W @ h + b
        h = z if k == len(tower) - 1 else np.maximum(z, 0.0)
    return float(h[0])


def price_forward_batch(theta: np.ndarray, h0: np.ndarray, spec: DynamicTowerSpec):
    """Per-sample towers applied to ``h0`` (``[B, d_0]``); returns ``(y_hat, cache)``."""
    if h0.shape[-1] != spec.layer_widths[0]:
        raise DimensionError("price_forward_batch", h0.shape, spec.layer_widths)
    layers = split_params(theta, spec)
    acts, pre = [h0], []
    h = h0
    for k, (W, b) in enumerate(layers):
        z = np.einsum("bij,bj->bi", W, h) + b
        pre.append(z)
        h = z if k == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return h[:, 0], {"layers": layers, "acts": acts, "pre": pre}


def price_backward_batch(cache: dict, dy: np.ndarray):
    """Returns ``(dtheta [B, param_count], dh0 [B, d_0])``."""
    layers, acts, pre = cache["layers"], cache["acts"], cache["pre"]
    g = dy[:, None]
    parts = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k != len(layers) - 1:
            g = g * (pre[k] > 0)
        dW = g[:, :, None] * acts[k][:, None, :]
        parts.append((dW.reshape(len(g), -1), g))
        g = np.einsum("bij,bi->bj", W, g)
    flat = []
    for dW, db in reversed(parts):
        flat += [dW, db]
    return np.concatenate(flat, axis=1), g


def hypernet_backward(store: ParameterStore, scenario: np.ndarray, dtheta: np.ndarray) -> dict:
    """Chain ``dL/dtheta`` into the projection and scenario-embedding gradients."""
    from . import kernels

    if "am2/static_theta" in store:
        return {"am2/static_theta": dtheta.sum(axis=0),
                "am2/scen_emb": np.zeros_like(store["am2/scen_emb"])}
    emb = store["am2/scen_emb"]
    e = emb[scenario]
    grads = {
        "am2/proj_W": dtheta.T @ e,
        "am2/proj_b": dtheta.sum(axis=0),
    }
    d_emb = np.zeros_like(emb)
    kernels.scatter_add_rows(d_emb, np.ascontiguousarray(scenario, dtype=np.int64),
                             np.ascontiguousarray(dtheta @ store["am2/proj_W"]))
    grads["am2/scen_emb"] = d_emb
    return grads


def price_target(payprice: np.ndarray, cfg: AM2Config) -> np.ndarray:
    return np.log1p(payprice) if cfg.target == "log1p" else np.asarray(payprice, dtype=np.float64)


def price_report(y_hat: np.ndarray, cfg: AM2Config) -> np.ndarray:
    """Tower output mapped back to currency units, floored at 0."""
    raw = np.expm1(y_hat) if cfg.target == "log1p" else y_hat
    return np.maximum(raw, 0.0)


def mae_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DimensionError("mae_loss", y_hat.shape, y.shape)
    return float(np.mean(np.abs(y_hat - y)))


def mae_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return np.sign(y_hat - y) / len(y)


def joint_loss(l_ctr: float, l_price: float, w: float) -> float:
    if w < 0:
        raise ValueError("w must be >= 0")
    return l_ctr + w * l_price
