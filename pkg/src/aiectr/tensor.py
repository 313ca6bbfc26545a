"""Dense float64 math used by every tower: affine maps, activations, init, Adam.

Arrays are plain ``numpy.ndarray`` objects with dtype float64.  Shapes follow
the ``W[out, in]`` convention so a single-sample affine map is ``W @ x + b``;
batched callers pass ``x`` as ``[batch, in]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-15

ACTIVATIONS = ("relu", "sigmoid", "identity")


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""

    def __init__(self, op: str, *shapes):
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


class DivergenceError(FloatingPointError):
    """A non-finite gradient or loss was produced."""


def affine_forward(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[..., i] = sum_j W[i, j] * x[..., j] + b[i]``.

    ``x`` may be a single vector or a ``[batch, in]`` matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1:] != W.shape[1:] or b.shape != W.shape[:1]:
        raise DimensionError("affine_forward", W.shape, x.shape, b.shape)
    return x @ W.T + b


def affine_backward(W: np.ndarray, x: np.ndarray, dout: np.ndarray):
    """Gradients of a batched affine map; returns ``(dW, dx, db)``."""
    return dout.T @ x, dout @ W, dout.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, PROB_FLOOR, 1.0 - PROB_FLOOR)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return np.array(x, dtype=np.float64)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(x: np.ndarray, kind: str, dout: np.ndarray) -> np.ndarray:
    """Backprop ``dout`` through ``activation(x, kind)`` evaluated at pre-activation ``x``."""
    if kind == "relu":
        return dout * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return dout * s * (1.0 - s)
    if kind == "identity":
        return dout
    raise ValueError(f"unknown activation {kind!r}")


def _seed_for(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per ``(seed, name)`` so adding a parameter group
    never shifts the random stream of another."""
    return np.random.default_rng(_seed_for(seed, name))


def seeded_init(shape, scheme: str = "uniform_glorot", seed: int = 0, name: str = "") -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"seeded_init needs a nonempty positive shape, got {shape}")
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme != "uniform_glorot":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return derive_rng(seed, name).uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, l2: float = 0.0) -> np.ndarray:
    """Bias-corrected Adam update, in place on ``param`` and ``state``.

    ``l2`` adds ``l2 * param`` to the gradient (coupled weight decay).
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError("adam_step", param.shape, grad.shape, state.m.shape)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at Adam step {state.t + 1}")
    if l2:
        grad = grad + l2 * param
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


@dataclass
class ParameterStore:
    """Named trainable arrays plus their Adam moments.

    ``version`` increments on every optimizer step; forward caches record it so
    a backward pass against updated parameters is refused.
    """

    params: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            params={k: v.copy() for k, v in self.params.items()},
            optim={
                k: AdamState(s.m.copy(), s.v.copy(), s.t, s.lr, s.beta1, s.beta2, s.eps)
                for k, s in self.optim.items()
            },
            version=self.version,
        )

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def step(self, grads: dict, lr: float, l2: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        for name, g in grads.items():
            state = self.optim.get(name)
            if state is None:
                state = self.optim[name] = AdamState.like(
                    self.params[name], lr=lr, beta1=betas[0], beta2=betas[1], eps=eps
                )
            state.lr = lr
            adam_step(self.params[name], g, state, l2=l2)
        self.version += 1
