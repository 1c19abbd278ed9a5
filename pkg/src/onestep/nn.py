"""Dense-network substrate: MLP forward/backward, Adam, seeded Gaussian streams.

Everything is float64. Random streams use numpy's counter-based Philox
bit generator; Gaussian draws go through numpy's ziggurat sampler, so a
(seed, stream) pair reproduces the same numbers on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")


class DimensionError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when an optimisation step would consume non-finite values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{what} contains NaN or Inf")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox stream keyed by ``(seed, *stream)``.

    Use the extra integers to derive independent per-worker or per-episode
    streams from one master seed.
    """
    keys = [int(seed)] + [int(s) for s in stream]
    if any(k < 0 for k in keys):
        raise ValidationError("seed and stream ids must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))


def gauss(rng: np.random.Generator, shape) -> np.ndarray:
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if len(shape) == 0:
        raise ValidationError("shape must be nonempty")
    return rng.standard_normal(shape)


def time_embedding(tau: np.ndarray, dim: int, max_freq: float = 200.0) -> np.ndarray:
    """Sinusoidal features of a scalar time value in roughly [0, 1].

    Frequencies are log-spaced from 1 to ``max_freq`` rad per unit time.
    Returns shape ``(len(tau), dim)``; ``dim`` must be even (0 disables).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if dim == 0:
        return np.zeros((tau.shape[0], 0))
    if dim % 2:
        raise ValidationError("time embedding dimension must be even")
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), dim // 2))
    arg = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


@dataclass
class Mlp:
    """Fully connected network; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acts: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.acts)) or not self.weights:
            raise DimensionError("weights, biases and activations must have equal nonzero length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.acts)):
            if a not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} fan-in {w.shape[0]} does not chain")

    @classmethod
    def init(cls, sizes, rng, hidden_act: str = "relu", out_act: str = "linear") -> "Mlp":
        """He-normal weights for relu layers, Glorot otherwise; zero biases."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise DimensionError("need at least input and output sizes")
        weights, biases, acts = [], [], []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_act if i == len(sizes) - 2 else hidden_act
            scale = np.sqrt(2.0 / fi) if act == "relu" else np.sqrt(2.0 / (fi + fo))
            weights.append(rng.standard_normal((fi, fo)) * scale)
            biases.append(np.zeros(fo))
            acts.append(act)
        return cls(weights, biases, acts)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def fan_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.acts))

    def descriptor(self) -> dict:
        return {"sizes": self.sizes, "acts": list(self.acts)}

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        x2 = x[None, :] if x.ndim == 1 else x
        if x2.ndim != 2 or x2.shape[1] != self.fan_in:
            raise DimensionError(f"input shape {x.shape} does not match fan-in {self.fan_in}")
        check_finite(x2)
        return x2

    def forward(self, x: np.ndarray) -> np.ndarray:
        squeeze = np.ndim(x) == 1
        h = self._check_input(x)
        for w, b, a in zip(self.weights, self.biases, self.acts):
            h = _act(a, h @ w + b)
        return h[0] if squeeze else h

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        """Gradients of ``sum(forward(x) * upstream)``.

        Returns ``(grads, input_grad)`` where ``grads`` is aligned with
        :attr:`params` (W0, b0, W1, b1, ...).
        """
        squeeze = np.ndim(x) == 1
        h = self._check_input(x)
        g = np.asarray(upstream, dtype=np.float64)
        g = g[None, :] if g.ndim == 1 else g
        if g.shape != (h.shape[0], self.fan_out):
            raise DimensionError(f"upstream shape {np.shape(upstream)} does not match output")
        pre, post = [], [h]
        for w, b, a in zip(self.weights, self.biases, self.acts):
            z = post[-1] @ w + b
            pre.append(z)
            post.append(_act(a, z))
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            g = _act_grad(self.acts[i], pre[i], post[i + 1], g)
            grads[2 * i] = post[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if squeeze else g)


def flat(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


@dataclass
class Adam:
    """Bias-corrected Adam with optional decoupled weight decay (AdamW)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list, repr=False)
    v: list = field(default_factory=list, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise DimensionError("parameter and gradient shapes differ")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in parameter tensor {i} at Adam step {self.t + 1}",
                    {"tensor": i, "step": self.t + 1},
                )
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params):
            raise DimensionError("optimizer state does not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}
