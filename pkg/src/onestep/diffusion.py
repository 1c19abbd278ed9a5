"""Noise schedules, the conditional noise-prediction network, DSM loss and samplers.

Two regimes are supported:

* ``ddpm``: discrete, variance preserving, squared-cosine cumulative schedule
  with ``n_steps`` levels. Index 0 is clean data (alpha=1, sigma=0); levels
  ``1..K`` are the diffusion steps.
* ``edm``: continuous, variance exploding (alpha=1), the noise level *is*
  sigma. Networks use the usual EDM input/skip/output preconditioning and
  expose the implied epsilon prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DimensionError, Mlp, ValidationError, time_embedding

REGIMES = ("ddpm", "edm")
SAMPLERS = ("ddpm", "ddim", "edm_heun")

# EDM training noise distribution: ln(sigma) ~ N(P_MEAN, P_STD^2)
P_MEAN = -1.2
P_STD = 1.2


class DomainError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _cosine_alpha_bar(n_steps: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    f = lambda t: np.cos((t / n_steps + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
    t = np.arange(n_steps + 1, dtype=np.float64)
    betas = np.minimum(1.0 - f(t[1:]) / f(t[:-1]), max_beta)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass
class NoiseSchedule:
    regime: str = "ddpm"
    n_steps: int = 100
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.regime == "ddpm":
            if self.n_steps < 1:
                raise ConfigurationError("n_steps must be >= 1")
            self.alpha_bar = _cosine_alpha_bar(self.n_steps)
        else:
            if not 0 < self.sigma_min < self.sigma_max:
                raise ConfigurationError("need 0 < sigma_min < sigma_max")
            self.alpha_bar = np.zeros(0)

    @property
    def alphas(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def betas(self) -> np.ndarray:
        ab = self.alpha_bar
        return np.concatenate([[0.0], 1.0 - ab[1:] / ab[:-1]])

    def _check(self, k) -> np.ndarray:
        k = np.asarray(k)
        if self.regime == "ddpm":
            if not np.issubdtype(k.dtype, np.integer):
                if not np.all(np.isfinite(k)) or np.any(k != np.round(k)):
                    raise DomainError(f"ddpm step index must be an integer, got {k}")
                k = k.astype(np.int64)
            if np.any(k < 0) or np.any(k > self.n_steps):
                raise DomainError(f"step index outside [0, {self.n_steps}]: {k}")
            return k
        k = k.astype(np.float64)
        if not np.all(np.isfinite(k)) or np.any(k < 0):
            raise DomainError(f"sigma must be finite and >= 0, got {k}")
        return k

    def alpha_sigma(self, k):
        """Coefficients of ``x^k = alpha * x0 + sigma * eps``."""
        k = self._check(k)
        if self.regime == "ddpm":
            return self.alphas[k], self.sigmas[k]
        return np.ones_like(k), k

    def time_value(self, k) -> np.ndarray:
        """Scalar time fed to the embedding, normalised to roughly [0, 1]."""
        k = self._check(k)
        if self.regime == "ddpm":
            return k.astype(np.float64) / self.n_steps
        lo, hi = np.log(self.sigma_min), np.log(self.sigma_max)
        return (np.log(np.maximum(k, 1e-20)) - lo) / (hi - lo)

    def sample_train_k(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.regime == "ddpm":
            return rng.integers(1, self.n_steps + 1, size=n)
        return np.exp(P_MEAN + P_STD * rng.standard_normal(n))

    def sample_distill_k(self, rng: np.random.Generator, n: int, k_range=(2, 95)) -> np.ndarray:
        if self.regime == "ddpm":
            lo, hi = int(k_range[0]), int(k_range[1])
            if not 1 <= lo <= hi <= self.n_steps:
                raise ConfigurationError(f"k range {k_range} outside [1, {self.n_steps}]")
            return rng.integers(lo, hi + 1, size=n)
        return np.exp(P_MEAN + P_STD * rng.standard_normal(n))

    def edm_sigmas(self, n: int) -> np.ndarray:
        """Karras grid of ``n`` decreasing noise levels (no trailing zero)."""
        if n < 1:
            raise ConfigurationError("need at least one discretisation step")
        if n == 1:
            return np.array([self.sigma_max])
        i = np.arange(n) / (n - 1)
        inv = 1.0 / self.rho
        return (self.sigma_max ** inv + i * (self.sigma_min ** inv - self.sigma_max ** inv)) ** self.rho

    def to_dict(self) -> dict:
        return {"regime": self.regime, "n_steps": self.n_steps, "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max, "rho": self.rho, "sigma_data": self.sigma_data}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def forward_diffuse(x0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    a, s = schedule.alpha_sigma(k)
    a, s = _col(a, x0), _col(s, x0)
    return a * x0 + s * eps


def _col(c, like: np.ndarray) -> np.ndarray:
    """Broadcast a per-row coefficient against a (B, D) array."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1 and like.ndim == 2:
        return c[:, None]
    return c


@dataclass(frozen=True)
class LambdaWeight:
    rule: str = "unit"
    sigma_data: float = 0.5

    def __call__(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.rule == "unit":
            return np.ones_like(sigma)
        if self.rule == "edm_default":
            sd = self.sigma_data
            return (sigma ** 2 + sd ** 2) / (sigma * sd) ** 2
        raise ConfigurationError(f"unknown lambda rule {self.rule!r}")

    @classmethod
    def for_regime(cls, schedule: NoiseSchedule) -> "LambdaWeight":
        if schedule.regime == "ddpm":
            return cls("unit", schedule.sigma_data)
        return cls("edm_default", schedule.sigma_data)


def score_from_eps(eps_pred, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("score is undefined at sigma = 0")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    return -eps_pred / _col(sigma, eps_pred)


class EpsNet:
    """Conditional noise predictor eps(x^k, k, obs) built on an :class:`Mlp`.

    The MLP input is ``[x^k | time embedding | obs]``. For ``ddpm`` the raw
    network output is epsilon directly. For ``edm`` the output ``F`` is
    wrapped as ``D = c_skip x + c_out F(c_in x)`` and epsilon is
    ``(x - D) / sigma``. Both conversions are affine in ``F``, which is what
    :meth:`eps_affine` returns and what backpropagation relies on.
    """

    def __init__(self, mlp: Mlp, schedule: NoiseSchedule, action_dim: int, obs_dim: int,
                 temb_dim: int = 16):
        if mlp.fan_in != action_dim + temb_dim + obs_dim or mlp.fan_out != action_dim:
            raise DimensionError(
                f"mlp {mlp.fan_in}->{mlp.fan_out} does not fit layout "
                f"action {action_dim} + time {temb_dim} + obs {obs_dim}")
        self.mlp = mlp
        self.schedule = schedule
        self.action_dim = action_dim
        self.obs_dim = obs_dim
        self.temb_dim = temb_dim

    @classmethod
    def create(cls, schedule, action_dim, obs_dim, hidden=(128, 128, 128), temb_dim=16,
               rng=None) -> "EpsNet":
        rng = rng if rng is not None else np.random.default_rng(0)
        mlp = Mlp.init([action_dim + temb_dim + obs_dim, *hidden, action_dim], rng)
        return cls(mlp, schedule, action_dim, obs_dim, temb_dim)

    def copy(self) -> "EpsNet":
        return EpsNet(self.mlp.copy(), self.schedule, self.action_dim, self.obs_dim, self.temb_dim)

    def descriptor(self) -> dict:
        return {**self.mlp.descriptor(), "action_dim": self.action_dim,
                "obs_dim": self.obs_dim, "temb_dim": self.temb_dim}

    @property
    def params(self) -> list[np.ndarray]:
        return self.mlp.params

    def _prep(self, x, k, obs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.action_dim:
            raise DimensionError(f"x must be (B, {self.action_dim}), got {x.shape}")
        b = x.shape[0]
        k = np.broadcast_to(np.asarray(k), (b,))
        obs = np.asarray(obs, dtype=np.float64).reshape(b, -1) if self.obs_dim else np.zeros((b, 0))
        if obs.shape[1] != self.obs_dim:
            raise DimensionError(f"obs must have {self.obs_dim} features, got {obs.shape[1]}")
        return x, k, obs

    def _c_in(self, k) -> np.ndarray:
        if self.schedule.regime == "ddpm":
            return np.ones(len(k))
        return 1.0 / np.sqrt(k ** 2 + self.schedule.sigma_data ** 2)

    def inputs(self, x, k, obs) -> np.ndarray:
        x, k, obs = self._prep(x, k, obs)
        temb = time_embedding(self.schedule.time_value(k), self.temb_dim)
        return np.concatenate([x * self._c_in(k)[:, None], temb, obs], axis=1)

    def raw(self, x, k, obs) -> np.ndarray:
        return self.mlp.forward(self.inputs(x, k, obs))

    def eps_affine(self, x, k):
        """``(a, b)`` such that ``eps = a + b * F``; ``b`` is per row, shape (B, 1)."""
        x = np.asarray(x, dtype=np.float64)
        k = np.broadcast_to(np.asarray(k), (x.shape[0],))
        if self.schedule.regime == "ddpm":
            return np.zeros_like(x), np.ones((x.shape[0], 1))
        sd = self.schedule.sigma_data
        s = k.astype(np.float64)
        c_skip = sd ** 2 / (s ** 2 + sd ** 2)
        c_out = s * sd / np.sqrt(s ** 2 + sd ** 2)
        return x * ((1.0 - c_skip) / s)[:, None], (-c_out / s)[:, None]

    def x0_affine(self, x, k):
        a_e, b_e = self.eps_affine(x, k)
        alpha, sigma = self.schedule.alpha_sigma(np.broadcast_to(np.asarray(k), (len(x),)))
        alpha, sigma = alpha[:, None], sigma[:, None]
        return (x - sigma * a_e) / alpha, -sigma * b_e / alpha

    def eps(self, x, k, obs) -> np.ndarray:
        a, b = self.eps_affine(x, k)
        return a + b * self.raw(x, k, obs)

    def x0(self, x, k, obs) -> np.ndarray:
        a, b = self.x0_affine(x, k)
        return a + b * self.raw(x, k, obs)

    def __call__(self, x, k, obs) -> np.ndarray:
        return self.eps(x, k, obs)

    def param_grads(self, x, k, obs, d_raw) -> list[np.ndarray]:
        grads, _ = self.mlp.backward(self.inputs(x, k, obs), d_raw)
        return grads


class CountingModel:
    """Wraps an eps model and counts batched evaluations (one per call)."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def eps(self, x, k, obs):
        self.calls += 1
        return self.model.eps(x, k, obs)


def dsm_loss(model: EpsNet, x0, obs, schedule: NoiseSchedule, lam: LambdaWeight,
             rng: np.random.Generator, k=None, noise=None):
    """Monte-Carlo denoising score matching loss and its parameter gradients.

    ``k`` defaults to the schedule's training distribution, ``noise`` to
    fresh standard normals. For ``ddpm`` the per-sample weight multiplies the
    squared epsilon error. For ``edm`` it multiplies the squared error of the
    implied denoised sample, i.e. ``lam(sigma) * sigma^2`` on the epsilon
    error. The loss is averaged over batch and components.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValidationError("dsm_loss needs a nonempty (B, D) batch")
    b, d = x0.shape
    k = schedule.sample_train_k(rng, b) if k is None else np.broadcast_to(np.asarray(k), (b,))
    noise = rng.standard_normal(x0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    xk = forward_diffuse(x0, k, noise, schedule)
    _, sigma = schedule.alpha_sigma(k)
    weight = lam(sigma) if schedule.regime == "ddpm" else lam(sigma) * sigma ** 2
    raw = model.raw(xk, k, obs)
    a, bcoef = model.eps_affine(xk, k)
    err = a + bcoef * raw - noise
    loss = float(np.mean(weight[:, None] * err ** 2))
    d_raw = 2.0 * weight[:, None] * err * bcoef / (b * d)
    return loss, model.param_grads(xk, k, obs, d_raw)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddpm"
    steps: int = 100
    final_noise: bool = False
    clip_x0: bool = True

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ConfigurationError(f"unknown sampler {self.kind!r}")
        if self.steps < 1:
            raise ConfigurationError("sampler needs at least one step")

    def expected_nfe(self, schedule: NoiseSchedule) -> int:
        if self.kind == "ddpm":
            return schedule.n_steps
        if self.kind == "ddim":
            return self.steps
        return 2 * self.steps - 1

    @property
    def label(self) -> str:
        return "ddpm" if self.kind == "ddpm" else f"{self.kind}-{self.steps}"

    @classmethod
    def parse(cls, text: str) -> "SamplerSpec":
        """``ddpm``, ``ddim:10`` or ``edm_heun:18``."""
        kind, _, n = text.partition(":")
        if kind == "ddpm":
            return cls("ddpm", int(n) if n else 100)
        if not n:
            raise ConfigurationError(f"sampler {text!r} needs a step count, e.g. {kind}:10")
        return cls(kind, int(n))


def _check_regime(spec: SamplerSpec, schedule: NoiseSchedule) -> None:
    need = "edm" if spec.kind == "edm_heun" else "ddpm"
    if schedule.regime != need:
        raise ConfigurationError(f"sampler {spec.kind} requires the {need} regime, "
                                 f"schedule is {schedule.regime}")


def sample(model, obs, spec: SamplerSpec, schedule: NoiseSchedule, rng: np.random.Generator,
           n: int | None = None, action_dim: int | None = None):
    """Draw one sample per observation row. Returns ``(x0_hat, nfe)``.

    ``nfe`` is counted by wrapping ``model``; it is the number of network
    evaluations each returned sample went through.
    """
    _check_regime(spec, schedule)
    obs = np.asarray(obs, dtype=np.float64)
    obs = obs.reshape(1, -1) if obs.ndim == 1 else obs
    b = obs.shape[0] if n is None else n
    if obs.shape[0] != b:
        obs = np.broadcast_to(obs, (b, obs.shape[1]))
    dim = action_dim if action_dim is not None else model.action_dim
    counter = CountingModel(model)
    if spec.kind == "ddpm":
        x = _ddpm(counter, obs, b, dim, spec, schedule, rng)
    elif spec.kind == "ddim":
        x = _ddim(counter, obs, b, dim, spec, schedule, rng)
    else:
        x = _edm_heun(counter, obs, b, dim, spec, schedule, rng)
    return x, counter.calls


def _ddpm(model, obs, b, dim, spec, sch, rng):
    ab, betas = sch.alpha_bar, sch.betas
    x = rng.standard_normal((b, dim))
    for k in range(sch.n_steps, 0, -1):
        kk = np.full(b, k)
        eps = model.eps(x, kk, obs)
        x0 = (x - np.sqrt(1 - ab[k]) * eps) / np.sqrt(ab[k])
        if spec.clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
        c0 = np.sqrt(ab[k - 1]) * betas[k] / (1 - ab[k])
        ck = np.sqrt(1 - betas[k]) * (1 - ab[k - 1]) / (1 - ab[k])
        x = c0 * x0 + ck * x
        if k > 1:
            var = (1 - ab[k - 1]) / (1 - ab[k]) * betas[k]
            x = x + np.sqrt(var) * rng.standard_normal((b, dim))
        elif spec.final_noise:
            x = x + np.sqrt(betas[1]) * rng.standard_normal((b, dim))
    return x


def _ddim(model, obs, b, dim, spec, sch, rng):
    ks = np.unique(np.round(np.linspace(sch.n_steps, 0, spec.steps + 1)).astype(int))[::-1]
    alphas, sigmas = sch.alphas, sch.sigmas
    x = rng.standard_normal((b, dim))
    for k, kp in zip(ks[:-1], ks[1:]):
        eps = model.eps(x, np.full(b, k), obs)
        x0 = (x - sigmas[k] * eps) / alphas[k]
        if spec.clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = (x - alphas[k] * x0) / sigmas[k]
        x = alphas[kp] * x0 + sigmas[kp] * eps
    return x


def _edm_heun(model, obs, b, dim, spec, sch, rng):
    sig = np.concatenate([sch.edm_sigmas(spec.steps), [0.0]])
    x = sig[0] * rng.standard_normal((b, dim))
    for i in range(spec.steps):
        s, sn = sig[i], sig[i + 1]
        d = model.eps(x, np.full(b, s), obs)
        x_next = x + (sn - s) * d
        if sn > 0:
            d2 = model.eps(x_next, np.full(b, sn), obs)
            x_next = x + (sn - s) * 0.5 * (d + d2)
        x = x_next
    return x
