"""One-step distillation of a frozen diffusion teacher.

Both variants minimise the reverse KL between the generator's and the
teacher's action distributions, integrated over diffusion noise levels. The
generator gradient at a diffused sample ``A^k = alpha_k A + sigma_k eps`` is

    w(k) / sigma_k * (eps_teacher(A^k) - eps_gen(A^k)) * alpha_k * dA/dtheta

with ``w(k) = sigma_k^2`` and the bracket held constant. The stochastic
variant estimates ``eps_gen`` with an auxiliary network psi trained by DSM on
generator samples; the deterministic variant uses the corruption noise itself,
which is the exact answer when the generator is a point mass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import ConfigurationError, EpsNet, LambdaWeight, NoiseSchedule, dsm_loss
from .nn import Adam, DimensionError, TrainingError, global_norm, make_rng

MODES = ("stochastic", "deterministic")


@dataclass
class DistillConfig:
    mode: str = "stochastic"
    steps: int = 0
    batch_size: int = 64
    generator_lr: float = 1e-6
    score_lr: float = 2e-5
    generator_betas: tuple = (0.0, 0.999)
    score_betas: tuple = (0.0, 0.999)
    t_init: int = 65
    sigma_init: float = 2.5
    k_range: tuple = (2, 95)
    psi_per_theta: int = 1
    train_psi_obs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode in ("s", "d"):
            self.mode = {"s": "stochastic", "d": "deterministic"}[self.mode]
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown distillation mode {self.mode!r}")
        if self.psi_per_theta < 1:
            raise ConfigurationError("psi_per_theta must be >= 1")


class Generator:
    """One-step action generator sharing the teacher's network layout.

    The noise ``z`` occupies the noisy-action input slot and the network is
    queried at a fixed noise level; the output is the clean-action estimate
    implied by that query. Deterministic generators feed ``z = 0``.
    """

    def __init__(self, net: EpsNet, mode: str = "stochastic", t_fixed=None):
        if mode not in MODES:
            raise ConfigurationError(f"unknown generator mode {mode!r}")
        self.net = net
        self.mode = mode
        sch = net.schedule
        self.t_fixed = t_fixed if t_fixed is not None else (65 if sch.regime == "ddpm" else 2.5)
        self.action_dim = net.action_dim
        self.obs_dim = net.obs_dim
        self.calls = 0

    @property
    def schedule(self) -> NoiseSchedule:
        return self.net.schedule

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def input_scale(self) -> float:
        if self.schedule.regime == "ddpm":
            return 1.0
        return float(self.t_fixed)

    def draw_z(self, rng, n: int) -> np.ndarray:
        if self.mode == "deterministic":
            return np.zeros((n, self.action_dim))
        return rng.standard_normal((n, self.action_dim))

    def _k(self, n: int) -> np.ndarray:
        return np.full(n, self.t_fixed)

    def forward(self, z, obs) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.mode == "deterministic":
            z = np.zeros_like(z)
        self.calls += 1
        return self.net.x0(z * self.input_scale(), self._k(len(z)), obs)

    def backward(self, z, obs, d_action) -> list[np.ndarray]:
        """Parameter gradients of ``sum(forward(z, obs) * d_action)``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.mode == "deterministic":
            z = np.zeros_like(z)
        x = z * self.input_scale()
        k = self._k(len(z))
        _, b = self.net.x0_affine(x, k)
        return self.net.param_grads(x, k, obs, d_action * b)

    def sample(self, obs, rng, n: int | None = None):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        n = len(obs) if n is None else n
        if len(obs) != n:
            obs = np.broadcast_to(obs, (n, obs.shape[1]))
        before = self.calls
        a = self.forward(self.draw_z(rng, n), obs)
        return a, self.calls - before


def generator_sample(gen: Generator, obs, rng):
    """One normalised chunk (flattened) per observation row, exactly one NFE."""
    return gen.sample(obs, rng)


def w_weight(sigma) -> np.ndarray:
    return np.asarray(sigma, dtype=np.float64) ** 2


@dataclass
class DistillState:
    generator: Generator
    gen_opt: Adam
    teacher: object
    schedule: NoiseSchedule
    config: DistillConfig
    psi: EpsNet | None = None
    psi_opt: Adam | None = None
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def warm_start(cls, teacher: EpsNet, config: DistillConfig, psi_init: EpsNet | None = None):
        """Generator and psi both start as exact copies of the teacher network."""
        sch = teacher.schedule
        t_fixed = config.t_init if sch.regime == "ddpm" else config.sigma_init
        gen = Generator(teacher.copy(), config.mode, t_fixed)
        gen_opt = Adam(config.generator_lr, *config.generator_betas)
        psi = psi_opt = None
        if config.mode == "stochastic":
            psi = (psi_init or teacher).copy()
            psi_opt = Adam(config.score_lr, *config.score_betas)
        return cls(gen, gen_opt, teacher, sch, config, psi, psi_opt)

    def check_layout(self) -> None:
        t, g = self.teacher, self.generator
        if (t.action_dim, t.obs_dim) != (g.action_dim, g.obs_dim):
            raise ConfigurationError(
                f"teacher layout (action {t.action_dim}, obs {t.obs_dim}) does not match "
                f"generator (action {g.action_dim}, obs {g.obs_dim})")

    def sample_k(self, rng, n: int) -> np.ndarray:
        return self.schedule.sample_distill_k(rng, n, self.config.k_range)


def _obs_rows(obs_batch) -> np.ndarray:
    return np.atleast_2d(np.asarray(obs_batch, dtype=np.float64))


def psi_step(state: DistillState, obs_batch, rng) -> float:
    """One DSM update of psi on stop-gradient generator samples."""
    if state.config.mode != "stochastic" or state.psi is None:
        raise ConfigurationError("psi_step requires a stochastic distillation state")
    obs = _obs_rows(obs_batch)
    gen = state.generator
    actions = gen.forward(gen.draw_z(rng, len(obs)), obs)
    k = state.sample_k(rng, len(obs))
    lam = LambdaWeight.for_regime(state.schedule)
    loss, grads = dsm_loss(state.psi, actions, obs, state.schedule, lam, rng, k=k)
    if not state.config.train_psi_obs:
        _freeze_obs_columns(state.psi, grads)
    state.psi_opt.step(state.psi.params, grads)
    return loss


def _freeze_obs_columns(net: EpsNet, grads) -> None:
    start = net.action_dim + net.temb_dim
    grads[0][start:, :] = 0.0


def score_difference(state: DistillState, a_k, k, obs, noise) -> np.ndarray:
    """``eps_teacher - eps_gen`` at the diffused generator samples."""
    eps_t = state.teacher.eps(a_k, k, obs)
    if state.config.mode == "stochastic":
        return eps_t - state.psi.eps(a_k, k, obs)
    return eps_t - noise


def theta_gradient(state: DistillState, z, obs, k, noise):
    """Generator gradient for fixed ``(z, k, noise)``.

    Returns ``(grads, coeff, action)``: ``coeff`` is the per-element constant
    multiplying ``dA/dtheta``, so the surrogate objective
    ``mean(coeff * A_theta)`` has exactly ``grads`` as its gradient.
    """
    obs = _obs_rows(obs)
    gen = state.generator
    action = gen.forward(z, obs)
    alpha, sigma = state.schedule.alpha_sigma(k)
    alpha, sigma = np.asarray(alpha)[:, None], np.asarray(sigma)[:, None]
    a_k = alpha * action + sigma * noise
    diff = score_difference(state, a_k, k, obs, noise)
    coeff = w_weight(sigma) / sigma * diff * alpha
    if not np.all(np.isfinite(coeff)):
        raise TrainingError("non-finite score difference", _diag(k, sigma, diff, action))
    grads = gen.backward(z, obs, coeff / coeff.size)
    return grads, coeff, action


def surrogate_objective(gen: Generator, z, obs, coeff) -> float:
    return float(np.mean(coeff * gen.net.x0(
        np.atleast_2d(z if gen.mode == "stochastic" else np.zeros_like(z)) * gen.input_scale(),
        np.full(len(np.atleast_2d(z)), gen.t_fixed), _obs_rows(obs))))


def _diag(k, sigma, diff, action) -> dict:
    return {"k": np.asarray(k).tolist(), "sigma": np.ravel(sigma).tolist(),
            "score_diff_norm": float(np.linalg.norm(np.nan_to_num(diff))),
            "action_norm": float(np.linalg.norm(np.nan_to_num(action)))}


def _theta_step(state: DistillState, obs_batch, rng) -> float:
    obs = _obs_rows(obs_batch)
    gen = state.generator
    z = gen.draw_z(rng, len(obs))
    k = state.sample_k(rng, len(obs))
    noise = rng.standard_normal((len(obs), gen.action_dim))
    grads, coeff, action = theta_gradient(state, z, obs, k, noise)
    norm = global_norm(grads)
    if not np.isfinite(norm):
        _, sigma = state.schedule.alpha_sigma(k)
        raise TrainingError("non-finite generator gradient", _diag(k, sigma, coeff, action))
    state.gen_opt.step(gen.params, grads)
    return norm


def theta_step_stochastic(state: DistillState, obs_batch, rng) -> float:
    if state.config.mode != "stochastic":
        raise ConfigurationError("theta_step_stochastic needs mode='stochastic'")
    return _theta_step(state, obs_batch, rng)


def theta_step_deterministic(state: DistillState, obs_batch, rng) -> float:
    if state.config.mode != "deterministic":
        raise ConfigurationError("theta_step_deterministic needs mode='deterministic'")
    return _theta_step(state, obs_batch, rng)


def distill(state: DistillState, observations, steps: int | None = None, callback=None,
            every: int = 0) -> DistillState:
    """Alternate psi and theta updates (stochastic) or run theta updates only.

    ``observations`` is the pool of conditioning vectors (the pretraining
    dataset's observations). ``callback(state, info)`` runs after step 0 and
    every ``every`` steps.
    """
    state.check_layout()
    cfg = state.config
    obs_pool = _obs_rows(observations)
    if obs_pool.shape[1] != state.generator.obs_dim:
        raise DimensionError("observation pool does not match generator layout")
    steps = cfg.steps if steps is None else steps
    rng = make_rng(cfg.seed, 2, state.step)
    if callback is not None and every and state.step == 0:
        callback(state, {"loss_psi": None, "grad_norm_theta": None})
    for _ in range(steps):
        idx = rng.integers(0, len(obs_pool), size=cfg.batch_size)
        obs = obs_pool[idx]
        loss_psi = None
        if cfg.mode == "stochastic":
            for _ in range(cfg.psi_per_theta):
                loss_psi = psi_step(state, obs, rng)
            gnorm = theta_step_stochastic(state, obs, rng)
        else:
            gnorm = theta_step_deterministic(state, obs, rng)
        state.step += 1
        info = {"loss_psi": loss_psi, "grad_norm_theta": gnorm}
        state.history.append((state.step, loss_psi, gnorm))
        if callback is not None and every and state.step % every == 0:
            callback(state, info)
    return state


class OneStepPolicy:
    """A distilled generator exposed through the policy interface."""

    def __init__(self, generator: Generator, normalizer, n_obs: int, chunk_shape):
        self.generator = generator
        self.normalizer = normalizer
        self.n_obs = n_obs
        self.chunk_shape = tuple(chunk_shape)

    def sample_normalized(self, obs, sampler, rng, n: int | None = None):
        return self.generator.sample(obs, rng, n=n)

    def predict_chunk(self, obs, sampler, rng):
        a, nfe = self.generator.sample(np.asarray(obs).reshape(1, -1), rng)
        return self.normalizer.denormalize(a.reshape(self.chunk_shape)), nfe
