"""Conditional diffusion policy over action chunks."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .diffusion import EpsNet, LambdaWeight, NoiseSchedule, SamplerSpec, dsm_loss, sample
from .envs import LatencyModel, Reach2D
from .nn import Adam, TrainingError, ValidationError, global_norm, make_rng

log = logging.getLogger(__name__)

CLAMP = 1.5


@dataclass
class Normalizer:
    """Per-dimension min/max affine map onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValidationError("normalizer needs hi > lo in every dimension")

    @classmethod
    def fit(cls, data) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        data = data.reshape(-1, data.shape[-1])
        lo, hi = data.min(axis=0), data.max(axis=0)
        flat = hi - lo < 1e-12
        lo, hi = np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)
        return cls(lo, hi)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(-np.ones(dim), np.ones(dim))

    @property
    def scale(self) -> np.ndarray:
        return 2.0 / (self.hi - self.lo)

    @property
    def offset(self) -> np.ndarray:
        return -1.0 - self.lo * self.scale

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != self.lo.shape:
            raise ValidationError(f"last axis {x.shape} does not match normalizer dim {self.lo.size}")
        return x

    def normalize(self, x) -> np.ndarray:
        y = (self._check(x) - self.lo) * self.scale - 1.0
        out = np.abs(y) > CLAMP
        if np.any(out):
            self.clamped += int(out.sum())
            y = np.clip(y, -CLAMP, CLAMP)
        return y

    def denormalize(self, y) -> np.ndarray:
        return (self._check(y) + 1.0) / self.scale + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["lo"], d["hi"])


@dataclass
class Dataset:
    obs: np.ndarray        # (N, obs_dim)
    chunks: np.ndarray     # (N, T_chunk, action_dim), normalised
    normalizer: Normalizer
    n_obs: int = 1

    def __post_init__(self):
        if len(self.obs) == 0:
            raise ValidationError("dataset is empty")
        if len(self.obs) != len(self.chunks):
            raise ValidationError("obs and chunks must pair up")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def chunk_shape(self) -> tuple:
        return self.chunks.shape[1:]

    @property
    def flat_chunks(self) -> np.ndarray:
        return self.chunks.reshape(len(self), -1)

    @classmethod
    def from_pairs(cls, obs, chunks, normalizer: Normalizer | None = None, n_obs: int = 1):
        chunks = np.asarray(chunks, dtype=np.float64)
        if chunks.ndim == 2:
            chunks = chunks[:, :, None]
        norm = normalizer or Normalizer.fit(chunks)
        return cls(np.asarray(obs, dtype=np.float64), norm.normalize(chunks), norm, n_obs)


def window_count(length: int, n_obs: int, t_chunk: int) -> int:
    return max(length - n_obs - t_chunk + 1, 0)


def build_dataset(episodes, n_obs: int = 2, t_chunk: int = 16,
                  normalizer: Normalizer | None = None) -> Dataset:
    """Slide ``(observation stack, action chunk)`` windows over episodes.

    An episode is ``(states, actions, ...)``; its length is ``len(states)``.
    The observation at ``t`` stacks states ``t-n_obs+1 .. t`` and the chunk is
    actions ``t .. t+t_chunk-1``; every chunk action must be followed by a
    recorded state, giving ``len(states) - n_obs - t_chunk + 1`` windows.
    """
    obs, chunks, all_actions = [], [], []
    for i, ep in enumerate(episodes):
        states, actions = np.asarray(ep[0], dtype=np.float64), np.asarray(ep[1], dtype=np.float64)
        count = window_count(len(states), n_obs, t_chunk)
        if count == 0 or len(actions) < len(states) - 1:
            log.warning("skipping episode %d: length %d < n_obs + t_chunk = %d",
                        i, len(states), n_obs + t_chunk)
            continue
        all_actions.append(actions[: len(states) - 1])
        for t in range(n_obs - 1, n_obs - 1 + count):
            obs.append(states[t - n_obs + 1: t + 1].reshape(-1))
            chunks.append(actions[t: t + t_chunk])
    if not obs:
        raise ValidationError("no episode is long enough to yield a training window")
    norm = normalizer or Normalizer.fit(np.concatenate(all_actions))
    return Dataset(np.array(obs), norm.normalize(np.array(chunks)), norm, n_obs)


@dataclass
class PretrainConfig:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-6
    betas: tuple = (0.9, 0.999)
    hidden: tuple = (128, 128, 128)
    temb_dim: int = 16
    log_every: int = 100
    seed: int = 0


@dataclass
class DiffusionPolicy:
    net: EpsNet
    normalizer: Normalizer
    n_obs: int
    chunk_shape: tuple

    @property
    def schedule(self) -> NoiseSchedule:
        return self.net.schedule

    def sample_normalized(self, obs, sampler: SamplerSpec, rng, n: int | None = None):
        """Batched draw of flattened, normalised chunks and the per-sample NFE."""
        return sample(self.net, obs, sampler, self.schedule, rng, n=n)

    def predict_chunk(self, obs, sampler: SamplerSpec, rng):
        x, nfe = self.sample_normalized(np.asarray(obs).reshape(1, -1), sampler, rng)
        return self.normalizer.denormalize(x.reshape(self.chunk_shape)), nfe


@dataclass
class PretrainResult:
    net: EpsNet
    losses: list = field(default_factory=list)   # (step, loss)
    steps: int = 0


def pretrain(dataset: Dataset, config: PretrainConfig, schedule: NoiseSchedule,
             net: EpsNet | None = None, callback=None) -> PretrainResult:
    """DSM training of a teacher on ``dataset``; deterministic given ``config.seed``."""
    rng = make_rng(config.seed, 1)
    if net is None:
        net = EpsNet.create(schedule, dataset.flat_chunks.shape[1], dataset.obs.shape[1],
                            config.hidden, config.temb_dim, rng=make_rng(config.seed, 0))
    opt = Adam(config.lr, *config.betas, weight_decay=config.weight_decay)
    lam = LambdaWeight.for_regime(schedule)
    x_all, o_all = dataset.flat_chunks, dataset.obs
    result = PretrainResult(net)
    last_good = net.copy()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        loss, grads = dsm_loss(net, x_all[idx], o_all[idx], schedule, lam, rng)
        if not np.isfinite(loss):
            err = TrainingError(f"DSM loss diverged at step {step}",
                                {"step": step, "grad_norm": global_norm(grads)})
            err.last_good = last_good
            raise err
        opt.step(net.params, grads)
        if config.log_every and (step % config.log_every == 0 or step == config.steps):
            result.losses.append((step, loss))
            last_good = net.copy()
            if callback is not None:
                callback(step, loss, net)
    result.steps = config.steps
    return result


@dataclass
class EpisodeRecord:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    nfe: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    sim_time: float = 0.0
    success: bool = False
    reason: str = ""

    @property
    def total_nfe(self) -> int:
        return int(sum(self.nfe))

    def to_dict(self) -> dict:
        return {"states": np.asarray(self.states).tolist(), "actions": np.asarray(self.actions).tolist(),
                "nfe": list(self.nfe), "latencies": list(self.latencies), "sim_time": self.sim_time,
                "success": self.success, "reason": self.reason}


def run_receding_horizon(policy, env: Reach2D, t_act: int = 8, sampler: SamplerSpec | None = None,
                         latency: LatencyModel | None = None, rng=None, n_obs: int = 2,
                         t_chunk: int | None = None) -> EpisodeRecord:
    """Plan a chunk, wait out the prediction latency, execute ``t_act`` actions, repeat.

    ``policy.predict_chunk(obs, sampler, rng)`` must return ``(chunk, nfe)``.
    The observation is frozen when prediction starts; the target keeps moving
    during the latency while the agent holds still.
    """
    latency = latency or LatencyModel()
    n_obs = getattr(policy, "n_obs", n_obs)
    t_chunk = t_chunk or getattr(policy, "chunk_shape", (t_act,))[0]
    if t_act > t_chunk:
        raise ValidationError(f"t_act={t_act} exceeds chunk length {t_chunk}")
    rec = EpisodeRecord()
    state = env.state()
    history = deque([state] * n_obs, maxlen=n_obs)
    rec.states.append(state)
    try:
        while not env.done:
            obs = np.concatenate(list(history))
            chunk, nfe = policy.predict_chunk(obs, sampler, rng)
            chunk = np.asarray(chunk).reshape(-1, 2)
            lat = latency.latency(nfe)
            rec.nfe.append(int(nfe))
            rec.latencies.append(lat)
            env.idle(lat)
            for a in chunk[:t_act]:
                if env.done:
                    break
                state, done, _ = env.step(a)
                history.append(state)
                rec.states.append(state)
                rec.actions.append(np.asarray(a, dtype=np.float64))
    except Exception as exc:  # noqa: BLE001 - a faulty rollout is a failed episode
        env.done, env.success, env.reason = True, False, f"fault: {exc!r}"
    rec.sim_time = env.time
    rec.success, rec.reason = bool(env.success), env.reason
    return rec


class ExpertPolicy:
    """Scripted expert exposed through the policy interface (zero NFE)."""

    def __init__(self, env_ref: Reach2D, side: float = 1.0, chunk: int = 16):
        from .envs import ScriptedExpert
        self.env = env_ref
        self.expert = ScriptedExpert(side=side)
        self.chunk_shape = (chunk, 2)
        self.n_obs = 2

    def predict_chunk(self, obs, sampler, rng):
        return self.expert.chunk(self.env, self.chunk_shape[0]), 0
