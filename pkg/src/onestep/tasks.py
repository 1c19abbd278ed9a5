"""Turn a :class:`RunConfig` into datasets, conditioning pools and environments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .diffusion import NoiseSchedule, SamplerSpec
from .envs import (BanditSpec, LatencyModel, bimodal_bandit, calibrate_latency, collect_demos,
                   gaussian_bandit, gen_bandit_dataset, make_reach)
from .nn import make_rng
from .policy import Dataset, Normalizer, build_dataset

# random-stream tags, so data, evaluation and calibration never share draws
DATA_STREAM = 10
EVAL_STREAM = 20
CALIBRATION_STREAM = 21
REFERENCE_STREAM = 30
METRIC_STREAM = 31
SAMPLE_STREAM = 32


@dataclass
class Task:
    kind: str
    dataset: Dataset
    n_obs: int
    chunk_shape: tuple
    bandit: BanditSpec | None = None

    @property
    def obs_pool(self) -> np.ndarray:
        return self.dataset.obs


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.regime, n_steps=cfg.diffusion_steps)


def bandit_spec(cfg: RunConfig) -> BanditSpec:
    if cfg.bandit_kind == "bimodal":
        return bimodal_bandit(sep=cfg.bandit_sep, sigma=cfg.bandit_sigma)
    return gaussian_bandit(sigma=cfg.bandit_sigma)


def reach_kwargs(cfg: RunConfig) -> dict:
    return {"target_speed": cfg.target_speed, "capture_radius": cfg.capture_radius}


def build_task(cfg: RunConfig) -> Task:
    """Deterministic in ``cfg.seed``: the same config always yields the same data."""
    rng = make_rng(cfg.seed, DATA_STREAM)
    if cfg.task == "bandit":
        spec = bandit_spec(cfg)
        obs, chunks, _ = gen_bandit_dataset(spec, cfg.bandit_samples, rng)
        # bandit actions already live on the unit scale
        ds = Dataset.from_pairs(obs, chunks, Normalizer.identity(chunks.shape[-1]), n_obs=1)
        return Task("bandit", ds, 1, tuple(spec.chunk_shape), spec)
    demos = collect_demos(cfg.n_demos, rng, length=cfg.demo_length,
                          moving_fraction=cfg.moving_fraction, **reach_kwargs(cfg))
    ds = build_dataset(demos, cfg.n_obs, cfg.chunk)
    return Task("reach2d", ds, cfg.n_obs, ds.chunk_shape)


class ReachFactory:
    """Picklable ``(seed, init) -> Reach2D`` for evaluation grids."""

    def __init__(self, variant: str, base_seed: int, **kw):
        self.variant = variant
        self.base_seed = base_seed
        self.kw = kw

    def __call__(self, seed: int, init: int):
        return make_reach(make_rng(self.base_seed, EVAL_STREAM, seed, init), self.variant, **self.kw)


def env_factory(cfg: RunConfig, variant: str | None = None) -> ReachFactory:
    return ReachFactory(variant or cfg.eval_variant, cfg.seed, **reach_kwargs(cfg))


def latency_model(cfg: RunConfig, scenario: str | None = None) -> LatencyModel:
    """``zero``: instantaneous prediction. ``calibrated``: per-NFE cost from
    :func:`calibrate_latency` on a moving-target reference episode."""
    scenario = scenario or cfg.latency
    if scenario == "zero":
        return LatencyModel(0.0, cfg.latency_overhead)
    env = make_reach(make_rng(cfg.seed, CALIBRATION_STREAM), "moving", **reach_kwargs(cfg))
    c = calibrate_latency(env, cfg.latency_nfe_slow, cfg.latency_nfe_fast, cfg.latency_overhead)
    return LatencyModel(c, cfg.latency_overhead)


def sampler_for(cfg: RunConfig, text: str | None = None) -> SamplerSpec:
    return SamplerSpec.parse(text or cfg.sampler)


def example_observation(cfg: RunConfig, task_kind: str, condition: int | None = None,
                        variant: str | None = None) -> np.ndarray:
    """Conditioning vector used by ``sample``/``bench``: a bandit condition or
    the stacked initial state of the first evaluation episode."""
    if task_kind == "bandit":
        spec = bandit_spec(cfg)
        c = cfg.metric_condition if condition is None else condition
        return spec.conditions[c].copy()
    env = env_factory(cfg, variant)(0, 0)
    s = env.state()
    return np.concatenate([s] * cfg.n_obs)
