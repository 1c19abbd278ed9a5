"""Flat JSON run configuration shared by every subcommand.

Every key has a default; unknown keys are rejected. Optimiser and
distillation defaults are the reference recipe for full-size policies;
the files under ``configs/`` override them with desk-scale values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

TASKS = ("bandit", "reach2d")
LATENCY_SCENARIOS = ("zero", "calibrated")


class ConfigError(ValueError):
    """A configuration problem the user can fix (reported as a usage error)."""


@dataclass
class RunConfig:
    task: str = "bandit"
    seed: int = 0

    # bandit task
    bandit_kind: str = "bimodal"          # bimodal | gaussian
    bandit_sigma: float = 0.15
    bandit_sep: float = 0.5
    bandit_samples: int = 4000            # per condition
    metric_condition: int = 0

    # reach2d task
    n_demos: int = 300
    demo_length: int = 50
    moving_fraction: float = 0.5
    target_speed: float = 0.5
    capture_radius: float = 0.15
    t_act: int = 8
    eval_variant: str = "moving"          # static | moving
    latency: str = "zero"                 # zero | calibrated
    latency_overhead: float = 0.0
    latency_nfe_slow: int = 100
    latency_nfe_fast: int = 1
    eval_seeds: int = 3
    eval_inits: int = 20

    # model
    regime: str = "ddpm"
    diffusion_steps: int = 100
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    temb_dim: int = 16
    chunk: int = 16
    n_obs: int = 2
    sampler: str = "ddpm"

    # pretraining
    pretrain_steps: int = 10000
    pretrain_batch: int = 256
    pretrain_lr: float = 1e-4
    weight_decay: float = 1e-6
    pretrain_betas: list = field(default_factory=lambda: [0.9, 0.999])
    log_every: int = 100

    # distillation
    distill_mode: str = "stochastic"
    distill_steps: int = 1000
    distill_batch: int = 64
    generator_lr: float = 1e-6
    score_lr: float = 2e-5
    generator_betas: list = field(default_factory=lambda: [0.0, 0.999])
    score_betas: list = field(default_factory=lambda: [0.0, 0.999])
    t_init: int = 65
    sigma_init: float = 2.5
    k_range: list = field(default_factory=lambda: [2, 95])
    psi_per_theta: int = 1
    eval_every: int = 100
    metric_samples: int = 1000
    reference_samples: int = 2000        # split in halves for the self-calibration baseline
    mode_samples: int = 500              # leading metric samples used for mode shares
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.regime not in ("ddpm", "edm"):
            raise ConfigError(f"regime must be 'ddpm' or 'edm', got {self.regime!r}")
        if self.bandit_kind not in ("bimodal", "gaussian"):
            raise ConfigError(f"bandit_kind must be 'bimodal' or 'gaussian', got {self.bandit_kind!r}")
        if self.latency not in LATENCY_SCENARIOS:
            raise ConfigError(f"latency must be one of {LATENCY_SCENARIOS}, got {self.latency!r}")
        if self.eval_variant not in ("static", "moving"):
            raise ConfigError(f"eval_variant must be 'static' or 'moving', got {self.eval_variant!r}")
        if self.distill_mode not in ("stochastic", "deterministic"):
            raise ConfigError(f"distill_mode must be 'stochastic' or 'deterministic', "
                              f"got {self.distill_mode!r}")
        if self.t_act > self.chunk:
            raise ConfigError(f"t_act={self.t_act} exceeds chunk={self.chunk}")
        lo, hi = self.k_range
        if not 1 <= lo <= hi <= self.diffusion_steps:
            raise ConfigError(f"k_range {self.k_range} must lie in [1, {self.diffusion_steps}]")
        for key in ("pretrain_steps", "distill_steps", "log_every", "eval_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 1 <= self.mode_samples <= self.metric_samples:
            raise ConfigError("mode_samples must lie in [1, metric_samples]")
        for key in ("pretrain_batch", "distill_batch", "eval_seeds", "eval_inits", "n_obs", "chunk"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})
