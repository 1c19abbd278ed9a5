"""Synthetic tasks with analytic ground truth.

Bandits: each condition has a Gaussian-mixture action distribution, so the
diffused marginal at any noise level is again a Gaussian mixture and its
exact epsilon target is available in closed form.

Reach2D: a point agent driven by clamped velocity commands must get within a
capture radius of a (possibly moving) target, optionally detouring around a
disc obstacle. Prediction latency is simulated: the target keeps moving while
the agent waits for its next action chunk.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .diffusion import NoiseSchedule
from .nn import ValidationError


class CalibrationError(RuntimeError):
    pass


@dataclass
class BanditSpec:
    """Per-condition Gaussian mixtures over flattened action chunks.

    ``means[c]`` has shape (M, D) and ``sigmas[c]`` shape (M, D) (per-dimension
    standard deviations; isotropic components repeat one value).
    """

    conditions: np.ndarray
    weights: list
    means: list
    sigmas: list
    chunk_shape: tuple = (2, 1)

    def __post_init__(self):
        self.conditions = np.atleast_2d(np.asarray(self.conditions, dtype=np.float64))
        d = int(np.prod(self.chunk_shape))
        ws, ms, ss = [], [], []
        for w, m, s in zip(self.weights, self.means, self.sigmas):
            w = np.asarray(w, dtype=np.float64)
            m = np.asarray(m, dtype=np.float64).reshape(len(w), d)
            s = np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(len(w), -1), (len(w), d)).copy()
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValidationError("mixture weights must be positive and sum to 1")
            if np.any(s <= 0):
                raise ValidationError("component standard deviations must be positive")
            ws.append(w), ms.append(m), ss.append(s)
        if not len(ws) == len(self.conditions):
            raise ValidationError("one mixture per condition required")
        self.weights, self.means, self.sigmas = ws, ms, ss

    @property
    def action_dim(self) -> int:
        return int(np.prod(self.chunk_shape))

    @property
    def obs_dim(self) -> int:
        return self.conditions.shape[1]

    def condition_index(self, obs) -> np.ndarray:
        """Nearest condition for each observation row."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        d = ((obs[:, None, :] - self.conditions[None, :, :]) ** 2).sum(-1)
        return np.argmin(d, axis=1)

    def affine(self, scale, offset) -> "BanditSpec":
        """Spec of ``scale * a + offset`` (e.g. after action normalisation)."""
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        offset = np.asarray(offset, dtype=np.float64).reshape(-1)
        return BanditSpec(self.conditions, self.weights,
                          [m * scale + offset for m in self.means],
                          [s * np.abs(scale) for s in self.sigmas], self.chunk_shape)


def gaussian_bandit(means=((0.4, -0.3), (-0.5, 0.2)), sigma=0.15, chunk_shape=(2, 1)) -> BanditSpec:
    """One Gaussian per condition; conditions are one-hot vectors."""
    n = len(means)
    return BanditSpec(np.eye(n), [[1.0]] * n, [[m] for m in means], [[sigma]] * n, chunk_shape)


def bimodal_bandit(sep=0.5, sigma=0.15, chunk_shape=(2, 1)) -> BanditSpec:
    """Condition 0: equal-weight modes at +-sep on every dimension.
    Condition 1: a single Gaussian at the origin-adjacent point."""
    d = int(np.prod(chunk_shape))
    up, down = np.full(d, sep), np.full(d, -sep)
    one = np.linspace(-0.3, 0.3, d)
    return BanditSpec(np.eye(2), [[0.5, 0.5], [1.0]], [[up, down], [one]],
                      [[sigma, sigma], [sigma]], chunk_shape)


def gen_bandit_dataset(spec: BanditSpec, n_per_condition: int, rng: np.random.Generator):
    """Sample ``(obs, chunks, component)``; chunks have shape (N, *chunk_shape)."""
    if n_per_condition < 1:
        raise ValidationError("n_per_condition must be >= 1")
    obs, chunks, comps = [], [], []
    for c in range(len(spec.conditions)):
        w, m, s = spec.weights[c], spec.means[c], spec.sigmas[c]
        idx = rng.choice(len(w), size=n_per_condition, p=w)
        x = m[idx] + s[idx] * rng.standard_normal((n_per_condition, spec.action_dim))
        obs.append(np.repeat(spec.conditions[c][None], n_per_condition, axis=0))
        chunks.append(x.reshape(n_per_condition, *spec.chunk_shape))
        comps.append(idx)
    return np.concatenate(obs), np.concatenate(chunks), np.concatenate(comps)


def _mixture_terms(spec, c, x, k, schedule):
    alpha, sigma = schedule.alpha_sigma(k)
    alpha = np.broadcast_to(alpha, (x.shape[0],))[:, None, None]
    sigma = np.broadcast_to(sigma, (x.shape[0],))[:, None, None]
    m, s, w = spec.means[c], spec.sigmas[c], spec.weights[c]
    var = alpha ** 2 * s[None] ** 2 + sigma ** 2            # (B, M, D)
    diff = x[:, None, :] - alpha * m[None]                   # (B, M, D)
    logp = (np.log(w)[None] - 0.5 * np.sum(diff ** 2 / var + np.log(2 * np.pi * var), axis=2))
    return logp, diff, var, sigma[:, 0, 0]


def bandit_log_density(spec: BanditSpec, condition, x, k, schedule: NoiseSchedule) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logp, *_ = _mixture_terms(spec, int(condition), x, k, schedule)
    return logsumexp(logp, axis=1)


def analytic_bandit_eps(spec: BanditSpec, condition, x, k, schedule: NoiseSchedule) -> np.ndarray:
    """Exact epsilon target ``-sigma_k * grad log q_k(x)`` for one condition."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logp, diff, var, sigma = _mixture_terms(spec, int(condition), x, k, schedule)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    score = -np.sum(resp[:, :, None] * diff / var, axis=1)
    return -sigma[:, None] * score


def assign_components(spec: BanditSpec, condition, x) -> np.ndarray:
    """Most probable mixture component (clean data, no noise) for each sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(-1, spec.action_dim)
    c = int(condition)
    m, s, w = spec.means[c], spec.sigmas[c], spec.weights[c]
    logp = np.log(w)[None] - 0.5 * np.sum((x[:, None, :] - m[None]) ** 2 / s[None] ** 2
                                          + 2 * np.log(s[None]), axis=2)
    return np.argmax(logp, axis=1)


def component_fractions(spec: BanditSpec, condition, x) -> np.ndarray:
    idx = assign_components(spec, condition, x)
    return np.bincount(idx, minlength=len(spec.weights[int(condition)])) / len(idx)


class AnalyticEps:
    """Exact noise predictor for a bandit, usable wherever a teacher is expected."""

    def __init__(self, spec: BanditSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule
        self.action_dim = spec.action_dim
        self.obs_dim = spec.obs_dim

    def eps(self, x, k, obs) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = np.broadcast_to(np.asarray(k), (x.shape[0],))
        cidx = self.spec.condition_index(np.broadcast_to(np.atleast_2d(obs), (x.shape[0], self.obs_dim)))
        out = np.empty_like(x)
        for c in np.unique(cidx):
            rows = cidx == c
            out[rows] = analytic_bandit_eps(self.spec, c, x[rows], k[rows], self.schedule)
        return out

    __call__ = eps


# --------------------------------------------------------------------------- Reach2D

STATE_DIM = 7  # agent xy, target xy, obstacle centre xy, obstacle radius


@dataclass
class TargetScript:
    """Piecewise-linear target path traversed at constant speed, then held."""

    waypoints: np.ndarray
    speed: float = 0.0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=np.float64))
        seg = np.diff(self.waypoints, axis=0)
        self._lengths = np.linalg.norm(seg, axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(self._lengths)])

    @property
    def static(self) -> bool:
        return self.speed == 0.0 or len(self.waypoints) == 1

    def position(self, t: float) -> np.ndarray:
        if self.static:
            return self.waypoints[0].copy()
        s = min(self.speed * max(t, 0.0), self._cum[-1])
        i = min(np.searchsorted(self._cum, s, side="right") - 1, len(self._lengths) - 1)
        frac = (s - self._cum[i]) / self._lengths[i] if self._lengths[i] > 0 else 0.0
        return self.waypoints[i] + frac * (self.waypoints[i + 1] - self.waypoints[i])


@dataclass
class Reach2D:
    agent: np.ndarray
    script: TargetScript
    obstacle: tuple | None = None      # (centre xy, radius)
    capture_radius: float = 0.15
    dt: float = 0.1
    horizon: int = 60
    v_max: float = 0.8
    time: float = 0.0
    steps: int = 0
    done: bool = False
    success: bool = False
    reason: str = ""

    def __post_init__(self):
        self.agent = np.asarray(self.agent, dtype=np.float64).copy()
        if self.capture_radius <= 0 or self.horizon <= 0:
            raise ValidationError("capture radius and horizon must be positive")

    @property
    def target(self) -> np.ndarray:
        return self.script.position(self.time)

    def state(self) -> np.ndarray:
        if self.obstacle is None:
            obst = np.zeros(3)
        else:
            obst = np.array([*self.obstacle[0], self.obstacle[1]], dtype=np.float64)
        return np.concatenate([self.agent, self.target, obst])

    def clone(self) -> "Reach2D":
        return copy.deepcopy(self)

    def _check(self) -> None:
        if np.linalg.norm(self.agent - self.target) <= self.capture_radius:
            self.done, self.success, self.reason = True, True, "captured"
        elif self.obstacle is not None and \
                np.linalg.norm(self.agent - np.asarray(self.obstacle[0])) < self.obstacle[1]:
            self.done, self.success, self.reason = True, False, "collision"
        elif self.steps >= self.horizon:
            self.done, self.success, self.reason = True, False, "horizon"

    def step(self, action):
        """Integrate one control period. Returns ``(state, done, success)``."""
        if self.done:
            return self.state(), True, self.success
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (2,):
            raise ValidationError(f"action must have 2 components, got {action.shape}")
        if not np.all(np.isfinite(action)):
            self.done, self.success, self.reason = True, False, "non-finite action"
            return self.state(), True, False
        speed = np.linalg.norm(action)
        if speed > self.v_max:
            action = action * (self.v_max / speed)
        self.agent = self.agent + action * self.dt
        self.time += self.dt
        self.steps += 1
        self._check()
        return self.state(), self.done, self.success

    def idle(self, duration: float) -> None:
        """Let the world run for ``duration`` seconds with the agent holding still."""
        if duration <= 0 or self.done:
            return
        end = self.time + duration
        while self.time < end - 1e-12 and not self.done:
            self.time = min(self.time + self.dt, end)
            if np.linalg.norm(self.agent - self.target) <= self.capture_radius:
                self.done, self.success, self.reason = True, True, "captured"


def env_step(env: Reach2D, action):
    return env.step(action)


def make_reach(rng: np.random.Generator, variant: str = "static", **kw) -> Reach2D:
    """Randomised Reach2D instance.

    ``static``: target about 1.6 m ahead with a disc obstacle at the midpoint,
    beyond the reach of a single executed chunk.
    ``moving``: no obstacle; the target starts about 1 m away and drifts
    off at ``target_speed`` along a two-segment path.
    """
    target_speed = kw.pop("target_speed", 0.5)
    start = rng.uniform(-0.1, 0.1, size=2)
    heading = rng.uniform(-0.35, 0.35)
    dist = rng.uniform(0.9, 1.1)
    if variant == "static":
        dist += 0.6
    goal = start + dist * np.array([np.cos(heading), np.sin(heading)])
    if variant == "static":
        centre = 0.5 * (start + goal)
        return Reach2D(start, TargetScript(goal), obstacle=(centre, 0.15), **kw)
    if variant == "moving":
        side = rng.choice([-1.0, 1.0])
        away = np.array([np.cos(heading), np.sin(heading)])
        perp = np.array([-away[1], away[0]]) * side
        d1 = perp * 0.8 + away * 0.6
        d1 /= np.linalg.norm(d1)
        w1 = goal + 1.5 * d1
        w2 = w1 + 3.0 * away
        return Reach2D(start, TargetScript(np.stack([goal, w1, w2]), target_speed), **kw)
    raise ValidationError(f"unknown Reach2D variant {variant!r}")


@dataclass
class ScriptedExpert:
    """Proportional controller with a fixed detour side around the obstacle.

    Operates on state vectors only, so it can be rolled forward on a copy of
    the environment to produce a full action chunk.
    """

    side: float = 1.0
    gain: float = 5.0
    margin: float = 0.45
    lead: float = 0.1

    def aim(self, state: np.ndarray) -> np.ndarray:
        agent, target, centre, radius = state[:2], state[2:4], state[4:6], state[6]
        if radius <= 0:
            return target
        axis = target - centre
        n = np.linalg.norm(axis)
        if n < 1e-9:
            return target
        u = axis / n
        if np.dot(agent - centre, u) >= 0:
            return target
        perp = np.array([-u[1], u[0]])
        return centre + self.side * perp * (radius + self.margin) + u * self.lead

    def action(self, state: np.ndarray, v_max: float) -> np.ndarray:
        a = self.gain * (self.aim(state) - state[:2])
        s = np.linalg.norm(a)
        return a * (v_max / s) if s > v_max else a

    def chunk(self, env: Reach2D, horizon: int) -> np.ndarray:
        """Roll the controller forward on a copy of ``env``."""
        sim = env.clone()
        sim.done = False
        sim.horizon = sim.steps + horizon + 1
        out = np.zeros((horizon, 2))
        state = sim.state()
        for i in range(horizon):
            out[i] = self.action(state, sim.v_max)
            state, *_ = sim.step(out[i])
            sim.done = False
        return out


def scripted_expert(env: Reach2D, state=None, side: float = 1.0, horizon: int = 16) -> np.ndarray:
    """Expert action chunk from the environment's current situation."""
    if state is not None and not np.allclose(state, env.state()):
        raise ValidationError("state does not describe env")
    return ScriptedExpert(side=side).chunk(env, horizon)


def collect_demos(n_episodes: int, rng: np.random.Generator, length: int = 50,
                  moving_fraction: float = 0.5, action_noise: float = 0.0, **env_kw):
    """Closed-loop expert rollouts of fixed length (no early termination).

    With ``action_noise > 0`` the executed command is perturbed by Gaussian
    noise of that standard deviation (m/s) while the recorded label stays the
    expert's clean action, so the data also covers slightly off-path states.

    Returns a list of ``(states (length+1, 7), actions (length, 2), side)``.
    """
    episodes = []
    for _ in range(n_episodes):
        variant = "moving" if rng.random() < moving_fraction else "static"
        env = make_reach(rng, variant, **env_kw)
        expert = ScriptedExpert(side=float(rng.choice([-1.0, 1.0])))
        states, actions = [env.state()], []
        for _ in range(length):
            a = expert.action(states[-1], env.v_max)
            env.step(a + action_noise * rng.standard_normal(2) if action_noise else a)
            env.done = False
            states.append(env.state())
            actions.append(a)
        episodes.append((np.array(states), np.array(actions), expert.side))
    return episodes


@dataclass(frozen=True)
class LatencyModel:
    per_nfe: float = 0.0
    overhead: float = 0.0

    def __post_init__(self):
        if self.per_nfe < 0 or self.overhead < 0:
            raise ValidationError("latency costs must be non-negative")

    def latency(self, nfe: int) -> float:
        return self.overhead + self.per_nfe * nfe


def target_displacement(env: Reach2D, duration: float, t0: float | None = None) -> float:
    t0 = env.time if t0 is None else t0
    return float(np.linalg.norm(env.script.position(t0 + duration) - env.script.position(t0)))


def calibrate_latency(env: Reach2D, nfe_slow: int, nfe_fast: int, overhead: float = 0.0,
                      c_max: float = 1.0, tol: float = 1e-10) -> float:
    """Smallest per-NFE cost at which the slow policy's staleness exceeds the
    capture radius while the fast policy's stays under half of it.

    Staleness is the target displacement accumulated during one prediction,
    measured from the start of the target script.
    """
    if nfe_slow <= nfe_fast:
        raise CalibrationError("nfe_slow must exceed nfe_fast to separate the policies")
    r = env.capture_radius
    slow = lambda c: target_displacement(env, overhead + c * nfe_slow, 0.0) > r  # noqa: E731
    if not slow(c_max):
        raise CalibrationError(f"target never outruns the slow policy for c <= {c_max}")
    lo, hi = 0.0, c_max
    if slow(lo):
        hi = lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if slow(mid) else (mid, hi)
    c = hi
    if target_displacement(env, overhead + c * nfe_fast, 0.0) >= 0.5 * r:
        raise CalibrationError(f"at c*={c:.3g} the fast policy is also stale")
    return c
