"""Measurement harness: success grids, two-sample statistics, latency, curves."""
from __future__ import annotations

import csv
import io
import logging
import timeit
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from .nn import ValidationError, make_rng
from .policy import run_receding_horizon

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "wall_ms", "nfe", "loss_dsm", "loss_psi", "grad_norm_theta",
                 "mmd", "sw1", "energy", "success_mean", "success_std")
MIN_SAMPLES = 50


@dataclass(frozen=True)
class EvalProtocol:
    n_seeds: int = 3
    n_inits: int = 20

    def __post_init__(self):
        if self.n_seeds < 1 or self.n_inits < 1:
            raise ValidationError("protocol counts must be >= 1")


@dataclass
class EvalReport:
    mean: float
    std: float
    per_seed: list
    episodes: list = field(default_factory=list)   # dicts: seed, init, success, total_nfe, sim_time, reason

    @property
    def completion_times(self) -> list:
        return [e["sim_time"] for e in self.episodes if e["success"]]


def _rollout(args):
    policy, env_factory, seed, init, latency, t_act, sampler, base_seed = args
    try:
        env = env_factory(seed, init)
        rec = run_receding_horizon(policy, env, t_act, sampler, latency,
                                   make_rng(base_seed, 3, seed, init))
        return {"seed": seed, "init": init, "success": rec.success, "total_nfe": rec.total_nfe,
                "sim_time": rec.sim_time, "reason": rec.reason}
    except Exception as exc:  # noqa: BLE001 - counted as a failure, never aborts the grid
        log.warning("rollout seed=%d init=%d failed: %r", seed, init, exc)
        return {"seed": seed, "init": init, "success": False, "total_nfe": 0,
                "sim_time": 0.0, "reason": f"fault: {exc!r}"}


def eval_success(policy, env_factory, protocol: EvalProtocol, latency=None, t_act: int = 8,
                 sampler=None, workers: int = 1, base_seed: int = 0) -> EvalReport:
    """Success rate over the ``seeds x inits`` grid; std is taken across seeds.

    ``env_factory(seed, init)`` builds a fresh environment. Each rollout gets
    its own random stream derived from ``(base_seed, seed, init)``.
    """
    jobs = [(policy, env_factory, s, i, latency, t_act, sampler, base_seed)
            for s in range(protocol.n_seeds) for i in range(protocol.n_inits)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(_rollout, jobs))
    else:
        episodes = [_rollout(j) for j in jobs]
    per_seed = []
    for s in range(protocol.n_seeds):
        per_seed.append(float(np.mean([e["success"] for e in episodes if e["seed"] == s])))
    return EvalReport(float(np.mean(per_seed)), float(np.std(per_seed)), per_seed, episodes)


@dataclass
class TwoSampleReport:
    mmd: float
    sw1: float
    energy: float
    mmd_base: float
    sw1_base: float
    energy_base: float
    bandwidth: float

    def ratios(self) -> dict:
        return {k: getattr(self, k) / max(getattr(self, k + "_base"), 1e-300)
                for k in ("mmd", "sw1", "energy")}

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def median_bandwidth(x: np.ndarray, max_points: int = 1000) -> float:
    """Median pairwise distance, over an evenly strided subset of at most ``max_points`` rows."""
    if len(x) > max_points:
        x = x[np.linspace(0, len(x) - 1, max_points).astype(int)]
    d = cdist(x, x)
    vals = d[np.triu_indices(len(x), 1)]
    med = float(np.median(vals)) if len(vals) else 1.0
    return med if med > 0 else 1.0


def mmd(x, y, bandwidth: float) -> float:
    """Biased (V-statistic) RBF MMD, returned as the RKHS distance (not squared)."""
    kxx = np.exp(-cdist(x, x, "sqeuclidean") / (2 * bandwidth ** 2)).mean()
    kyy = np.exp(-cdist(y, y, "sqeuclidean") / (2 * bandwidth ** 2)).mean()
    kxy = np.exp(-cdist(x, y, "sqeuclidean") / (2 * bandwidth ** 2)).mean()
    return float(np.sqrt(max(kxx + kyy - 2 * kxy, 0.0)))


def energy_distance(x, y) -> float:
    v = 2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean()
    return float(np.sqrt(max(v, 0.0)))


def sliced_w1(x, y, directions: np.ndarray) -> float:
    px, py = x @ directions.T, y @ directions.T
    return float(np.mean([wasserstein_distance(px[:, j], py[:, j]) for j in range(len(directions))]))


def two_sample(samples_a, samples_b, n_projections: int = 64, seed: int = 0,
               n_splits: int = 5) -> TwoSampleReport:
    """Compare ``samples_a`` against the reference ``samples_b``.

    The reference is split at random into two halves ``b1, b2``. The
    statistic is ``S(a, b1)`` and its self-calibration baseline is
    ``S(b2, b1)``; both are averaged over ``n_splits`` random splits. Pass a
    reference twice the size of ``samples_a`` so both comparisons see the
    same sample sizes. The RBF bandwidth is the median pairwise distance of
    the pooled sample and is shared by every split.
    """
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    if len(a) < MIN_SAMPLES or len(b) < 2 * MIN_SAMPLES:
        raise ValidationError(f"two_sample needs >= {MIN_SAMPLES} samples and a reference "
                              f"of >= {2 * MIN_SAMPLES}")
    if a.shape[1] != b.shape[1]:
        raise ValidationError("sample dimensions differ")
    if n_splits < 1:
        raise ValidationError("n_splits must be >= 1")
    bw = median_bandwidth(np.concatenate([a, b]))
    rng = make_rng(seed, 4)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    h = len(b) // 2
    stats = np.zeros(6)
    for _ in range(n_splits):
        perm = rng.permutation(len(b))
        b1, b2 = b[perm[:h]], b[perm[h:2 * h]]
        stats += [mmd(a, b1, bw), sliced_w1(a, b1, dirs), energy_distance(a, b1),
                  mmd(b2, b1, bw), sliced_w1(b2, b1, dirs), energy_distance(b2, b1)]
    stats /= n_splits
    return TwoSampleReport(*map(float, stats), bw)


def latency_bench(policy, sampler_specs, obs, repetitions: int = 20, rng=None) -> list[dict]:
    """Wall-clock per prediction for each sampler (``None`` = the policy's own one-step path).

    Each repetition times a block of back-to-back calls long enough (about
    0.2 s) that timer resolution and CPU-quota bursts do not favour the cheap
    samplers. NFE is read from the policy's instrumentation and must be
    identical for every call.
    """
    rng = rng if rng is not None else make_rng(0, 5)
    rows = []
    for spec in sampler_specs:
        _, nfe = policy.predict_chunk(obs, spec, rng)

        def call():
            _, n = policy.predict_chunk(obs, spec, rng)
            if n != nfe:
                raise AssertionError(f"NFE changed between calls: {nfe} vs {n}")

        timer = timeit.Timer(call)
        number, _ = timer.autorange()
        times = np.array(timer.repeat(repetitions, number)) / number * 1e3
        rows.append({"sampler": "one-step" if spec is None else spec.label, "nfe": int(nfe),
                     "wall_ms_mean": float(np.mean(times)), "wall_ms_min": float(np.min(times))})
    slowest = max(r["wall_ms_mean"] for r in rows)
    for r in rows:
        r["speedup"] = slowest / r["wall_ms_mean"]
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class ConvergenceLog:
    """Rows of training metrics with the fixed curve column order."""

    def __init__(self, columns=CURVE_COLUMNS):
        self.columns = tuple(columns)
        self.rows: list[dict] = []

    def append(self, step: int, **metrics) -> None:
        unknown = set(metrics) - set(self.columns)
        if unknown:
            raise ValidationError(f"unknown curve columns: {sorted(unknown)}")
        self.rows.append({"step": step, **metrics})

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def first_step_below(self, metric: str, threshold: float):
        for r in self.rows:
            v = r.get(metric)
            if v is not None and v <= threshold:
                return r["step"]
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in self.columns])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "ConvergenceLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            out.columns = tuple(reader.fieldnames)
            for row in reader:
                out.rows.append({k: (float(v) if v != "" else None) for k, v in row.items()})
        return out


def convergence_log(run_rows, columns=CURVE_COLUMNS) -> str:
    """Render ``(step, metrics)`` pairs as CSV text."""
    cl = ConvergenceLog(columns)
    for step, metrics in run_rows:
        cl.append(step, **metrics)
    return cl.to_csv()
