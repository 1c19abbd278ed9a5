"""Command-line entry point.

    onestep pretrain --config configs/bandit.json --out runs/bandit
    onestep distill  --config configs/bandit.json --out runs/bandit
    onestep sample   --config configs/bandit.json --out runs/bandit --n 5
    onestep eval     --config configs/reach2d.json --out runs/reach --checkpoint runs/reach/generator.json
    onestep bench    --config configs/reach2d.json --out runs/reach --generator runs/reach/generator.json
    onestep inspect  runs/bandit/teacher.json

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .bench import (ConvergenceLog, EvalProtocol, eval_success, latency_bench, two_sample)
from .config import LATENCY_SCENARIOS, ConfigError, RunConfig
from .diffusion import ConfigurationError, EpsNet, LambdaWeight, SamplerSpec, sample
from .distill import DistillConfig, DistillState, Generator, OneStepPolicy, distill
from .envs import AnalyticEps, component_fractions
from .nn import make_rng
from .policy import DiffusionPolicy, PretrainConfig, pretrain
from .tasks import (METRIC_STREAM, REFERENCE_STREAM, SAMPLE_STREAM, bandit_spec, build_task,
                    env_factory, example_observation, latency_model, sampler_for, schedule_for)

log = logging.getLogger("onestep")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TEACHER_FILE, GENERATOR_FILE = "teacher.json", "generator.json"
CURVES_FILE, REPORT_FILE, SAMPLES_FILE, EPISODES_FILE = (
    "curves.csv", "report.csv", "samples.jsonl", "episodes.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for key, value in rows:
        w.writerow([key, _cell(value)])
    path.write_text(buf.getvalue())


def _write_table(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class _Clock:
    """Elapsed wall time for curve rows, or ``None`` when runs must be byte-reproducible."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def __call__(self):
        return (time.perf_counter() - self.t0) * 1e3 if self.enabled else None


def _layout(cfg: RunConfig, task) -> dict:
    return {"task": cfg.task, "n_obs": task.n_obs, "chunk_shape": list(task.chunk_shape),
            "config": cfg.to_dict()}


def _load_checkpoint(path, role=None) -> ckpt.Checkpoint:
    ck = ckpt.load(path)
    if role is not None and ck.role != role:
        raise ConfigError(f"{path} holds a {ck.role} checkpoint, expected {role}")
    return ck


def policy_from_checkpoint(ck: ckpt.Checkpoint):
    n_obs = ck.extra.get("n_obs", 1)
    chunk_shape = tuple(ck.extra.get("chunk_shape", (ck.net.action_dim, 1)))
    if ck.role == "generator":
        gen = Generator(ck.net, ck.extra.get("mode", "stochastic"), ck.extra.get("t_fixed"))
        return OneStepPolicy(gen, ck.normalizer, n_obs, chunk_shape)
    return DiffusionPolicy(ck.net, ck.normalizer, n_obs, chunk_shape)


def _default_path(args, attr: str, out: Path, name: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value else out / name


def bandit_eps_error(net, cfg: RunConfig, seed_stream: int = 40, n_per_condition: int = 200) -> float:
    """Mean squared epsilon error against the closed-form target, averaged
    over a fixed grid of noise levels and diffused data points."""
    spec = bandit_spec(cfg)
    sch = net.schedule
    analytic = AnalyticEps(spec, sch)
    rng = make_rng(cfg.seed, seed_stream)
    from .envs import gen_bandit_dataset
    obs, chunks, _ = gen_bandit_dataset(spec, n_per_condition, rng)
    x0 = chunks.reshape(len(chunks), -1)
    if sch.regime == "ddpm":
        levels = np.unique(np.linspace(1, sch.n_steps, 8).round().astype(int))
    else:
        levels = np.geomspace(0.01, 20.0, 8)
    errs = []
    for k in levels:
        kk = np.full(len(x0), k)
        alpha, sigma = sch.alpha_sigma(kk)
        x = alpha[:, None] * x0 + sigma[:, None] * rng.standard_normal(x0.shape)
        errs.append(np.mean((net.eps(x, kk, obs) - analytic.eps(x, kk, obs)) ** 2))
    return float(np.mean(errs))


# --------------------------------------------------------------------------- subcommands

def cmd_pretrain(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    task = build_task(cfg)
    schedule = schedule_for(cfg)
    pcfg = PretrainConfig(steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr,
                          weight_decay=cfg.weight_decay, betas=tuple(cfg.pretrain_betas),
                          hidden=tuple(cfg.hidden), temb_dim=cfg.temb_dim,
                          log_every=cfg.log_every, seed=cfg.seed)
    net = EpsNet.create(schedule, task.dataset.flat_chunks.shape[1], task.dataset.obs.shape[1],
                        pcfg.hidden, pcfg.temb_dim, rng=make_rng(cfg.seed, 0))
    report = [("task", cfg.task), ("regime", cfg.regime), ("windows", len(task.dataset)),
              ("n_params", net.mlp.n_params)]
    if cfg.task == "bandit":
        report.append(("eps_error_start", bandit_eps_error(net, cfg)))
    curves, clock = ConvergenceLog(), _Clock(cfg.record_wall_time)

    def on_log(step, loss, _net):
        curves.append(step, wall_ms=clock(), loss_dsm=loss)
        log.info("pretrain step %d loss %.5f", step, loss)

    res = pretrain(task.dataset, pcfg, schedule, net=net, callback=on_log)
    if cfg.task == "bandit":
        report.append(("eps_error_final", bandit_eps_error(res.net, cfg)))
    if res.losses:
        report.append(("final_loss", res.losses[-1][1]))
    ck = ckpt.Checkpoint("teacher", res.net, task.dataset.normalizer, cfg.seed, res.steps,
                         _layout(cfg, task))
    ckpt.save(ck, out / TEACHER_FILE)
    curves.write(out / CURVES_FILE)
    _write_report(out / REPORT_FILE, report)
    print(f"wrote {out / TEACHER_FILE} ({res.steps} steps)")
    return EXIT_OK


class _BanditMetrics:
    """Two-sample comparison of generator draws against a fixed teacher reference."""

    def __init__(self, cfg: RunConfig, teacher: DiffusionPolicy):
        self.cfg = cfg
        self.spec = bandit_spec(cfg)
        self.obs = self.spec.conditions[cfg.metric_condition][None]
        self.reference, _ = teacher.sample_normalized(
            self.obs, sampler_for(cfg), make_rng(cfg.seed, REFERENCE_STREAM), n=cfg.reference_samples)

    def draw(self, gen: Generator) -> np.ndarray:
        a, _ = gen.sample(self.obs, make_rng(self.cfg.seed, METRIC_STREAM), n=self.cfg.metric_samples)
        return a

    def compare(self, samples):
        return two_sample(samples, self.reference, seed=self.cfg.seed)


def cmd_distill(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    teacher_path = _default_path(args, "teacher", out, TEACHER_FILE)
    teacher_ck = _load_checkpoint(teacher_path, "teacher")
    if teacher_ck.regime != cfg.regime:
        raise ConfigurationError(f"teacher regime {teacher_ck.regime!r} does not match "
                                 f"config regime {cfg.regime!r}")
    mode = {"s": "stochastic", "d": "deterministic"}.get(args.mode, args.mode) or cfg.distill_mode
    if mode == "deterministic" and cfg.distill_mode == "stochastic":
        log.warning("config declares stochastic distillation; running deterministic mode, "
                    "psi columns stay empty")
    task = build_task(cfg)
    teacher = policy_from_checkpoint(teacher_ck)
    dcfg = DistillConfig(mode=mode, steps=cfg.distill_steps, batch_size=cfg.distill_batch,
                         generator_lr=cfg.generator_lr, score_lr=cfg.score_lr,
                         generator_betas=tuple(cfg.generator_betas), score_betas=tuple(cfg.score_betas),
                         t_init=cfg.t_init, sigma_init=cfg.sigma_init, k_range=tuple(cfg.k_range),
                         psi_per_theta=cfg.psi_per_theta, seed=cfg.seed)
    state = DistillState.warm_start(teacher_ck.net, dcfg)
    metrics = _BanditMetrics(cfg, teacher) if cfg.task == "bandit" else None
    curves, clock = ConvergenceLog(), _Clock(cfg.record_wall_time)
    latency = latency_model(cfg) if cfg.task == "reach2d" else None

    def evaluate(gen):
        row = {}
        if metrics is not None:
            r = metrics.compare(metrics.draw(gen))
            row.update(mmd=r.mmd, sw1=r.sw1, energy=r.energy)
        else:
            pol = OneStepPolicy(gen, teacher_ck.normalizer, task.n_obs, task.chunk_shape)
            rep = eval_success(pol, env_factory(cfg), EvalProtocol(cfg.eval_seeds, cfg.eval_inits),
                               latency, cfg.t_act, None, args.workers, cfg.seed)
            row.update(success_mean=rep.mean, success_std=rep.std)
        return row

    def on_eval(st, info):
        curves.append(st.step, wall_ms=clock(), nfe=1, loss_psi=info["loss_psi"],
                      grad_norm_theta=info["grad_norm_theta"], **evaluate(st.generator))
        log.info("distill step %d", st.step)

    distill(state, task.obs_pool, callback=on_eval, every=cfg.eval_every)
    if cfg.eval_every == 0 or state.step % cfg.eval_every:
        last = state.history[-1] if state.history else (state.step, None, None)
        on_eval(state, {"loss_psi": last[1], "grad_norm_theta": last[2]})

    report = [("mode", mode), ("steps", state.step), ("teacher_steps", teacher_ck.step)]
    if metrics is not None:
        samples = metrics.draw(state.generator)
        r = metrics.compare(samples)
        ratios = r.ratios()
        report += [("mmd", r.mmd), ("mmd_base", r.mmd_base), ("mmd_ratio", ratios["mmd"]),
                   ("sw1", r.sw1), ("sw1_base", r.sw1_base), ("sw1_ratio", ratios["sw1"]),
                   ("energy", r.energy), ("energy_base", r.energy_base),
                   ("energy_ratio", ratios["energy"]), ("bandwidth", r.bandwidth)]
        fracs = component_fractions(metrics.spec, cfg.metric_condition, samples[:cfg.mode_samples])
        report += [(f"component_{i}_fraction", f) for i, f in enumerate(fracs)]
        first = curves.first_step_below("mmd", 2.0 * r.mmd_base)
        report.append(("first_step_mmd_within_2x", first))
        one, _ = teacher.sample_normalized(metrics.obs, SamplerSpec("ddim", 1),
                                           make_rng(cfg.seed, METRIC_STREAM), n=cfg.metric_samples)
        report.append(("teacher_ddim1_mmd_ratio", metrics.compare(one).ratios()["mmd"]))
    else:
        row = curves.rows[-1]
        report += [("success_mean", row.get("success_mean")), ("success_std", row.get("success_std"))]
    extra = {**_layout(cfg, task), "mode": mode, "t_fixed": state.generator.t_fixed}
    ckpt.save(ckpt.Checkpoint("generator", state.generator.net, teacher_ck.normalizer, cfg.seed,
                              state.step, extra), out / GENERATOR_FILE)
    curves.write(out / CURVES_FILE)
    _write_report(out / REPORT_FILE, report)
    print(f"wrote {out / GENERATOR_FILE} ({state.step} steps, mode {mode})")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    path = _default_path(args, "checkpoint", out, GENERATOR_FILE)
    ck = _load_checkpoint(path)
    policy = policy_from_checkpoint(ck)
    task_kind = ck.extra.get("task", cfg.task)
    obs = example_observation(cfg, task_kind, args.condition, args.variant)
    sampler = None if ck.role == "generator" else sampler_for(cfg, args.sampler)
    x, nfe = policy.sample_normalized(obs[None], sampler, make_rng(cfg.seed, SAMPLE_STREAM), n=args.n)
    chunks = ck.normalizer.denormalize(x.reshape(args.n, *policy.chunk_shape))
    lines = [json.dumps(c.tolist()) for c in chunks]
    (out / SAMPLES_FILE).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.n} samples to {out / SAMPLES_FILE} (nfe per sample {nfe})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    if cfg.task != "reach2d":
        raise UsageError("eval runs closed-loop episodes and needs a reach2d config")
    path = _default_path(args, "checkpoint", out, GENERATOR_FILE)
    ck = _load_checkpoint(path)
    policy = policy_from_checkpoint(ck)
    scenario = args.latency or cfg.latency
    latency = latency_model(cfg, scenario)
    sampler = None if ck.role == "generator" else sampler_for(cfg, args.sampler)
    protocol = EvalProtocol(cfg.eval_seeds, cfg.eval_inits)
    variant = args.variant or cfg.eval_variant
    rep = eval_success(policy, env_factory(cfg, variant), protocol, latency, cfg.t_act, sampler,
                       args.workers, cfg.seed)
    done = rep.completion_times
    report = [("role", ck.role), ("variant", variant), ("latency", scenario),
              ("latency_per_nfe", latency.per_nfe), ("latency_overhead", latency.overhead),
              ("success_mean", rep.mean), ("success_std", rep.std)]
    report += [(f"success_seed_{i}", v) for i, v in enumerate(rep.per_seed)]
    report += [("mean_total_nfe", float(np.mean([e["total_nfe"] for e in rep.episodes]))),
               ("mean_completion_time", float(np.mean(done)) if done else None)]
    _write_report(out / REPORT_FILE, report)
    _write_table(out / EPISODES_FILE, ("seed", "init", "success", "total_nfe", "sim_time", "reason"),
                 rep.episodes)
    print(f"success {rep.mean:.3f} +- {rep.std:.3f} over {protocol.n_seeds} seeds x "
          f"{protocol.n_inits} inits ({variant}, latency {scenario})")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    rows = []
    obs = None
    teacher_path = _default_path(args, "checkpoint", out, TEACHER_FILE)
    specs = [SamplerSpec.parse(s) for s in args.samplers.split(",") if s and s != "one-step"]
    if specs:
        ck = _load_checkpoint(teacher_path, "teacher")
        teacher = policy_from_checkpoint(ck)
        obs = example_observation(cfg, ck.extra.get("task", cfg.task))
        rows += latency_bench(teacher, specs, obs, args.repetitions, make_rng(cfg.seed, 5))
    if args.generator:
        gk = _load_checkpoint(args.generator, "generator")
        gen = policy_from_checkpoint(gk)
        obs = example_observation(cfg, gk.extra.get("task", cfg.task)) if obs is None else obs
        rows += latency_bench(gen, [None], obs, args.repetitions, make_rng(cfg.seed, 5))
    if not rows:
        raise UsageError("nothing to benchmark: give --samplers and/or --generator")
    slowest = max(r["wall_ms_mean"] for r in rows)
    for r in rows:
        r["speedup"] = slowest / r["wall_ms_mean"]
        print(f"{r['sampler']:>10}  nfe {r['nfe']:>4}  {r['wall_ms_mean']:9.3f} ms  x{r['speedup']:.1f}")
    _write_table(out / REPORT_FILE, ("sampler", "nfe", "wall_ms_mean", "wall_ms_min", "speedup"), rows)
    return EXIT_OK


def cmd_inspect(args) -> int:
    for path in args.paths:
        ck = ckpt.load(path)
        summary = {"path": str(path), "role": ck.role, "regime": ck.regime, "step": ck.step,
                   "seed": ck.seed, "sizes": ck.net.mlp.sizes, "n_params": ck.net.mlp.n_params,
                   "action_dim": ck.net.action_dim, "obs_dim": ck.net.obs_dim,
                   **{k: v for k, v in ck.extra.items() if k != "config"}}
        print(json.dumps(summary, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="rollout worker processes")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="onestep", parents=[common],
                     description="Pretrain, distill and evaluate one-step diffusion policies.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("pretrain", parents=[common], help="train a diffusion teacher")

    p = sub.add_parser("distill", parents=[common], help="distill a teacher into a one-step generator")
    p.add_argument("--teacher", help="teacher checkpoint (default: <out>/teacher.json)")
    p.add_argument("--mode", choices=["s", "d", "stochastic", "deterministic"])

    p = sub.add_parser("sample", parents=[common], help="write action chunks as JSON lines")
    p.add_argument("--checkpoint", help="teacher or generator (default: <out>/generator.json)")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--sampler", help="teacher sampler, e.g. ddpm, ddim:10, edm_heun:18")
    p.add_argument("--condition", type=int, help="bandit condition index")
    p.add_argument("--variant", choices=["static", "moving"])

    p = sub.add_parser("eval", parents=[common], help="closed-loop success on reach2d")
    p.add_argument("--checkpoint", help="teacher or generator (default: <out>/generator.json)")
    p.add_argument("--latency", choices=LATENCY_SCENARIOS)
    p.add_argument("--sampler")
    p.add_argument("--variant", choices=["static", "moving"])

    p = sub.add_parser("bench", parents=[common], help="wall-clock and NFE per prediction")
    p.add_argument("--checkpoint", help="teacher checkpoint (default: <out>/teacher.json)")
    p.add_argument("--generator", help="generator checkpoint for the one-step row")
    p.add_argument("--samplers", default="ddpm,ddim:10", help="comma-separated teacher samplers")
    p.add_argument("--repetitions", type=int, default=20)

    p = sub.add_parser("inspect", parents=[common], help="print checkpoint headers")
    p.add_argument("paths", nargs="+")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "distill": cmd_distill, "sample": cmd_sample,
            "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect}
DEFAULTS = {"config": None, "seed": None, "out": "out", "workers": 1, "verbose": False}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for key, value in DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, value)
        if args.command is None:
            raise UsageError("choose a subcommand: " + ", ".join(COMMANDS))
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
