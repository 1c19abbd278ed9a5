"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (visible with
``pytest -v -s`` and in the captured output of a failing run). The heavy
criteria drive the installed command line with the shipped configs.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from onestep import checkpoint as ckpt
from onestep.bench import latency_bench
from onestep.cli import main
from onestep.diffusion import EpsNet, NoiseSchedule, SamplerSpec, sample
from onestep.distill import (DistillConfig, DistillState, Generator, OneStepPolicy, generator_sample,
                             surrogate_objective, theta_gradient)
from onestep.envs import gaussian_bandit
from onestep.nn import Mlp, make_rng
from onestep.policy import DiffusionPolicy, Normalizer

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

pytestmark = pytest.mark.slow


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def report(path):
    return dict(line.split(",", 1) for line in Path(path).read_text().splitlines()[1:])


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"onestep {' '.join(map(str, argv))} exited with {code}"


def tiny_net(regime, seed, action_dim=3, obs_dim=2, temb=4):
    mlp = Mlp.init([action_dim + temb + obs_dim, 10, 10, action_dim], make_rng(seed), hidden_act="tanh")
    for b in mlp.biases:
        b += 0.1 * make_rng(seed, 1).standard_normal(b.shape)
    return EpsNet(mlp, NoiseSchedule(regime), action_dim, obs_dim, temb)


# ---------------------------------------------------------------- 1

def surrogate_fd_error(st, seed):
    r = make_rng(seed)
    gen = st.generator
    z, obs = r.standard_normal((1, gen.action_dim)), r.standard_normal((1, gen.obs_dim))
    k, noise = st.sample_k(r, 1), r.standard_normal((1, gen.action_dim))
    grads, coeff, _ = theta_gradient(st, z, obs, k, noise)
    h, worst = 1e-5, 0.0
    for p, g in zip(gen.params, grads):
        floor = 1e-3 * np.max(np.abs(g))
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = surrogate_objective(gen, z, obs, coeff)
            p[idx] = old - h
            fm = surrogate_objective(gen, z, obs, coeff)
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            scale = max(abs(fd), abs(g[idx]), floor)
            if scale > 0:
                worst = max(worst, abs(fd - g[idx]) / scale)
    return worst


def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for regime in ("ddpm", "edm"):
        for mode in ("stochastic", "deterministic"):
            teacher = tiny_net(regime, 0)
            assert teacher.mlp.n_params <= 1000
            st = DistillState.warm_start(teacher, DistillConfig(mode=mode))
            st.generator.net = tiny_net(regime, 1)
            if st.psi is not None:
                st.psi = tiny_net(regime, 2)
            worst = max(worst, *(surrogate_fd_error(st, s) for s in range(4)))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 1, worst <= 1e-6 and elapsed < 10,
            f"max relative FD error {worst:.2e} (<= 1e-6), {elapsed:.1f} s")


# ---------------------------------------------------------------- 2 and 5

@pytest.fixture(scope="module")
def gaussian_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("gaussian")
    t0 = time.perf_counter()
    cli("pretrain", "--config", CONFIGS / "gaussian.json", "--out", out)
    pretrain_time = time.perf_counter() - t0
    rep = report(out / "report.csv")
    t0 = time.perf_counter()
    cli("distill", "--config", CONFIGS / "gaussian.json", "--out", out)
    return out, rep, pretrain_time, time.perf_counter() - t0


def test_criterion_2_analytic_score_teacher(capsys, gaussian_run):
    _, rep, elapsed, _ = gaussian_run
    err = float(rep["eps_error_final"])
    verdict(capsys, 2, err <= 0.05 and elapsed < 120,
            f"eps MSE vs closed form {err:.4f} (<= 0.05), {elapsed:.0f} s")


def test_criterion_5_deterministic_mode_seeking(capsys, gaussian_run):
    out, _, t_pre, t_dist = gaussian_run
    ck = ckpt.load(out / "generator.json")
    gen = Generator(ck.net, "deterministic", ck.extra["t_fixed"])
    spec = gaussian_bandit()
    dev = 0.0
    for c, cond in enumerate(spec.conditions):
        a, nfe = generator_sample(gen, cond[None], make_rng(0))
        dev = max(dev, float(np.max(np.abs(a[0] - np.ravel(spec.means[c][0])))))
        assert nfe == 1
    elapsed = t_pre + t_dist
    verdict(capsys, 5, dev <= 0.05 and elapsed < 300,
            f"max |A - mu| {dev:.4f} (<= 0.05), {elapsed:.0f} s")


# ---------------------------------------------------------------- 3

def test_criterion_3_zero_gradient_fixed_point(capsys):
    t0 = time.perf_counter()
    teacher = tiny_net("ddpm", 0)
    st = DistillState.warm_start(teacher, DistillConfig())
    st.generator.net = tiny_net("ddpm", 5)
    st.psi = teacher
    r = make_rng(3)
    grads, _, _ = theta_gradient(st, r.standard_normal((64, 3)), r.standard_normal((64, 2)),
                                 st.sample_k(r, 64), r.standard_normal((64, 3)))
    biggest = max(float(np.max(np.abs(g))) for g in grads)
    elapsed = time.perf_counter() - t0
    verdict(capsys, 3, biggest == 0.0 and elapsed < 1,
            f"max |grad| with aliased score nets {biggest!r} (== 0), {elapsed:.2f} s")


# ---------------------------------------------------------------- 4 and 6

@pytest.fixture(scope="module")
def bimodal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bimodal")
    t0 = time.perf_counter()
    cli("pretrain", "--config", CONFIGS / "bandit.json", "--out", out)
    cli("distill", "--config", CONFIGS / "bandit.json", "--out", out)
    return out, time.perf_counter() - t0


def test_criterion_4_distribution_matching(capsys, bimodal_run):
    out, elapsed = bimodal_run
    rep = report(out / "report.csv")
    ratio = float(rep["mmd_ratio"])
    fracs = [float(rep["component_0_fraction"]), float(rep["component_1_fraction"])]
    ddim1 = float(rep["teacher_ddim1_mmd_ratio"])
    ok = ratio <= 2 and min(fracs) >= 0.2 and ddim1 >= 5 and elapsed < 600
    verdict(capsys, 4, ok,
            f"one-step MMD {ratio:.2f}x baseline (<= 2), mode shares {fracs[0]:.2f}/{fracs[1]:.2f} "
            f"(>= 0.20), teacher DDIM-1 MMD {ddim1:.1f}x (>= 5), {elapsed:.0f} s")


def test_criterion_6_distillation_budget(capsys, bimodal_run):
    out, _ = bimodal_run
    rep = report(out / "report.csv")
    teacher_steps = int(rep["teacher_steps"])
    first = rep["first_step_mmd_within_2x"]
    ok = first != "" and int(first) <= 0.1 * teacher_steps
    verdict(capsys, 6, ok,
            f"MMD within 2x baseline first at step {first or 'never'} "
            f"(<= {0.1 * teacher_steps:.0f} = 10% of {teacher_steps})")


# ---------------------------------------------------------------- 7

def test_criterion_7_nfe_exactness(capsys):
    obs = np.zeros((1, 14))
    counts = {}
    for regime, specs in (("ddpm", [SamplerSpec("ddpm"), SamplerSpec("ddim", 10)]),
                          ("edm", [SamplerSpec("edm_heun", 10), SamplerSpec("edm_heun", 18)])):
        sch = NoiseSchedule(regime)
        net = EpsNet.create(sch, 32, 14, (32,), 8, rng=make_rng(0))
        for spec in specs:
            counts[spec.label] = sample(net, obs, spec, sch, make_rng(1))[1]
    gen = Generator(EpsNet.create(NoiseSchedule(), 32, 14, (32,), 8, rng=make_rng(0)), "stochastic")
    counts["one-step"] = generator_sample(gen, obs, make_rng(1))[1]
    expected = {"ddpm": 100, "ddim-10": 10, "edm_heun-10": 19, "edm_heun-18": 35, "one-step": 1}
    verdict(capsys, 7, counts == expected, f"instrumented NFE {counts}")


# ---------------------------------------------------------------- 8

def test_criterion_8_wall_clock_speedup(capsys):
    sch = NoiseSchedule()
    net = EpsNet.create(sch, 32, 14, (256, 256, 256), 16, rng=make_rng(0))
    norm = Normalizer(-np.ones(2), np.ones(2))
    teacher = DiffusionPolicy(net, norm, 2, (16, 2))
    gen = OneStepPolicy(Generator(net.copy(), "stochastic"), norm, 2, (16, 2))
    obs = np.zeros(14)
    rows = latency_bench(teacher, [SamplerSpec("ddpm")], obs, 5)
    rows += latency_bench(gen, [None], obs, 5)
    speedup = rows[0]["wall_ms_mean"] / rows[1]["wall_ms_mean"]
    verdict(capsys, 8, speedup >= 30,
            f"DDPM-100 {rows[0]['wall_ms_mean']:.2f} ms vs one-step {rows[1]['wall_ms_mean']:.3f} ms: "
            f"{speedup:.0f}x (>= 30)")


# ---------------------------------------------------------------- 9

def test_criterion_9_closed_loop_responsiveness(capsys, tmp_path):
    cfg = CONFIGS / "reach2d.json"
    t0 = time.perf_counter()
    cli("pretrain", "--config", cfg, "--out", tmp_path)
    cli("distill", "--config", cfg, "--out", tmp_path)
    success = {}
    for role in ("teacher", "generator"):
        for variant, latency in (("static", "zero"), ("moving", "calibrated")):
            out = tmp_path / f"{role}_{variant}"
            cli("eval", "--config", cfg, "--out", out, "--checkpoint", tmp_path / f"{role}.json",
                "--variant", variant, "--latency", latency)
            success[role, variant] = float(report(out / "report.csv")["success_mean"])
    elapsed = time.perf_counter() - t0
    gap = abs(success["teacher", "static"] - success["generator", "static"])
    ok = (success["generator", "moving"] >= 0.9 and success["teacher", "moving"] <= 0.5
          and gap <= 0.1 and elapsed < 900)
    verdict(capsys, 9, ok,
            f"moving+calibrated latency: one-step {success['generator', 'moving']:.3f} (>= 0.9), "
            f"teacher {success['teacher', 'moving']:.3f} (<= 0.5); static parity "
            f"{success['generator', 'static']:.3f} vs {success['teacher', 'static']:.3f} "
            f"(gap {gap:.3f} <= 0.1), {elapsed:.0f} s")


# ---------------------------------------------------------------- 10

SMALL = {
    "bandit": {"task": "bandit", "bandit_samples": 300, "hidden": [32, 32], "pretrain_steps": 400,
               "pretrain_lr": 1e-3, "log_every": 100, "distill_steps": 60, "distill_batch": 32,
               "eval_every": 20, "metric_samples": 100, "reference_samples": 200,
               "mode_samples": 100},
    "reach2d": {"task": "reach2d", "n_demos": 10, "demo_length": 30, "hidden": [32, 32],
                "pretrain_steps": 100, "log_every": 50, "distill_steps": 20, "distill_batch": 16,
                "eval_every": 10, "eval_seeds": 2, "eval_inits": 3, "latency": "calibrated"},
}


def run_every_subcommand(cfg, out):
    cli("pretrain", "--config", cfg, "--out", out, "--seed", 7)
    files = {"pretrain/" + p: (out / p).read_bytes() for p in ("teacher.json", "curves.csv", "report.csv")}
    cli("distill", "--config", cfg, "--out", out, "--seed", 7)
    files.update({"distill/" + p: (out / p).read_bytes()
                  for p in ("generator.json", "curves.csv", "report.csv")})
    cli("sample", "--config", cfg, "--out", out, "--seed", 7, "--n", 4)
    files["sample/samples.jsonl"] = (out / "samples.jsonl").read_bytes()
    if json.loads(Path(cfg).read_text())["task"] == "reach2d":
        cli("eval", "--config", cfg, "--out", out / "eval", "--seed", 7,
            "--checkpoint", out / "generator.json")
        for p in ("report.csv", "episodes.csv"):
            files["eval/" + p] = (out / "eval" / p).read_bytes()
    # bench rows carry wall-clock times; only the sampler and NFE columns are reproducible
    cli("bench", "--config", cfg, "--out", out / "bench", "--seed", 7, "--repetitions", 1,
        "--checkpoint", out / "teacher.json", "--generator", out / "generator.json")
    rows = (out / "bench" / "report.csv").read_text().splitlines()
    files["bench/nfe"] = "\n".join(",".join(r.split(",")[:2]) for r in rows).encode()
    return files


def test_criterion_10_reproducibility(capsys, tmp_path):
    t0 = time.perf_counter()
    mismatched = []
    for task, d in SMALL.items():
        cfg = tmp_path / f"{task}.json"
        cfg.write_text(json.dumps(d))
        a = run_every_subcommand(cfg, tmp_path / task / "a")
        b = run_every_subcommand(cfg, tmp_path / task / "b")
        mismatched += [f"{task}:{k}" for k in a if a[k] != b[k]]
    elapsed = time.perf_counter() - t0
    verdict(capsys, 10, not mismatched and elapsed < 300,
            f"byte-identical re-runs of pretrain/distill/sample/eval/bench, "
            f"mismatches {mismatched or 'none'}, {elapsed:.0f} s")
