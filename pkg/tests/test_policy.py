import logging

import numpy as np
import pytest

from onestep.diffusion import EpsNet, NoiseSchedule, SamplerSpec
from onestep.envs import (LatencyModel, Reach2D, ScriptedExpert, TargetScript, assign_components,
                          bimodal_bandit, calibrate_latency, gen_bandit_dataset, make_reach)
from onestep.nn import TrainingError, ValidationError, make_rng
from onestep.policy import (CLAMP, Dataset, DiffusionPolicy, ExpertPolicy, Normalizer, PretrainConfig,
                            build_dataset, pretrain, run_receding_horizon, window_count)

WINDOWS_100x40 = 2300


def synthetic_episodes(n, length, rng, state_dim=7):
    return [(rng.standard_normal((length, state_dim)), rng.uniform(-0.8, 0.8, (length - 1, 2)))
            for _ in range(n)]


# ---------------------------------------------------------------- data

def test_single_window_episode():
    ds = build_dataset(synthetic_episodes(1, 2 + 16, make_rng(0)), 2, 16)
    assert len(ds) == 1
    assert ds.obs.shape == (1, 14) and ds.chunk_shape == (16, 2)


def test_window_count_regression():
    ds = build_dataset(synthetic_episodes(100, 40, make_rng(1)), 2, 16)
    assert len(ds) == window_count(40, 2, 16) * 100 == WINDOWS_100x40


def test_windows_align_observations_and_chunks():
    states = np.arange(20 * 7, dtype=float).reshape(20, 7)
    actions = np.arange(19 * 2, dtype=float).reshape(19, 2) / 100
    ds = build_dataset([(states, actions)], 2, 16, normalizer=Normalizer.identity(2))
    np.testing.assert_array_equal(ds.obs[0], states[0:2].ravel())
    np.testing.assert_allclose(ds.chunks[0], actions[1:17])
    np.testing.assert_allclose(ds.chunks[-1], actions[3:19])


def test_constant_action_normalizes_linearly():
    eps = [(np.zeros((20, 7)), np.full((19, 2), 0.5))]
    ds = build_dataset(eps, 2, 16, normalizer=Normalizer(-np.ones(2), np.ones(2)))
    np.testing.assert_array_equal(ds.chunks, 0.5)


def test_short_episodes_are_skipped(caplog):
    rng = make_rng(2)
    with caplog.at_level(logging.WARNING):
        ds = build_dataset(synthetic_episodes(1, 10, rng) + synthetic_episodes(1, 18, rng), 2, 16)
    assert len(ds) == 1 and "skipping episode 0" in caplog.text
    with pytest.raises(ValidationError):
        build_dataset(synthetic_episodes(2, 10, rng), 2, 16)


def test_normalizer_round_trip_and_clamp():
    rng = make_rng(3)
    data = rng.uniform(-3, 5, (200, 2))
    norm = Normalizer.fit(data)
    y = norm.normalize(data)
    assert y.min() == pytest.approx(-1.0) and y.max() == pytest.approx(1.0)
    assert np.max(np.abs(norm.denormalize(y) - data)) <= 1e-12
    out = norm.normalize(np.array([[100.0, 0.0]]))
    assert out[0, 0] == CLAMP and norm.clamped == 1
    with pytest.raises(ValidationError):
        Normalizer(np.ones(2), np.ones(2))
    assert Normalizer.from_dict(norm.to_dict()).lo.tolist() == norm.lo.tolist()


# ---------------------------------------------------------------- pretraining

def small_reach_dataset():
    return build_dataset(synthetic_episodes(5, 30, make_rng(4)), 2, 16)


def test_zero_steps_returns_initialisation():
    ds = small_reach_dataset()
    sch = NoiseSchedule()
    init = EpsNet.create(sch, 32, 14, (16,), 4, rng=make_rng(0, 0))
    res = pretrain(ds, PretrainConfig(steps=0, hidden=(16,), temb_dim=4), sch,
                   net=init.copy())
    for a, b in zip(res.net.params, init.params):
        np.testing.assert_array_equal(a, b)
    assert res.steps == 0 and res.losses == []


def test_pretraining_is_seed_deterministic():
    ds = small_reach_dataset()
    cfg = PretrainConfig(steps=30, batch_size=16, hidden=(16,), temb_dim=4, log_every=10, seed=5)
    a = pretrain(ds, cfg, NoiseSchedule())
    b = pretrain(ds, cfg, NoiseSchedule())
    for p, q in zip(a.net.params, b.net.params):
        np.testing.assert_array_equal(p, q)
    assert [s for s, _ in a.losses] == [10, 20, 30]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good_network():
    ds = small_reach_dataset()
    cfg = PretrainConfig(steps=200, batch_size=16, lr=1e12, hidden=(16,), temb_dim=4, log_every=1)
    with pytest.raises(TrainingError) as info:
        pretrain(ds, cfg, NoiseSchedule())
    assert info.value.last_good is not None
    assert all(np.all(np.isfinite(p)) for p in info.value.last_good.params)


@pytest.fixture(scope="module")
def bimodal_teacher():
    spec = bimodal_bandit()
    obs, chunks, _ = gen_bandit_dataset(spec, 4000, make_rng(0, 10))
    ds = Dataset.from_pairs(obs, chunks, Normalizer.identity(1), 1)
    cfg = PretrainConfig(steps=6000, batch_size=256, lr=1e-3, weight_decay=0.0, hidden=(64, 64),
                         log_every=0)
    net = pretrain(ds, cfg, NoiseSchedule()).net
    return spec, DiffusionPolicy(net, ds.normalizer, 1, (2, 1))


# ---------------------------------------------------------------- prediction

def test_predict_chunk_nfe_shape_and_determinism():
    ds = small_reach_dataset()
    sch = NoiseSchedule()
    net = EpsNet.create(sch, 32, 14, (16,), 4, rng=make_rng(0))
    pol = DiffusionPolicy(net, ds.normalizer, 2, (16, 2))
    obs = ds.obs[0]
    a, nfe = pol.predict_chunk(obs, SamplerSpec("ddpm"), make_rng(1))
    b, _ = pol.predict_chunk(obs, SamplerSpec("ddpm"), make_rng(1))
    assert nfe == 100 and a.shape == (16, 2)
    np.testing.assert_array_equal(a, b)
    assert pol.predict_chunk(obs, SamplerSpec("ddim", 10), make_rng(1))[1] == 10


@pytest.mark.slow
def test_teacher_covers_both_modes(bimodal_teacher):
    spec, pol = bimodal_teacher
    x, nfe = pol.sample_normalized(spec.conditions[0][None], SamplerSpec("ddpm"), make_rng(7), n=500)
    frac = np.bincount(assign_components(spec, 0, x), minlength=2) / 500
    assert nfe == 100
    assert frac.min() >= 0.20


# ---------------------------------------------------------------- receding horizon

class FrozenPolicy:
    """Returns the same chunk every call and reports a fixed NFE."""

    chunk_shape = (16, 2)
    n_obs = 2

    def __init__(self, chunk, nfe):
        self.chunk, self.nfe = chunk, nfe

    def predict_chunk(self, obs, sampler, rng):
        return self.chunk.copy(), self.nfe


class StaleExpert:
    """Scripted expert that plans only from the observation it was handed,
    extrapolating the target at the velocity seen across the two stacked frames."""

    chunk_shape = (16, 2)
    n_obs = 2

    def __init__(self, nfe, dt=0.1, v_max=0.8):
        self.nfe, self.dt, self.v_max = nfe, dt, v_max

    def predict_chunk(self, obs, sampler, rng):
        prev, state = np.array(obs[:7], dtype=float), np.array(obs[7:], dtype=float)
        velocity = (state[2:4] - prev[2:4]) / self.dt
        expert = ScriptedExpert()
        out = np.zeros((16, 2))
        for i in range(16):
            out[i] = expert.action(state, self.v_max)
            state[:2] += out[i] * self.dt
            state[2:4] += velocity * self.dt
        return out, self.nfe


def test_scripted_controller_succeeds_on_static_task():
    env = make_reach(make_rng(3), "static")
    rec = run_receding_horizon(ExpertPolicy(env), env, 8, None, LatencyModel(), make_rng(0))
    assert rec.success and rec.reason == "captured"


def test_zero_latency_isolates_nfe():
    chunk = make_rng(0).uniform(-0.5, 0.5, (16, 2))
    recs = []
    for nfe in (1, 100):
        env = make_reach(make_rng(8), "moving")
        recs.append(run_receding_horizon(FrozenPolicy(chunk, nfe), env, 8, None,
                                         LatencyModel(0.0, 0.0), make_rng(0)))
    np.testing.assert_array_equal(np.array(recs[0].states), np.array(recs[1].states))
    assert recs[0].total_nfe * 100 == recs[1].total_nfe


def test_simulated_time_accounting():
    env = Reach2D(np.zeros(2), TargetScript(np.array([50.0, 0.0])), horizon=40)
    chunk = np.tile([0.3, 0.0], (16, 1))
    lat = LatencyModel(0.002, 0.01)
    rec = run_receding_horizon(FrozenPolicy(chunk, 7), env, 8, None, lat, make_rng(0))
    assert len(rec.actions) == 40 and rec.nfe == [7] * 5
    assert rec.sim_time == pytest.approx(sum(rec.latencies) + 40 * env.dt, abs=1e-12)
    assert rec.latencies[0] == pytest.approx(0.01 + 7 * 0.002)


def test_t_act_longer_than_chunk_is_rejected():
    env = make_reach(make_rng(0), "static")
    with pytest.raises(ValidationError):
        run_receding_horizon(FrozenPolicy(np.zeros((16, 2)), 1), env, 17)


def test_faulty_policy_marks_episode_failed():
    class Broken(FrozenPolicy):
        def predict_chunk(self, obs, sampler, rng):
            raise RuntimeError("boom")

    rec = run_receding_horizon(Broken(None, 1), make_reach(make_rng(0), "static"), 8)
    assert not rec.success and "boom" in rec.reason


def test_calibrated_latency_separates_slow_and_fast_planners():
    ref = make_reach(make_rng(0), "moving")
    lat = LatencyModel(calibrate_latency(ref, 100, 1))
    outcomes = {}
    for nfe in (1, 100):
        wins = 0
        for i in range(10):
            env = make_reach(make_rng(21, i), "moving")
            wins += run_receding_horizon(StaleExpert(nfe), env, 8, None, lat, make_rng(0)).success
        outcomes[nfe] = wins / 10
    assert outcomes[1] == 1.0
    assert outcomes[100] == 0.0
