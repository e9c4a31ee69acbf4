from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragdp import envs, kbase
from ragdp.checkpoint import Normalization
from ragdp.errors import MetadataMismatchError
from ragdp.kbase import Embedder, KnowledgeBase
from ragdp.nn import PredictionType, ScoreNet
from ragdp.policy import (
    Mode,
    Policy,
    PolicyConfig,
    StepBudget,
    episode_rng,
    expected_budget,
    leap_steps,
    ragdp_ve_step,
    ragdp_vp_step,
    recovery_rate,
    rollout,
)
from ragdp.samplers import AnalyticGaussianNet, CountingNet, SamplerKind, ve_euler, ve_indices, vp_ancestral
from ragdp.schedules import make_ve_schedule, make_vp_schedule

R_GRID = [0.0, 0.25, 0.5, 0.75, 0.875, 0.9, 0.95, 1.0]
MU, S = 2.0, 0.5


def gaussian_kb(a_ret: float, width: int, mean=0.0, std=1.0) -> KnowledgeBase:
    """Single-entry KB whose value is a constant chunk of ``width`` scalar actions."""
    return KnowledgeBase(
        keys=np.zeros((1, 1)),
        values=np.full((1, width, 1), a_ret),
        embedder=Embedder(np.zeros(1), np.ones(1)),
        act_mean=np.array([mean]),
        act_std=np.array([std]),
        meta={"T_o": 1, "T_p": width},
    )


OBS = np.zeros((1, 1))


@pytest.mark.parametrize("r,T,want", [(0.9, 40, 4), (0.95, 100, 5), (0.75, 40, 10), (0.875, 40, 5), (0.0, 100, 100), (1.0, 40, 0), (0.5, 40, 20)])
def test_leap_steps_examples(r, T, want):
    assert leap_steps(r, T) == want


@given(k=st.integers(0, 1000), T=st.integers(1, 1000))
def test_leap_steps_is_exact_floor_for_decimal_ratios(k, T):
    r = float(Fraction(k, 1000))
    assert leap_steps(r, T) == (Fraction(1000 - k, 1000) * T).__floor__()


def test_leap_steps_range():
    with pytest.raises(ValueError):
        leap_steps(1.01, 40)
    with pytest.raises(ValueError):
        leap_steps(-0.1, 40)


def test_recovery_rate_examples():
    assert recovery_rate(0.5, 1.0) == 0.5
    assert recovery_rate(0.7, 0.7) == 1.0
    assert recovery_rate(0.9, 0.6) == pytest.approx(1.5)
    assert recovery_rate(0.3, 0.0) is None


def test_replay_limit_is_bit_exact_and_draws_nothing():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((7, 16, 2)).astype(np.float32)
    keys = rng.standard_normal((7, 8)).astype(np.float32)
    kb = KnowledgeBase(keys, values, Embedder(np.zeros(4), np.ones(4)), np.zeros(2), np.ones(2), meta={"T_o": 2, "T_p": 16})
    net = CountingNet(AnalyticGaussianNet(0.0, 1.0, make_vp_schedule(100, 1e-3, 0.2)))
    for j in range(7):
        state = np.random.default_rng(5)
        before = state.bit_generator.state
        out = ragdp_vp_step(net, make_vp_schedule(100, 1e-3, 0.2), kb, keys[j].reshape(2, 4).astype(np.float64), 1.0, state)
        assert out.tobytes() == values[j].astype(np.float64).tobytes()
        assert state.bit_generator.state == before
    assert net.calls == 0


@pytest.mark.parametrize("T", [40, 100])
@pytest.mark.parametrize("r", R_GRID)
def test_vp_budget_exact(r, T):
    sched = make_vp_schedule(T, 1e-3, 0.2)
    net = CountingNet(AnalyticGaussianNet(MU, S, sched))
    ragdp_vp_step(net, sched, gaussian_kb(1.0, 4), OBS, r, np.random.default_rng(0))
    assert net.calls == int((1 - Fraction(str(r))) * T // 1)
    assert expected_budget(Mode.RAGDP_VP, sched, r) == StepBudget(net.calls, net.calls, 1)


@pytest.mark.parametrize("T", [40, 100])
@pytest.mark.parametrize("r", R_GRID)
def test_ve_budget_exact(r, T):
    sched = make_ve_schedule(T)
    n = int((1 - Fraction(str(r))) * T // 1)
    net = CountingNet(AnalyticGaussianNet(MU, S, sched))
    if n < 1:
        with pytest.raises(ValueError):
            ragdp_ve_step(net, sched, gaussian_kb(1.0, 4), OBS, r, np.random.default_rng(0))
        with pytest.raises(ValueError):
            PolicyConfig(mode=Mode.RAGDP_VE, r=r, T=T, sampler=SamplerKind.VE_EULER)
        return
    ragdp_ve_step(net, sched, gaussian_kb(1.0, 4), OBS, r, np.random.default_rng(0))
    stride = T // n
    clamp = 1 if T - n * stride else 0
    assert net.calls == n + clamp
    assert expected_budget(Mode.RAGDP_VE, sched, r) == StepBudget(n + clamp, n + clamp, 1)


def test_ve_leap_arithmetic():
    assert ve_indices(40, leap_steps(0.75, 40)) == list(range(40, -1, -4))
    assert ve_indices(40, leap_steps(0.9, 40)) == [40, 30, 20, 10, 0]


def test_vp_r0_matches_plain_ddpm_in_distribution():
    sched = make_vp_schedule(100, 1e-3, 0.2)
    net = AnalyticGaussianNet(MU, S, sched)
    kb = gaussian_kb(-3.0, 2000)  # retrieved signal far from the target
    rng = np.random.default_rng(0)
    warm = np.concatenate([ragdp_vp_step(net, sched, kb, OBS, 0.0, rng) for _ in range(5)]).ravel()
    plain = vp_ancestral(net, sched, None, rng.standard_normal((10_000, 1, 1)), 100, rng).ravel()
    se_mean = S / np.sqrt(10_000)
    assert abs(warm.mean() - plain.mean()) < 4 * np.sqrt(2) * se_mean
    assert abs(warm.std() - plain.std()) < 4 * np.sqrt(2) * S / np.sqrt(2 * 10_000)


def test_ve_r0_matches_pure_noise_euler_in_distribution():
    sched = make_ve_schedule(40)
    net = AnalyticGaussianNet(MU, S, sched)
    kb = gaussian_kb(-3.0, 2000)
    rng = np.random.default_rng(1)
    warm = np.concatenate([ragdp_ve_step(net, sched, kb, OBS, 0.0, rng) for _ in range(5)]).ravel()
    plain = ve_euler(net, sched, None, 80.0 * rng.standard_normal((10_000, 1, 1)), 40).ravel()
    # the retrieved offset of -3 survives scaled by the Euler gain (~s/80), far below MC error
    assert abs(warm.mean() - plain.mean()) < 4 * np.sqrt(2) * plain.std() / np.sqrt(10_000)
    assert abs(warm.std() - plain.std()) < 4 * plain.std() / np.sqrt(10_000)


def test_denormalization_uses_kb_statistics():
    sched = make_vp_schedule(100, 1e-3, 0.2)
    kb = gaussian_kb(0.5, 3, mean=10.0, std=2.0)
    out = ragdp_vp_step(None, sched, kb, OBS, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, np.full((3, 1), 11.0))


def test_schedule_kind_checked():
    with pytest.raises(TypeError):
        ragdp_vp_step(None, make_ve_schedule(40), gaussian_kb(0.0, 2), OBS, 0.5, np.random.default_rng(0))
    with pytest.raises(TypeError):
        ragdp_ve_step(None, make_vp_schedule(40), gaussian_kb(0.0, 2), OBS, 0.5, np.random.default_rng(0))


@pytest.mark.parametrize(
    "kw",
    [
        dict(r=1.5),
        dict(r=-0.1),
        dict(T_a=17),
        dict(T_o=0),
        dict(mode="baseline-fast"),
        dict(mode="baseline-fast", steps=101),
        dict(mode="ragdp-ve", r=1.0, T=40, sampler="ve-euler"),
        dict(mode="warp-drive"),
    ],
)
def test_policy_config_validation(kw):
    with pytest.raises(ValueError):
        PolicyConfig(**kw)


def test_policy_config_labels():
    assert PolicyConfig(mode="ragdp-vp", r=0.95).label == "ragdp-vp(r=0.95)"
    assert PolicyConfig(mode="baseline-fast", steps=5).label == "vp-ancestral(5)"


def small_net(pred="epsilon", seed=0, T_p=16):
    return ScoreNet(4, 2, 2, T_p, hidden=(16, 16), embed_dim=8, prediction_type=pred).init_params(np.random.default_rng(seed))


@pytest.fixture(scope="module")
def demo():
    ds = envs.generate_dataset(envs.PointReach2D(), envs.PointReachExpert(), 12, seed=7)
    return ds, kbase.build(ds, 2, 16), Normalization.from_dataset(ds)


def test_policy_construction_checks(demo):
    ds, kb, norm = demo
    vp, ve = make_vp_schedule(100, 1e-3, 0.2), make_ve_schedule(40)
    with pytest.raises(ValueError, match="knowledge base"):
        Policy(PolicyConfig(mode="ragdp-vp", r=0.9), small_net(), vp, norm)
    with pytest.raises(ValueError):
        Policy(PolicyConfig(T=40), small_net(), vp, norm)
    with pytest.raises(ValueError):
        Policy(PolicyConfig(T=40, sampler="ve-euler"), small_net(), ve, norm)
    with pytest.raises(ValueError):
        Policy(PolicyConfig(mode="ragdp-ve", r=0.5, T=100), small_net(), vp, norm, kb)
    with pytest.raises(ValueError):
        Policy(PolicyConfig(T=40), small_net("sample"), ve, norm)
    with pytest.raises(MetadataMismatchError):
        Policy(PolicyConfig(mode="ragdp-vp", r=0.9, T_o=3), small_net(), vp, norm, kb)


@pytest.mark.parametrize(
    "cfg,kind",
    [
        (dict(), "vp"),
        (dict(mode="baseline-fast", steps=5), "vp"),
        (dict(mode="baseline-fast", steps=7, sampler="vp-fast"), "vp"),
        (dict(mode="ragdp-vp", r=0.95), "vp"),
        (dict(mode="ragdp-vp", r=0.9, sampler="vp-fast"), "vp"),
        (dict(mode="ragdp-vp", r=1.0), "vp"),
        (dict(T=40, sampler="ve-euler"), "ve"),
        (dict(T=40, mode="baseline-fast", steps=3, sampler="ve-euler"), "ve"),
        (dict(T=40, mode="ragdp-ve", r=0.75, sampler="ve-euler"), "ve"),
        (dict(T=40, mode="ragdp-ve", r=0.9, sampler="ve-euler"), "ve"),
    ],
)
def test_generate_budget_matches_contract(demo, cfg, kind):
    ds, kb, norm = demo
    sched = make_vp_schedule(100, 1e-3, 0.2) if kind == "vp" else make_ve_schedule(40)
    net = small_net("epsilon" if kind == "vp" else "sample")
    policy = Policy(PolicyConfig(**cfg), net, sched, norm, kb)
    chunk, budget = policy.generate(ds.episodes[0].observations[:2], np.random.default_rng(0))
    assert chunk.shape == (16, 2) and np.all(np.isfinite(chunk))
    assert budget == policy.expected_budget()
    assert budget.retrieval_count == (1 if policy.config.mode in (Mode.RAGDP_VP, Mode.RAGDP_VE) else 0)


class ExpertChunkPolicy:
    """Plans T_p expert actions ahead on a scratch copy of the dynamics."""

    def __init__(self, config):
        self.config = config
        self.scratch = envs.PointReach2D()
        self.expert = envs.PointReachExpert(mode=0)

    def generate(self, obs, rng):
        s = self.scratch.set_state(obs[-1])
        out = []
        for _ in range(self.config.T_p):
            a = self.expert(s)
            out.append(a)
            s, _ = self.scratch.step(a)
        return np.array(out), StepBudget()


def test_expert_replayed_through_rollout_always_succeeds():
    policy = ExpertChunkPolicy(PolicyConfig())
    results = [rollout(envs.PointReach2D(), policy, 300, np.random.default_rng(0), 10_000 + s) for s in range(30)]
    assert all(r.success and r.valid for r in results)
    assert all(r.steps <= 300 for r in results)


def test_degenerate_kb_replay_matches_expert(demo):
    ds, _, norm = demo
    clean = envs.generate_dataset(envs.PointReach2D(), envs.PointReachExpert(), 10, seed=11)
    kb = kbase.build(clean, 2, 16)
    policy = Policy(PolicyConfig(mode="ragdp-vp", r=1.0), small_net(), make_vp_schedule(100, 1e-3, 0.2), Normalization.from_dataset(clean), kb)
    for ep in clean.episodes:
        res = rollout(envs.PointReach2D(), policy, 300, np.random.default_rng(0), ep.seed)
        assert res.success
        assert res.budget.network_evals == 0
        assert res.budget.retrieval_count == res.generations


class NanNet:
    prediction_type = PredictionType.EPSILON

    def __call__(self, x, level, obs):
        return np.full_like(x, np.nan)


def test_faulting_episode_is_marked_invalid(demo):
    _, _, norm = demo
    policy = Policy(PolicyConfig(T=5), NanNet(), make_vp_schedule(5, 1e-3, 0.2), norm)
    res = rollout(envs.PointReach2D(), policy, 50, np.random.default_rng(0), 3)
    assert not res.valid and not res.success
    assert "invalid action" in res.error


def test_rollout_is_deterministic(demo):
    _, kb, norm = demo
    policy = Policy(PolicyConfig(mode="ragdp-vp", r=0.9), small_net(), make_vp_schedule(100, 1e-3, 0.2), norm, kb)
    a = rollout(envs.PointReach2D(), policy, 40, episode_rng(0, 1, 5), 5)
    b = rollout(envs.PointReach2D(), policy, 40, episode_rng(0, 1, 5), 5)
    assert (a.success, a.steps, a.budget) == (b.success, b.steps, b.budget)
    assert a.generations == 5  # 40 steps in chunks of T_a = 8
    assert a.budget == StepBudget(50, 50, 5)
