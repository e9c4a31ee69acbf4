"""Retrieval-augmented policy inference and receding-horizon rollouts.

RAGDP-VP retrieves the nearest expert chunk, noises it to step ``tau* = floor((1-r) T)``
and runs the ancestral chain from there. RAGDP-VE noises the retrieved chunk with the
full ``sigma_max`` and runs ``n = floor((1-r) T)`` strided Euler steps.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ragdp.checkpoint import Normalization
from ragdp.kbase import KnowledgeBase
from ragdp.nn import PredictionType
from ragdp.samplers import CountingNet, SamplerKind, ve_euler, ve_indices, vp_ancestral, vp_fast
from ragdp.schedules import VeSchedule, VpSchedule, ve_mix, vp_mix

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    BASELINE_FULL = "baseline-full"
    BASELINE_FAST = "baseline-fast"
    RAGDP_VP = "ragdp-vp"
    RAGDP_VE = "ragdp-ve"


def leap_steps(r: float, T: int) -> int:
    """``floor((1 - r) * T)``, robust to binary round-off (r = 0.9, T = 40 gives 4, not 3)."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"leap ratio must lie in [0, 1], got {r}")
    return math.floor(round((1.0 - r) * T, 9))


def recovery_rate(accelerated: float, base: float) -> float | None:
    """Accelerated success over base success; ``None`` when the base never succeeds."""
    if base <= 0:
        return None
    return accelerated / base


@dataclass
class StepBudget:
    denoise_steps: int = 0
    network_evals: int = 0
    retrieval_count: int = 0

    def __iadd__(self, other: "StepBudget") -> "StepBudget":
        self.denoise_steps += other.denoise_steps
        self.network_evals += other.network_evals
        self.retrieval_count += other.retrieval_count
        return self


def _normalized_obs(kb: KnowledgeBase, obs: np.ndarray) -> np.ndarray:
    return (np.asarray(obs, dtype=np.float64) - kb.embedder.obs_mean) / kb.embedder.obs_std


def ragdp_vp_step(
    net,
    schedule: VpSchedule,
    kb: KnowledgeBase,
    obs: np.ndarray,
    r: float,
    rng: np.random.Generator,
    sampler: SamplerKind = SamplerKind.VP_ANCESTRAL,
    obs_norm: np.ndarray | None = None,
) -> np.ndarray:
    """One RAGDP-VP generation for a raw observation window; returns a raw action chunk.

    With ``r = 1`` the retrieved chunk is returned as is and the net is never called.
    ``sampler = VP_FAST`` swaps the ancestral chain for the deterministic one from the
    same warm start.
    """
    if not isinstance(schedule, VpSchedule):
        raise TypeError("RAGDP-VP needs a VP schedule")
    tau_star = leap_steps(r, schedule.T)
    _, a_ret, _ = kb.retrieve(obs)
    if tau_star == 0:
        return kb.denormalize(a_ret)
    o = _normalized_obs(kb, obs) if obs_norm is None else obs_norm
    eps = rng.standard_normal(a_ret.shape)
    x = vp_mix(schedule, tau_star, a_ret, eps)
    if SamplerKind(sampler) is SamplerKind.VP_FAST:
        x = vp_fast(net, schedule, o, x, tau_star, tau_star, rng)
    else:
        x = vp_ancestral(net, schedule, o, x, tau_star, rng)
    return kb.denormalize(x)


def ragdp_ve_step(
    net,
    schedule: VeSchedule,
    kb: KnowledgeBase,
    obs: np.ndarray,
    r: float,
    rng: np.random.Generator,
    obs_norm: np.ndarray | None = None,
) -> np.ndarray:
    """One RAGDP-VE generation; ``r`` must leave at least one Euler step."""
    if not isinstance(schedule, VeSchedule):
        raise TypeError("RAGDP-VE needs a VE schedule")
    n = leap_steps(r, schedule.T)
    if n < 1:
        raise ValueError(f"leap ratio {r} leaves no denoising steps for T={schedule.T}")
    _, a_ret, _ = kb.retrieve(obs)
    o = _normalized_obs(kb, obs) if obs_norm is None else obs_norm
    eps = rng.standard_normal(a_ret.shape)
    x = ve_mix(schedule, a_ret, eps)
    return kb.denormalize(ve_euler(net, schedule, o, x, n, rng))


def expected_budget(mode: Mode, schedule, r: float = 0.0, steps: int | None = None) -> StepBudget:
    """Network evaluations and retrievals one generation call is contracted to use."""
    T = schedule.T
    mode = Mode(mode)
    if mode is Mode.BASELINE_FULL:
        return StepBudget(T, T, 0)
    if mode is Mode.BASELINE_FAST:
        evals = len(ve_indices(T, steps)) - 1 if isinstance(schedule, VeSchedule) else steps
        return StepBudget(evals, evals, 0)
    n = leap_steps(r, T)
    if mode is Mode.RAGDP_VP:
        return StepBudget(n, n, 1)
    evals = len(ve_indices(T, n)) - 1
    return StepBudget(evals, evals, 1)


@dataclass(frozen=True)
class PolicyConfig:
    mode: Mode = Mode.BASELINE_FULL
    r: float = 0.0
    T: int = 100
    T_o: int = 2
    T_p: int = 16
    T_a: int = 8
    rng_seed: int = 0
    sampler: SamplerKind = SamplerKind.VP_ANCESTRAL
    steps: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "sampler", SamplerKind(self.sampler))
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"leap ratio must lie in [0, 1], got {self.r}")
        if min(self.T, self.T_o, self.T_p, self.T_a) < 1:
            raise ValueError("T and horizons must be positive")
        if self.T_a > self.T_p:
            raise ValueError(f"T_a ({self.T_a}) cannot exceed T_p ({self.T_p})")
        if self.mode is Mode.BASELINE_FAST and (self.steps is None or not 1 <= self.steps <= self.T):
            raise ValueError(f"baseline-fast needs 1 <= steps <= T, got {self.steps}")
        if self.mode is Mode.RAGDP_VE and leap_steps(self.r, self.T) < 1:
            raise ValueError(f"RAGDP-VE with r={self.r} leaves no denoising steps")

    @property
    def label(self) -> str:
        if self.mode in (Mode.RAGDP_VP, Mode.RAGDP_VE):
            return f"{self.mode.value}(r={self.r:g})"
        if self.mode is Mode.BASELINE_FAST:
            return f"{self.sampler.value}({self.steps})"
        return f"{self.sampler.value}({self.T})"


class Policy:
    """A configured generator of action chunks from raw observation windows."""

    def __init__(self, config: PolicyConfig, net, schedule, norm: Normalization, kb: KnowledgeBase | None = None):
        self.config = config
        self.net = net
        self.schedule = schedule
        self.norm = norm
        self.kb = kb
        is_ve = isinstance(schedule, VeSchedule)
        if schedule.T != config.T:
            raise ValueError(f"config T={config.T} but schedule has T={schedule.T}")
        want = PredictionType.SAMPLE if is_ve else PredictionType.EPSILON
        if PredictionType(net.prediction_type) is not want:
            raise ValueError(f"{schedule.kind.upper()} schedule needs a {want.value} net")
        if config.mode in (Mode.RAGDP_VP, Mode.RAGDP_VE):
            if kb is None:
                raise ValueError(f"{config.mode.value} needs a knowledge base")
            kb.check_compatible(config.T_o, config.T_p)
        if config.mode is Mode.RAGDP_VE and not is_ve:
            raise ValueError("RAGDP-VE needs a VE model")
        if config.mode is Mode.RAGDP_VP and is_ve:
            raise ValueError("RAGDP-VP is implemented for VP models")
        if is_ve and config.sampler is not SamplerKind.VE_EULER:
            raise ValueError("VE models are sampled with ve-euler")
        if not is_ve and config.sampler is SamplerKind.VE_EULER:
            raise ValueError("VP models need a VP sampler")

    def expected_budget(self) -> StepBudget:
        c = self.config
        return expected_budget(c.mode, self.schedule, c.r, c.steps)

    def generate(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, StepBudget]:
        """Raw (T_p, act_dim) action chunk for a raw (T_o, obs_dim) observation window."""
        c = self.config
        net = CountingNet(self.net)
        o = self.norm.normalize_obs(obs)
        shape = (c.T_p, self.norm.act_mean.shape[0])
        T = self.schedule.T
        if c.mode is Mode.RAGDP_VP:
            out = ragdp_vp_step(net, self.schedule, self.kb, obs, c.r, rng, c.sampler, obs_norm=o)
            return out, StepBudget(net.calls, net.calls, 1)
        if c.mode is Mode.RAGDP_VE:
            out = ragdp_ve_step(net, self.schedule, self.kb, obs, c.r, rng, obs_norm=o)
            return out, StepBudget(net.calls, net.calls, 1)
        steps = T if c.mode is Mode.BASELINE_FULL else c.steps
        if c.sampler is SamplerKind.VE_EULER:
            x = self.schedule.sigma_max * rng.standard_normal(shape)
            x = ve_euler(net, self.schedule, o, x, steps, rng)
        elif c.sampler is SamplerKind.VP_FAST:
            x = vp_fast(net, self.schedule, o, rng.standard_normal(shape), steps, T, rng)
        else:
            x = vp_ancestral(net, self.schedule, o, rng.standard_normal(shape), T, rng, steps=steps)
        return self.norm.denormalize_act(x), StepBudget(net.calls, net.calls, 0)


@dataclass
class EpisodeResult:
    env_seed: int
    success: bool = False
    steps: int = 0
    valid: bool = True
    error: str = ""
    gen_times: list[float] = field(default_factory=list)
    budget: StepBudget = field(default_factory=StepBudget)

    @property
    def generations(self) -> int:
        return len(self.gen_times)


def rollout(env, policy: Policy, max_steps: int, rng: np.random.Generator, env_seed: int) -> EpisodeResult:
    """Closed-loop execution: generate a chunk, run its first ``T_a`` actions, repeat."""
    c = policy.config
    result = EpisodeResult(env_seed)
    try:
        obs = env.reset(env_seed)
        history = [obs] * c.T_o
        while result.steps < max_steps:
            window = np.stack(history[-c.T_o :])
            t0 = time.perf_counter()
            actions, budget = policy.generate(window, rng)
            result.gen_times.append(time.perf_counter() - t0)
            result.budget += budget
            for a in actions[: c.T_a]:
                obs, done = env.step(a)
                history.append(obs)
                result.steps += 1
                if done:
                    result.success = True
                    return result
                if result.steps >= max_steps:
                    break
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        result.valid = False
        result.error = f"{type(exc).__name__}: {exc}"
        log.warning("episode %d invalid: %s", env_seed, result.error)
    return result


def episode_rng(*keys: int) -> np.random.Generator:
    """Independent stream per episode, e.g. ``episode_rng(policy_seed, train_seed, env_seed)``."""
    return np.random.default_rng([int(k) for k in keys])
