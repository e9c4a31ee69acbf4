"""Reverse-diffusion loops: DDPM ancestral, DDIM-style deterministic, and VE Euler.

Every sampler accepts any ``net(x, level, obs)`` callable with a ``prediction_type``
attribute, works on single chunks ``(T_p, act_dim)`` or batches ``(B, T_p, act_dim)``,
and can start from pure noise or from a warm start already at the starting level.
"""

from __future__ import annotations

import enum

import numpy as np

from ragdp.nn import PredictionType
from ragdp.schedules import VeSchedule, VpSchedule


class SamplerKind(str, enum.Enum):
    VP_ANCESTRAL = "vp-ancestral"
    VP_FAST = "vp-fast"
    VE_EULER = "ve-euler"


class CountingNet:
    """Wraps a denoiser and counts forward calls."""

    def __init__(self, net):
        self.net = net
        self.calls = 0
        self.prediction_type = net.prediction_type

    def __call__(self, x, level, obs):
        self.calls += 1
        return self.net(x, level, obs)


class AnalyticGaussianNet:
    """Exact denoiser for a Gaussian target ``N(mu, s^2 I)`` that ignores observations.

    Epsilon flavour (VP): ``eps_hat = sqrt(1-abar) (x - sqrt(abar) mu) / (abar s^2 + 1 - abar)``.
    Sample flavour (VE): ``D = (s^2 x + sigma^2 mu) / (sigma^2 + s^2)``.
    """

    def __init__(self, mu: float, s: float, schedule: VpSchedule | VeSchedule):
        self.mu = float(mu)
        self.s = float(s)
        self.schedule = schedule
        if isinstance(schedule, VeSchedule):
            self.prediction_type = PredictionType.SAMPLE
        else:
            self.prediction_type = PredictionType.EPSILON

    def marginal(self, level) -> tuple[float, float]:
        """Mean and variance of the noised target at ``level``."""
        if self.prediction_type is PredictionType.SAMPLE:
            return self.mu, self.s**2 + float(level) ** 2
        abar = self.schedule.alpha_bar_at(int(level))
        return np.sqrt(abar) * self.mu, abar * self.s**2 + 1.0 - abar

    def score(self, x, level):
        mean, var = self.marginal(level)
        return -(np.asarray(x, dtype=np.float64) - mean) / var

    def __call__(self, x, level, obs=None):
        x = np.asarray(x, dtype=np.float64)
        level = float(np.asarray(level).reshape(-1)[0])
        if self.prediction_type is PredictionType.SAMPLE:
            s2, sig2 = self.s**2, level**2
            return (s2 * x + sig2 * self.mu) / (sig2 + s2)
        abar = self.schedule.alpha_bar_at(int(level))
        return np.sqrt(1.0 - abar) * (x - np.sqrt(abar) * self.mu) / (abar * self.s**2 + 1.0 - abar)


def strided_steps(start: int, steps: int) -> np.ndarray:
    """``steps + 1`` strictly decreasing integers from ``start`` to 0, uniformly spaced."""
    if not 1 <= steps <= start:
        raise ValueError(f"need 1 <= steps <= {start}, got {steps}")
    if steps == start:
        return np.arange(start, -1, -1, dtype=np.int64)
    seq = np.rint(np.linspace(start, 0, steps + 1)).astype(np.int64)
    assert np.all(np.diff(seq) < 0)
    return seq


def _require(net, kind: PredictionType, sampler: str) -> None:
    if PredictionType(net.prediction_type) is not kind:
        raise ValueError(f"{sampler} needs a {kind.value}-prediction net")


def vp_ancestral(
    net,
    schedule: VpSchedule,
    obs,
    init: np.ndarray,
    tau_start: int,
    rng: np.random.Generator,
    steps: int | None = None,
) -> np.ndarray:
    """DDPM ancestral sampling from ``tau_start`` down to 0.

    With ``steps`` omitted (or equal to ``tau_start``) every step is visited and the net is
    called ``tau_start`` times. A smaller ``steps`` respaces the chain over a strided
    subsequence, using the compound ``alpha = abar_t / abar_t'`` for each jump.
    No noise is injected on the final transition.
    """
    _require(net, PredictionType.EPSILON, "vp_ancestral")
    if not 0 <= tau_start <= schedule.T:
        raise ValueError(f"tau_start {tau_start} outside [0, {schedule.T}]")
    x = np.array(init, dtype=np.float64)
    if tau_start == 0:
        return x
    seq = strided_steps(tau_start, tau_start if steps is None else steps)
    for t, t_next in zip(seq[:-1], seq[1:]):
        t, t_next = int(t), int(t_next)
        abar = schedule.alpha_bar_at(t)
        if t_next == t - 1:
            alpha, beta, sigma = schedule.alpha_at(t), schedule.beta_at(t), schedule.sigma_at(t)
        else:
            alpha = abar / schedule.alpha_bar_at(t_next)
            beta = 1.0 - alpha
            sigma = np.sqrt(beta)
        eps_hat = net(x, t, obs)
        x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t_next > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def vp_fast(
    net,
    schedule: VpSchedule,
    obs,
    init: np.ndarray,
    steps: int,
    tau_start: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Deterministic first-order probability-flow sampling (DDIM, eta = 0).

    ``steps`` network calls over a uniformly strided subsequence from ``tau_start`` to 0.
    ``rng`` is accepted for interface symmetry and never used.
    """
    _require(net, PredictionType.EPSILON, "vp_fast")
    if not 0 <= tau_start <= schedule.T:
        raise ValueError(f"tau_start {tau_start} outside [0, {schedule.T}]")
    if steps > tau_start:
        raise ValueError(f"steps ({steps}) cannot exceed tau_start ({tau_start})")
    x = np.array(init, dtype=np.float64)
    seq = strided_steps(tau_start, steps)
    for t, t_next in zip(seq[:-1], seq[1:]):
        abar = schedule.alpha_bar_at(int(t))
        abar_next = schedule.alpha_bar_at(int(t_next))
        eps_hat = net(x, int(t), obs)
        x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        x = x0_hat if t_next == 0 else np.sqrt(abar_next) * x0_hat + np.sqrt(1.0 - abar_next) * eps_hat
    return x


def ve_indices(T: int, n_steps: int) -> list[int]:
    """Grid indices visited by the VE loop: stride ``T // n_steps``, then clamp to 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    stride = T // n_steps
    seq = [T - j * stride for j in range(n_steps + 1)]
    if seq[-1] != 0:
        seq.append(0)
    return seq


def ve_score(denoised: np.ndarray, x: np.ndarray, sigma: float) -> np.ndarray:
    return (denoised - x) / (sigma * sigma)


def ve_euler(
    net,
    schedule: VeSchedule,
    obs,
    init: np.ndarray,
    n_steps: int,
    rng: np.random.Generator | None = None,
    start_index: int | None = None,
) -> np.ndarray:
    """Euler steps of the probability-flow ODE down the sigma grid.

    Update per visited pair ``(sigma, sigma_next)``:
    ``x <- x + sigma * (sigma - sigma_next) * score(x, sigma)``.
    ``init`` must already sit at ``sigma_max`` (or at ``sigma[start_index]``).
    """
    _require(net, PredictionType.SAMPLE, "ve_euler")
    top = schedule.T if start_index is None else start_index
    seq = ve_indices(top, n_steps)
    x = np.array(init, dtype=np.float64)
    for i, i_next in zip(seq[:-1], seq[1:]):
        sigma = schedule.sigma_at(i)
        sigma_next = schedule.sigma_at(i_next)
        score = ve_score(net(x, sigma, obs), x, sigma)
        x = x + sigma * (sigma - sigma_next) * score
    return x
