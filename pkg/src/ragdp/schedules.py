"""Discrete VP and VE noise schedules.

VP arrays are indexed by ``tau - 1`` for diffusion steps ``tau = 1..T``; step 0 is the
clean signal and has ``alpha_bar = 1`` by convention. VE sigmas are indexed ``0..T``
with ``sigma[T] = sigma_max`` and ``sigma[0] = sigma_min``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class VpSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float

    kind = "vp"

    def alpha_bar_at(self, tau: int) -> float:
        """Cumulative signal fraction at step ``tau``; exactly 1.0 at ``tau = 0``."""
        _check_step(tau, self.T)
        return 1.0 if tau == 0 else float(self.alpha_bar[tau - 1])

    def alpha_at(self, tau: int) -> float:
        _check_step(tau, self.T, allow_zero=False)
        return float(self.alpha[tau - 1])

    def beta_at(self, tau: int) -> float:
        _check_step(tau, self.T, allow_zero=False)
        return float(self.beta[tau - 1])

    def sigma_at(self, tau: int) -> float:
        _check_step(tau, self.T, allow_zero=False)
        return float(self.sigma[tau - 1])

    def params(self) -> dict:
        return {"kind": "vp", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VpSchedule):
            return NotImplemented
        return self.params() == other.params() and np.array_equal(self.alpha_bar, other.alpha_bar)


@dataclass(frozen=True, eq=False)
class VeSchedule:
    T: int
    sigma: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    kind = "ve"

    def sigma_at(self, index: int) -> float:
        _check_step(index, self.T)
        return float(self.sigma[index])

    def params(self) -> dict:
        return {
            "kind": "ve",
            "T": self.T,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VeSchedule):
            return NotImplemented
        return self.params() == other.params() and np.array_equal(self.sigma, other.sigma)


def _check_step(tau: int, T: int, allow_zero: bool = True) -> None:
    lo = 0 if allow_zero else 1
    if not lo <= tau <= T:
        raise ValueError(f"diffusion step {tau} outside [{lo}, {T}]")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def make_vp_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> VpSchedule:
    """Linear-beta DDPM schedule with ``T`` steps.

    ``beta_start == beta_end`` is allowed and gives a constant schedule.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return VpSchedule(
        T=T,
        beta=_readonly(beta),
        alpha=_readonly(alpha),
        alpha_bar=_readonly(alpha_bar),
        sigma=_readonly(np.sqrt(beta)),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def make_ve_schedule(
    T: int = 40, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0
) -> VeSchedule:
    """rho-warped (Karras) sigma grid with exact endpoints."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not sigma_min > 0:
        raise ValueError(f"sigma_min must be positive, got {sigma_min}")
    if not sigma_max > sigma_min:
        raise ValueError(f"sigma_max must exceed sigma_min, got {sigma_max} <= {sigma_min}")
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    i = np.arange(T + 1, dtype=np.float64)
    sigma = (hi + (1.0 - i / T) * (lo - hi)) ** rho
    sigma[0] = sigma_min
    sigma[T] = sigma_max
    return VeSchedule(
        T=T,
        sigma=_readonly(sigma),
        sigma_min=float(sigma_min),
        sigma_max=float(sigma_max),
        rho=float(rho),
    )


def schedule_from_params(params: dict) -> VpSchedule | VeSchedule:
    params = dict(params)
    kind = params.pop("kind")
    if kind == "vp":
        return make_vp_schedule(**params)
    if kind == "ve":
        return make_ve_schedule(**params)
    raise ValueError(f"unknown schedule kind {kind!r}")


def vp_mix(schedule: VpSchedule, tau: int, a: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Noise a clean chunk to step ``tau``: sqrt(abar) * a + sqrt(1 - abar) * eps."""
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ValueError(f"shape mismatch: action {a.shape} vs noise {eps.shape}")
    abar = schedule.alpha_bar_at(tau)
    if abar == 1.0:
        return a.copy()
    return np.sqrt(abar) * a + np.sqrt(1.0 - abar) * eps


def ve_mix(schedule: VeSchedule, a: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Noise a clean chunk to the top of the VE grid: a + sigma_max * eps."""
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ValueError(f"shape mismatch: action {a.shape} vs noise {eps.shape}")
    return a + schedule.sigma_max * eps
