"""Conditional residual-MLP denoiser, score-matching loss and an Adam training loop.

Parameters live in one flat float64 vector; layers are views into it. Inference goes
through the backend's fused dense kernel, training through the numpy path below so that
checkpoints do not depend on which backend is active.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ragdp._backend import kernels
from ragdp.schedules import VeSchedule, VpSchedule

log = logging.getLogger(__name__)

MAX_PERIOD = 10_000.0
# VE nets embed log(sigma) with this gain so the sinusoid sees a useful range
LOG_SIGMA_GAIN = 25.0


class PredictionType(str, enum.Enum):
    EPSILON = "epsilon"
    SAMPLE = "sample"


class TrainingDiverged(RuntimeError):
    pass


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(over="ignore"):  # exp overflow saturates the sigmoid at 0, as it should
        s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def step_embedding(c: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of scalar conditioning values, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)
    arg = np.asarray(c, dtype=np.float64).reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


@dataclass(eq=False)
class ScoreNet:
    """Denoiser over flattened action chunks conditioned on step and observations.

    Epsilon nets predict the injected noise. Sample nets predict the clean chunk through
    EDM-style preconditioning ``D = c_skip * x + c_out * F(c_in * x, log sigma, obs)``.
    """

    obs_dim: int
    act_dim: int
    T_o: int
    T_p: int
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 32
    prediction_type: PredictionType = PredictionType.EPSILON
    sigma_data: float = 1.0
    params: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        self.prediction_type = PredictionType(self.prediction_type)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"hidden widths must be positive, got {self.hidden}")
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")
        self._emb_cache: dict[float, np.ndarray] = {}
        self._layer_cache: tuple[np.ndarray, list] | None = None

    @property
    def in_dim(self) -> int:
        return self.out_dim + self.T_o * self.obs_dim + self.embed_dim

    @property
    def out_dim(self) -> int:
        return self.T_p * self.act_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.in_dim, *self.hidden, self.out_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def arch(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "T_o": self.T_o,
            "T_p": self.T_p,
            "hidden": list(self.hidden),
            "embed_dim": self.embed_dim,
            "prediction_type": self.prediction_type.value,
            "sigma_data": self.sigma_data,
        }

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into ``params``; weight has shape (out, in)."""
        if params is None:
            # views stay valid under in-place updates; rebuild only when params is rebound
            cached = self._layer_cache
            if cached is not None and cached[0] is self.params:
                return cached[1]
            self._layer_cache = (self.params, self.layers(self.params))
            return self._layer_cache[1]
        flat = params
        out, pos = [], 0
        for n_out, n_in in self.layer_shapes():
            w = flat[pos : pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            b = flat[pos : pos + n_out]
            pos += n_out
            out.append((w, b))
        return out

    def init_params(self, rng: np.random.Generator, head_scale: float = 0.1) -> "ScoreNet":
        flat = np.zeros(self.n_params)
        layers = self.layers(flat)
        for k, (w, _) in enumerate(layers):
            scale = 1.0 / np.sqrt(w.shape[1])
            if k == len(layers) - 1:
                scale *= head_scale
            w[...] = rng.normal(0.0, scale, size=w.shape)
        self.params = flat
        return self

    def copy(self) -> "ScoreNet":
        return ScoreNet(params=self.params.copy(), **_arch_kwargs(self.arch()))

    # -- conditioning -------------------------------------------------------------

    def noise_condition(self, level: np.ndarray) -> np.ndarray:
        """Scalar fed to the step embedding: tau for epsilon nets, log sigma for sample nets."""
        level = np.asarray(level, dtype=np.float64)
        if self.prediction_type is PredictionType.SAMPLE:
            return LOG_SIGMA_GAIN * np.log(level)
        return level

    def _embedding(self, level: np.ndarray) -> np.ndarray:
        level = np.asarray(level, dtype=np.float64).reshape(-1)
        if level.size == 1:
            key = float(level[0])
            emb = self._emb_cache.get(key)
            if emb is None:
                emb = step_embedding(self.noise_condition(level), self.embed_dim)
                if len(self._emb_cache) < 4096:
                    self._emb_cache[key] = emb
            return emb
        return step_embedding(self.noise_condition(level), self.embed_dim)

    def precondition(self, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sd2 = self.sigma_data**2
        s2 = sigma * sigma
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(s2 + sd2)
        c_in = 1.0 / np.sqrt(s2 + sd2)
        return c_skip, c_out, c_in

    def _inputs(self, x: np.ndarray, level: np.ndarray, obs: np.ndarray) -> np.ndarray:
        b = x.shape[0]
        emb = self._embedding(level)
        if emb.shape[0] != b:
            emb = np.broadcast_to(emb, (b, self.embed_dim))
        return np.concatenate([x, obs, emb], axis=1)

    def _check(self, noisy: np.ndarray, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
        noisy = np.asarray(noisy, dtype=np.float64)
        obs = np.asarray(obs, dtype=np.float64)
        single = noisy.ndim == 2
        if single:
            noisy = noisy[None]
        if obs.ndim == 2:
            obs = obs[None]
        if noisy.shape[1:] != (self.T_p, self.act_dim):
            raise ValueError(f"action chunk shape {noisy.shape[1:]} != {(self.T_p, self.act_dim)}")
        if obs.shape[1:] != (self.T_o, self.obs_dim):
            raise ValueError(f"observation chunk shape {obs.shape[1:]} != {(self.T_o, self.obs_dim)}")
        if obs.shape[0] != noisy.shape[0]:
            if obs.shape[0] != 1:
                raise ValueError(f"batch mismatch: {noisy.shape[0]} actions vs {obs.shape[0]} observations")
            obs = np.broadcast_to(obs, (noisy.shape[0], *obs.shape[1:]))
        b = noisy.shape[0]
        return noisy.reshape(b, -1), obs.reshape(b, -1), single

    # -- inference ------------------------------------------------------------------

    def _mlp(self, h: np.ndarray) -> np.ndarray:
        h = np.ascontiguousarray(h)
        layers = self.layers()
        for k, (w, b) in enumerate(layers):
            last = k == len(layers) - 1
            residual = not last and k > 0 and w.shape[0] == w.shape[1]
            h = kernels.dense_forward(h, w, b, not last, residual)
        return h

    def forward(self, noisy_action: np.ndarray, level, obs: np.ndarray) -> np.ndarray:
        """Predict noise (epsilon nets) or the clean chunk (sample nets).

        ``level`` is the integer step tau for epsilon nets and sigma for sample nets,
        either a scalar or one value per batch row.
        """
        x, o, single = self._check(noisy_action, obs)
        level = np.asarray(level, dtype=np.float64)
        if self.prediction_type is PredictionType.SAMPLE:
            sigma = level.reshape(-1, 1)
            c_skip, c_out, c_in = self.precondition(sigma)
            f = self._mlp(self._inputs(c_in * x, level, o))
            y = c_skip * x + c_out * f
        else:
            y = self._mlp(self._inputs(x, level, o))
        y = y.reshape(-1, self.T_p, self.act_dim)
        return y[0] if single else y

    __call__ = forward

    # -- training path ---------------------------------------------------------------

    def _mlp_train(self, params: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        layers = self.layers(params)
        for k, (w, b) in enumerate(layers):
            z = h @ w.T + b
            if k == len(layers) - 1:
                cache.append((h, None, None, False))
                return z, cache
            a, s = _silu(z)
            residual = k > 0 and w.shape[0] == w.shape[1]
            cache.append((h, z, s, residual))
            h = a + h if residual else a
        raise AssertionError("unreachable")

    def _mlp_backward(self, params: np.ndarray, cache: list, grad_out: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(params)
        g_layers = self.layers(grad)
        layers = self.layers(params)
        g = grad_out
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            gw, gb = g_layers[k]
            h_in, z, s, residual = cache[k]
            if z is None:
                dz = g
            else:
                dz = g * (s * (1.0 + z * (1.0 - s)))
            gw[...] = dz.T @ h_in
            gb[...] = dz.sum(axis=0)
            if k > 0:
                g_prev = dz @ w
                g = g_prev + g if residual else g_prev
        return grad


def _arch_kwargs(arch: dict) -> dict:
    kw = dict(arch)
    kw["hidden"] = tuple(kw["hidden"])
    kw["prediction_type"] = PredictionType(kw["prediction_type"])
    return kw


def net_from_arch(arch: dict, params: np.ndarray | None = None) -> ScoreNet:
    return ScoreNet(params=params, **_arch_kwargs(arch))


# -- score matching ----------------------------------------------------------------


class NoiseDraw(NamedTuple):
    """Per-row noise level and Gaussian noise for one loss evaluation."""

    level: np.ndarray  # tau (VP) or sigma (VE), shape (B,)
    eps: np.ndarray  # shape (B, T_p * act_dim)


def draw_noise(
    batch_size: int, out_dim: int, schedule: VpSchedule | VeSchedule, rng: np.random.Generator
) -> NoiseDraw:
    idx = rng.integers(1, schedule.T + 1, size=batch_size)
    if isinstance(schedule, VeSchedule):
        level = schedule.sigma[idx].astype(np.float64)
    else:
        level = idx.astype(np.float64)
    eps = rng.standard_normal((batch_size, out_dim))
    return NoiseDraw(level, eps)


def _check_kind(net: ScoreNet, schedule: VpSchedule | VeSchedule) -> None:
    want = PredictionType.SAMPLE if isinstance(schedule, VeSchedule) else PredictionType.EPSILON
    if net.prediction_type is not want:
        raise ValueError(
            f"{schedule.kind.upper()} schedule needs a {want.value} net, got {net.prediction_type.value}"
        )


def loss_and_grad(
    net: ScoreNet,
    obs: np.ndarray,
    act: np.ndarray,
    schedule: VpSchedule | VeSchedule,
    draw: NoiseDraw,
    params: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Score-matching loss for a fixed noise draw and its exact gradient.

    Epsilon nets: mean over rows of ||eps_hat - eps||^2.
    Sample nets: mean over rows of lambda(sigma) * ||D - a||^2 with the EDM weight
    ``lambda = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2``.
    """
    _check_kind(net, schedule)
    params = net.params if params is None else params
    b = act.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    a = np.asarray(act, dtype=np.float64).reshape(b, -1)
    o = np.asarray(obs, dtype=np.float64).reshape(b, -1)
    level = draw.level
    emb = step_embedding(net.noise_condition(level), net.embed_dim)
    if net.prediction_type is PredictionType.EPSILON:
        abar = schedule.alpha_bar[level.astype(np.int64) - 1].reshape(-1, 1)
        x = np.sqrt(abar) * a + np.sqrt(1.0 - abar) * draw.eps
        pred, cache = net._mlp_train(params, np.concatenate([x, o, emb], axis=1))
        resid = pred - draw.eps
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        grad_out = 2.0 * resid / b
    else:
        sigma = level.reshape(-1, 1)
        x = a + sigma * draw.eps
        c_skip, c_out, c_in = net.precondition(sigma)
        f, cache = net._mlp_train(params, np.concatenate([c_in * x, o, emb], axis=1))
        denoised = c_skip * x + c_out * f
        weight = (sigma**2 + net.sigma_data**2) / (sigma * net.sigma_data) ** 2
        resid = denoised - a
        loss = float(np.mean(weight[:, 0] * np.sum(resid * resid, axis=1)))
        grad_out = 2.0 * weight * resid * c_out / b
    return loss, net._mlp_backward(params, cache, grad_out)


def loss_score_matching(
    net: ScoreNet,
    obs: np.ndarray,
    act: np.ndarray,
    schedule: VpSchedule | VeSchedule,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    draw = draw_noise(act.shape[0], net.out_dim, schedule, rng)
    return loss_and_grad(net, obs, act, schedule, draw)


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    rng_seed: int = 0
    grad_clip: float | None = 1.0
    adam_eps: float = 1e-8
    # weight averaging; the returned net holds the averaged weights (None disables)
    ema_decay: float | None = 0.999

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1) when set")


def _canonical_order(obs: np.ndarray, act: np.ndarray) -> np.ndarray:
    rows = np.concatenate([obs.reshape(len(obs), -1), act.reshape(len(act), -1)], axis=1)
    return np.lexsort(rows.T[::-1])


def train(
    net: ScoreNet,
    obs: np.ndarray,
    act: np.ndarray,
    schedule: VpSchedule | VeSchedule,
    cfg: TrainConfig,
) -> tuple[ScoreNet, list[float]]:
    """Minibatch Adam on the score-matching loss.

    Rows are put in a content-defined order first, so the result does not depend on how
    the caller ordered the dataset. The returned parameters are rounded to float32, the
    precision they are stored at in checkpoints.
    """
    _check_kind(net, schedule)
    n = len(act)
    if n == 0 or len(obs) != n:
        raise ValueError(f"need a non-empty dataset with matching rows, got {len(obs)} obs / {n} actions")
    order = _canonical_order(obs, act)
    obs = np.asarray(obs, dtype=np.float64)[order]
    act = np.asarray(act, dtype=np.float64)[order]

    rng = np.random.default_rng(cfg.rng_seed)
    net = net.copy()
    params = net.params
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    ema = params.copy() if cfg.ema_decay is not None else None
    step = 0
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            draw = draw_noise(len(idx), net.out_dim, schedule, rng)
            loss, grad = loss_and_grad(net, obs[idx], act[idx], schedule, draw, params)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            if cfg.grad_clip is not None:
                with np.errstate(over="ignore"):
                    norm = float(np.sqrt(grad @ grad))
                if not np.isfinite(norm):
                    raise TrainingDiverged(f"gradient norm overflow at epoch {epoch}, step {step}")
                if norm > cfg.grad_clip:
                    grad *= cfg.grad_clip / norm
            step += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            m_hat = m / (1 - cfg.beta1**step)
            v_hat = v / (1 - cfg.beta2**step)
            params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            if ema is not None:
                # warm-up keeps early averages from clinging to the initialization
                decay = min(cfg.ema_decay, (1 + step) / (10 + step))
                ema *= decay
                ema += (1 - decay) * params
            total += loss
            batches += 1
        curve.append(total / batches)
        log.debug("epoch %d loss %.5f", epoch, curve[-1])
    final = (ema if ema is not None else params).astype(np.float32)
    if not np.all(np.isfinite(final)):
        raise TrainingDiverged("trained parameters exceed the float32 range")
    net.params = final.astype(np.float64)
    net._emb_cache.clear()
    return net, curve
