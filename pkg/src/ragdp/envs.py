"""Toy imitation tasks with scripted experts, and the demonstration dataset type."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ragdp import containers

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class Env(Protocol):
    env_id: str
    obs_dim: int
    act_dim: int
    max_steps: int

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, action: np.ndarray) -> tuple[np.ndarray, bool]: ...


def _rot90(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


# -- PointReach2D ----------------------------------------------------------------------


@dataclass
class PointReach2D:
    """Point agent driven by clipped velocity commands towards a goal in [-1, 1]^2.

    Observation: (agent x, agent y, goal x, goal y).
    """

    dt: float = 0.02
    success_radius: float = 0.05
    max_steps: int = 300
    min_start_distance: float = 0.5

    env_id = "point_reach"
    obs_dim = 4
    act_dim = 2

    def __post_init__(self) -> None:
        self.agent = np.zeros(2)
        self.goal = np.zeros(2)
        self.t = 0

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.agent, self.goal])

    def set_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        self.agent, self.goal = state[:2].copy(), state[2:4].copy()
        self.t = 0
        return self.state

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.agent = rng.uniform(-0.9, 0.9, size=2)
        while True:
            self.goal = rng.uniform(-0.8, 0.8, size=2)
            if np.linalg.norm(self.goal - self.agent) >= self.min_start_distance:
                break
        self.t = 0
        return self.state

    def success(self) -> bool:
        return bool(np.linalg.norm(self.agent - self.goal) < self.success_radius)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, bool]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError(f"invalid action {action!r}")
        self.agent = np.clip(self.agent + self.dt * a, -1.0, 1.0)
        self.t += 1
        return self.state, self.success()


def expert_pointreach(state: np.ndarray, mode: int = 0, gain: float = 4.0, curve: float = 1.0) -> np.ndarray:
    """Proportional controller to the goal; ``mode`` in {-1, 0, 1} bends the path left or right."""
    d = np.asarray(state[2:4], dtype=np.float64) - np.asarray(state[:2], dtype=np.float64)
    v = gain * d + mode * curve * gain * _rot90(d)
    return np.clip(v, -1.0, 1.0)


@dataclass
class PointReachExpert:
    modes: tuple[int, ...] = (-1, 0, 1)
    gain: float = 4.0
    curve: float = 1.0
    mode: int = 0

    expert_id = "pointreach-proportional"

    def begin_episode(self, rng: np.random.Generator) -> None:
        self.mode = int(self.modes[rng.integers(len(self.modes))])

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return expert_pointreach(state, self.mode, self.gain, self.curve)


# -- PushBox2D -------------------------------------------------------------------------


@dataclass
class PushBox2D:
    """Quasi-static pushing of a round-footprint box by a point agent.

    Observation: (agent xy, box xy, box angle, target xy). The box moves only when the
    agent penetrates its contact radius: it is pushed out along the contact normal and
    spun by the tangential part of the agent's motion.
    """

    dt: float = 0.03
    contact_radius: float = 0.15
    spin_gain: float = 3.0
    success_tol: float = 0.05
    max_steps: int = 300

    env_id = "push_box"
    obs_dim = 7
    act_dim = 2

    def __post_init__(self) -> None:
        self.agent = np.zeros(2)
        self.box = np.zeros(2)
        self.angle = 0.0
        self.target = np.zeros(2)
        self.t = 0

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.agent, self.box, [self.angle], self.target])

    def set_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        self.agent, self.box = state[:2].copy(), state[2:4].copy()
        self.angle, self.target = float(state[4]), state[5:7].copy()
        self.t = 0
        return self.state

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.box = rng.uniform(-0.5, 0.5, size=2)
        while True:
            self.target = rng.uniform(-0.6, 0.6, size=2)
            if np.linalg.norm(self.target - self.box) >= 0.3:
                break
        while True:
            self.agent = rng.uniform(-0.9, 0.9, size=2)
            if np.linalg.norm(self.agent - self.box) >= self.contact_radius + 0.1:
                break
        self.angle = float(rng.uniform(-np.pi, np.pi))
        self.t = 0
        return self.state

    def success(self) -> bool:
        return bool(np.linalg.norm(self.box - self.target) < self.success_tol)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, bool]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError(f"invalid action {action!r}")
        move = self.dt * a
        self.agent = np.clip(self.agent + move, -1.0, 1.0)
        offset = self.box - self.agent
        dist = float(np.linalg.norm(offset))
        if dist < self.contact_radius:
            normal = offset / dist if dist > 1e-12 else move / (np.linalg.norm(move) + 1e-12)
            self.box = np.clip(self.box + (self.contact_radius - dist) * normal, -1.0, 1.0)
            tangential = normal[0] * move[1] - normal[1] * move[0]
            self.angle = float(np.angle(np.exp(1j * (self.angle + self.spin_gain * tangential))))
        self.t += 1
        return self.state, self.success()


@dataclass
class PushBoxExpert:
    """Go behind the box (relative to the target), detouring around it, then push."""

    standoff: float = 0.04
    gain: float = 6.0

    expert_id = "pushbox-scripted"

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return expert_pushbox(state, standoff=self.standoff, gain=self.gain)


def expert_pushbox(state: np.ndarray, contact_radius: float = 0.15, standoff: float = 0.04, gain: float = 6.0) -> np.ndarray:
    agent, box, target = state[:2], state[2:4], state[5:7]
    to_target = target - box
    dist_bt = float(np.linalg.norm(to_target))
    if dist_bt < 1e-9:
        return np.zeros(2)
    u = to_target / dist_bt
    behind = box - (contact_radius + standoff) * u
    rel = agent - box
    along = float(rel @ u)
    lateral = float(_rot90(u) @ rel)
    if np.linalg.norm(agent - behind) < standoff + 0.02 and along < 0:
        # pushing: aim through the box centre, slow down near the target
        aim = box - agent
        aim /= np.linalg.norm(aim)
        speed = min(1.0, gain * dist_bt + 0.15)
        return np.clip(speed * (0.8 * u + 0.2 * aim) / np.linalg.norm(0.8 * u + 0.2 * aim), -1.0, 1.0)
    if along > -0.5 * contact_radius and abs(lateral) < contact_radius + standoff:
        # on the wrong side: go around on the nearer flank
        side = 1.0 if lateral >= 0 else -1.0
        waypoint = box + side * (contact_radius + 0.08) * _rot90(u) - 0.05 * u
    else:
        waypoint = behind
    return np.clip(gain * (waypoint - agent), -1.0, 1.0)


ENVS = {"point_reach": PointReach2D, "push_box": PushBox2D}
EXPERTS = {"point_reach": PointReachExpert, "push_box": PushBoxExpert}


def make_env(env_id: str, **kwargs) -> Env:
    try:
        return ENVS[env_id](**kwargs)
    except KeyError:
        raise ValueError(f"unknown task {env_id!r}; choose from {sorted(ENVS)}") from None


def make_expert(env_id: str):
    return EXPERTS[env_id]()


# -- demonstrations ----------------------------------------------------------------------


@dataclass(eq=False)
class Episode:
    observations: np.ndarray  # (L, obs_dim)
    actions: np.ndarray  # (L, act_dim)
    seed: int = -1
    noise_level: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)


def _std(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    std[std < STD_FLOOR] = 1.0
    return std


@dataclass(eq=False)
class DemoDataset:
    env_id: str
    episodes: list[Episode]
    obs_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    obs_std: np.ndarray = field(default=None)  # type: ignore[assignment]
    act_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    act_std: np.ndarray = field(default=None)  # type: ignore[assignment]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.episodes:
            raise ValueError("dataset needs at least one episode")
        for ep in self.episodes:
            if len(ep.observations) != len(ep.actions):
                raise ValueError("observation and action sequences must have equal length")
        if self.obs_mean is None:
            obs = np.concatenate([ep.observations for ep in self.episodes])
            act = np.concatenate([ep.actions for ep in self.episodes])
            self.obs_mean, self.obs_std = obs.mean(axis=0), _std(obs)
            self.act_mean, self.act_std = act.mean(axis=0), _std(act)

    @property
    def obs_dim(self) -> int:
        return self.episodes[0].observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.obs_mean) / self.obs_std

    def normalize_act(self, act: np.ndarray) -> np.ndarray:
        return (act - self.act_mean) / self.act_std

    def denormalize_act(self, act: np.ndarray) -> np.ndarray:
        return act * self.act_std + self.act_mean

    def denormalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return obs * self.obs_std + self.obs_mean

    def chunks(self, T_o: int, T_p: int, normalized: bool = True) -> tuple[np.ndarray, np.ndarray, int]:
        """Every (observation window, action window) pair, in episode then time order.

        Observation windows reaching before the episode start repeat the first
        observation; action windows running past the end repeat the last action.
        Episodes shorter than ``T_p`` are skipped; the count is returned last.
        """
        obs_out, act_out, skipped = [], [], 0
        for ep in self.episodes:
            L = len(ep)
            if L < T_p:
                skipped += 1
                continue
            t = np.arange(L)
            o_idx = np.clip(t[:, None] + np.arange(-T_o + 1, 1)[None, :], 0, L - 1)
            a_idx = np.clip(t[:, None] + np.arange(T_p)[None, :], 0, L - 1)
            obs_out.append(ep.observations[o_idx])
            act_out.append(ep.actions[a_idx])
        if skipped:
            log.warning("skipped %d episode(s) shorter than T_p=%d", skipped, T_p)
        if not obs_out:
            raise ValueError(f"no episode is at least T_p={T_p} steps long")
        obs = np.concatenate(obs_out)
        act = np.concatenate(act_out)
        if normalized:
            obs, act = self.normalize_obs(obs), self.normalize_act(act)
        return obs, act, skipped

    def _blocks(self) -> dict:
        return {
            "lengths": ("<i8", np.array([len(ep) for ep in self.episodes], dtype=np.int64)),
            "seeds": ("<i8", np.array([ep.seed for ep in self.episodes], dtype=np.int64)),
            "noise": ("<f8", np.array([ep.noise_level for ep in self.episodes])),
            "observations": ("<f8", np.concatenate([ep.observations for ep in self.episodes])),
            "actions": ("<f8", np.concatenate([ep.actions for ep in self.episodes])),
        }

    def content_hash(self) -> str:
        h = hashlib.sha256(self.env_id.encode())
        for _, (dtype, arr) in self._blocks().items():
            h.update(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        header = {"env_id": self.env_id, "meta": self.meta, "hash": self.content_hash()}
        blocks = self._blocks()
        blocks["stats"] = ("<f8", np.stack([self.obs_mean, self.obs_std]))
        blocks["act_stats"] = ("<f8", np.stack([self.act_mean, self.act_std]))
        return containers.encode(DATASET_MAGIC, DATASET_VERSION, header, blocks)

    def save(self, path) -> str:
        containers.write_atomic(path, self.to_bytes())
        return self.content_hash()

    @classmethod
    def load(cls, path) -> "DemoDataset":
        header, blocks = containers.decode(Path(path).read_bytes(), DATASET_MAGIC, DATASET_VERSION)
        bounds = np.concatenate([[0], np.cumsum(blocks["lengths"])])
        episodes = [
            Episode(
                blocks["observations"][a:b],
                blocks["actions"][a:b],
                seed=int(s),
                noise_level=float(n),
            )
            for a, b, s, n in zip(bounds[:-1], bounds[1:], blocks["seeds"], blocks["noise"])
        ]
        ds = cls(
            env_id=header["env_id"],
            episodes=episodes,
            obs_mean=blocks["stats"][0],
            obs_std=blocks["stats"][1],
            act_mean=blocks["act_stats"][0],
            act_std=blocks["act_stats"][1],
            meta=header["meta"],
        )
        return ds


DATASET_MAGIC = b"RAGDPDS\x00"
DATASET_VERSION = 1


def run_expert_episode(env: Env, expert, seed: int, noise_level: float, rng: np.random.Generator) -> tuple[Episode, bool]:
    obs = env.reset(seed)
    expert.begin_episode(rng)
    observations, actions = [], []
    success = False
    for _ in range(env.max_steps):
        a = expert(obs)
        if noise_level > 0:
            a = np.clip(a + noise_level * rng.standard_normal(a.shape), -1.0, 1.0)
        observations.append(obs)
        actions.append(a)
        obs, success = env.step(a)
        if success:
            break
    return Episode(np.array(observations), np.array(actions), seed=seed, noise_level=noise_level), success


def generate_dataset(
    env: Env,
    expert,
    n_episodes: int,
    seed: int,
    noise_level: float | Sequence[float] = 0.0,
    max_retries: int = 1000,
) -> DemoDataset:
    """Roll out the expert with per-step action jitter; failed episodes are redrawn.

    ``noise_level`` may be one value or one value per episode. Episode ``i`` first uses
    environment seed ``seed * 1_000_000 + i``; retries take fresh seeds above
    ``seed * 1_000_000 + n_episodes``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    levels = np.broadcast_to(np.asarray(noise_level, dtype=np.float64), (n_episodes,))
    rng = np.random.default_rng([seed, 0xDA7A])
    base = seed * 1_000_000
    next_spare = base + n_episodes
    episodes, retries = [], 0
    for i in range(n_episodes):
        env_seed = base + i
        while True:
            ep, ok = run_expert_episode(env, expert, env_seed, float(levels[i]), rng)
            if ok:
                break
            retries += 1
            if retries > max_retries:
                raise RuntimeError(f"expert failed more than {max_retries} times")
            env_seed, next_spare = next_spare, next_spare + 1
        episodes.append(ep)
    meta = {
        "env_id": env.env_id,
        "expert_id": expert.expert_id,
        "seed": int(seed),
        "seed_range": [base, next_spare],
        "n_episodes": int(n_episodes),
        "retries": retries,
    }
    return DemoDataset(env.env_id, episodes, meta=meta)


def mixed_quality_levels(n_episodes: int, noisy_fraction: float = 1 / 3, noise: float = 0.3) -> np.ndarray:
    """Per-episode jitter: the last ``noisy_fraction`` of episodes get ``noise``, the rest 0."""
    levels = np.zeros(n_episodes)
    n_noisy = int(round(n_episodes * noisy_fraction))
    if n_noisy:
        levels[n_episodes - n_noisy :] = noise
    return levels
