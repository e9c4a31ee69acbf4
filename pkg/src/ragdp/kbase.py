"""Knowledge base of expert (embedded observation window, normalized action chunk) pairs.

Retrieval is an exact flat L2 scan. Keys and values are stored as float32, which is also
the precision queries are rounded to, so a query equal to a stored observation window
retrieves it at distance exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ragdp import containers
from ragdp._backend import kernels
from ragdp.envs import DemoDataset
from ragdp.errors import MetadataMismatchError

KB_MAGIC = b"RAGDPKB\x00"
KB_VERSION = 1


@dataclass(frozen=True, eq=False)
class Embedder:
    """Per-dimension z-scoring of observation frames, flattened over the window."""

    obs_mean: np.ndarray
    obs_std: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.obs_std <= 0):
            raise ValueError("observation std must be positive in every dimension")

    @property
    def frame_dim(self) -> int:
        return len(self.obs_mean)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        """(..., T_o, obs_dim) raw windows -> (..., T_o * obs_dim) float32 embeddings."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.frame_dim:
            raise ValueError(f"observation frames have {obs.shape[-1]} dims, expected {self.frame_dim}")
        z = (obs - self.obs_mean) / self.obs_std
        return z.reshape(*z.shape[:-2], -1).astype(np.float32)


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    keys: np.ndarray  # (N, T_o * obs_dim) float32
    values: np.ndarray  # (N, T_p, act_dim) float32, normalized
    embedder: Embedder
    act_mean: np.ndarray
    act_std: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.keys) == 0 or len(self.keys) != len(self.values):
            raise ValueError(f"need matching non-empty keys/values, got {len(self.keys)}/{len(self.values)}")
        object.__setattr__(self, "keys", np.ascontiguousarray(self.keys, dtype=np.float32))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32))
        self.keys.setflags(write=False)
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def T_o(self) -> int:
        return int(self.meta["T_o"])

    @property
    def T_p(self) -> int:
        return int(self.meta["T_p"])

    def denormalize(self, act: np.ndarray) -> np.ndarray:
        return np.asarray(act, dtype=np.float64) * self.act_std + self.act_mean

    def _query(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.T_o, self.embedder.frame_dim):
            raise ValueError(f"observation window shape {obs.shape} != {(self.T_o, self.embedder.frame_dim)}")
        return self.embedder(obs)

    def retrieve(self, obs: np.ndarray) -> tuple[int, np.ndarray, float]:
        """Nearest stored entry to a raw observation window.

        Returns (index, normalized action chunk, squared L2 distance); ties resolve to
        the lowest index.
        """
        i, dist = kernels.l2_argmin(self.keys, self._query(obs))
        return int(i), self.values[i], float(dist)

    def search(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batch search over already-embedded queries (M, dim)."""
        z = np.ascontiguousarray(z, dtype=np.float32)
        return kernels.l2_argmin_many(self.keys, z)

    def check_compatible(self, T_o: int | None = None, T_p: int | None = None, dataset_hash: str | None = None) -> None:
        for name, want in (("T_o", T_o), ("T_p", T_p), ("dataset_hash", dataset_hash)):
            if want is not None and self.meta.get(name) != want:
                raise MetadataMismatchError(f"knowledge base has {name}={self.meta.get(name)!r}, expected {want!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.meta == other.meta
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.embedder.obs_mean, other.embedder.obs_mean)
            and np.array_equal(self.embedder.obs_std, other.embedder.obs_std)
            and np.array_equal(self.act_mean, other.act_mean)
            and np.array_equal(self.act_std, other.act_std)
        )

    # -- persistence --------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "meta": self.meta,
            "n_data": len(self),
            "key_dim": int(self.keys.shape[1]),
            "T_o": self.T_o,
            "T_p": self.T_p,
            "obs_dim": self.embedder.frame_dim,
            "act_dim": int(self.values.shape[2]),
            "dataset_hash": self.meta.get("dataset_hash"),
        }
        blocks = {
            "obs_stats": ("<f8", np.stack([self.embedder.obs_mean, self.embedder.obs_std])),
            "act_stats": ("<f8", np.stack([self.act_mean, self.act_std])),
            "keys": ("<f4", self.keys),
            "values": ("<f4", self.values),
        }
        return containers.encode(KB_MAGIC, KB_VERSION, header, blocks)

    def save(self, path) -> None:
        containers.write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path, T_o: int | None = None, T_p: int | None = None, dataset_hash: str | None = None) -> "KnowledgeBase":
        header, blocks = containers.decode(Path(path).read_bytes(), KB_MAGIC, KB_VERSION)
        kb = cls(
            keys=blocks["keys"],
            values=blocks["values"],
            embedder=Embedder(blocks["obs_stats"][0], blocks["obs_stats"][1]),
            act_mean=blocks["act_stats"][0],
            act_std=blocks["act_stats"][1],
            meta=header["meta"],
        )
        kb.check_compatible(T_o, T_p, dataset_hash)
        return kb


def build(dataset: DemoDataset, T_o: int, T_p: int, task_id: str | None = None) -> KnowledgeBase:
    """Embed every observation window of the dataset and pair it with its action chunk."""
    raw_obs, _, skipped = dataset.chunks(T_o, T_p, normalized=False)
    _, act, _ = dataset.chunks(T_o, T_p, normalized=True)
    embedder = Embedder(np.array(dataset.obs_mean, dtype=np.float64), np.array(dataset.obs_std, dtype=np.float64))
    meta = {
        "task_id": task_id or dataset.env_id,
        "T_o": int(T_o),
        "T_p": int(T_p),
        "dataset_hash": dataset.content_hash(),
        "skipped_episodes": int(skipped),
    }
    return KnowledgeBase(
        keys=embedder(raw_obs),
        values=act,
        embedder=embedder,
        act_mean=np.array(dataset.act_mean, dtype=np.float64),
        act_std=np.array(dataset.act_std, dtype=np.float64),
        meta=meta,
    )
