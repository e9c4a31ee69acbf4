"""Model checkpoints: a trained net plus everything needed to run it.

Layout::

    b"RAGDP-CHECKPOINT v1\\n"
    one line of ASCII digits: byte length H of the header, then "\\n"
    H bytes of UTF-8 JSON (sorted keys): arch, schedule, normalization stats,
        dataset hash, training settings, n_params
    n_params little-endian float32 parameters
    32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ragdp import containers
from ragdp.errors import CorruptedFileError, FormatError
from ragdp.nn import ScoreNet, net_from_arch
from ragdp.schedules import VeSchedule, VpSchedule, schedule_from_params

MAGIC = b"RAGDP-CHECKPOINT v1\n"


@dataclass(eq=False)
class Normalization:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def denormalize_act(self, act: np.ndarray) -> np.ndarray:
        return np.asarray(act, dtype=np.float64) * self.act_std + self.act_mean

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("obs_mean", "obs_std", "act_mean", "act_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(**{k: np.array(d[k], dtype=np.float64) for k in ("obs_mean", "obs_std", "act_mean", "act_std")})

    @classmethod
    def from_dataset(cls, ds) -> "Normalization":
        return cls(ds.obs_mean.copy(), ds.obs_std.copy(), ds.act_mean.copy(), ds.act_std.copy())


@dataclass(eq=False)
class Checkpoint:
    net: ScoreNet
    schedule: VpSchedule | VeSchedule
    norm: Normalization
    dataset_hash: str = ""
    info: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "arch": self.net.arch(),
            "schedule": self.schedule.params(),
            "normalization": self.norm.to_dict(),
            "dataset_hash": self.dataset_hash,
            "info": self.info,
            "n_params": self.net.n_params,
        }

    def to_bytes(self) -> bytes:
        text = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + str(len(text)).encode("ascii") + b"\n" + text
        body += self.net.params.astype("<f4").tobytes()
        return body + hashlib.sha256(body).digest()

    def save(self, path) -> str:
        data = self.to_bytes()
        containers.write_atomic(path, data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise FormatError("not a checkpoint file")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptedFileError("checkpoint checksum mismatch")
        pos = len(MAGIC)
        nl = body.index(b"\n", pos)
        length = int(body[pos:nl])
        header = json.loads(body[nl + 1 : nl + 1 + length].decode("utf-8"))
        raw = body[nl + 1 + length :]
        if len(raw) != 4 * header["n_params"]:
            raise CorruptedFileError("parameter block has the wrong size")
        params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        return cls(
            net=net_from_arch(header["arch"], params),
            schedule=schedule_from_params(header["schedule"]),
            norm=Normalization.from_dict(header["normalization"]),
            dataset_hash=header["dataset_hash"],
            info=header["info"],
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
