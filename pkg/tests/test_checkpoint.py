import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ragdp import _backend, containers
from ragdp.checkpoint import MAGIC, Checkpoint, Normalization
from ragdp.errors import CorruptedFileError, FormatError
from ragdp.nn import ScoreNet
from ragdp.schedules import make_ve_schedule, make_vp_schedule


def make_ckpt(pred="epsilon"):
    net = ScoreNet(4, 2, 2, 16, hidden=(32, 32), embed_dim=8, prediction_type=pred).init_params(np.random.default_rng(0))
    net.params[:] = net.params.astype(np.float32)  # checkpoints store float32 weights
    sched = make_vp_schedule(100, 1e-3, 0.2) if pred == "epsilon" else make_ve_schedule(40)
    norm = Normalization(np.arange(4.0), np.ones(4) * 2, np.zeros(2), np.array([0.5, 0.25]))
    return Checkpoint(net, sched, norm, dataset_hash="ab" * 32, info={"seed": 3, "task": "point_reach"})


@pytest.mark.parametrize("pred", ["epsilon", "sample"])
def test_round_trip(tmp_path, pred):
    ck = make_ckpt(pred)
    digest = ck.save(tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert digest == hashlib.sha256(raw).hexdigest()
    assert raw.startswith(MAGIC)
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.net.params.tobytes() == ck.net.params.tobytes()
    assert back.net.arch() == ck.net.arch()
    assert back.schedule == ck.schedule
    assert back.dataset_hash == ck.dataset_hash and back.info == ck.info
    np.testing.assert_array_equal(back.norm.act_std, ck.norm.act_std)
    assert back.to_bytes() == raw
    x = np.random.default_rng(1).standard_normal((16, 2))
    o = np.random.default_rng(2).standard_normal((2, 4))
    level = 30 if pred == "epsilon" else 1.5
    assert back.net(x, level, o).tobytes() == ck.net(x, level, o).tobytes()


def test_corruption_detected(tmp_path):
    raw = bytearray(make_ckpt().to_bytes())
    for pos in (len(MAGIC) + 5, len(raw) // 2, len(raw) - 40, len(raw) - 1):
        bad = bytearray(raw)
        bad[pos] ^= 0x10
        with pytest.raises(CorruptedFileError):
            Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"RAGDP-KB" + bytes(raw[8:]))
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(bytes(raw[:-10]))


def test_normalization_round_trip():
    n = make_ckpt().norm
    m = Normalization.from_dict(n.to_dict())
    for k in ("obs_mean", "obs_std", "act_mean", "act_std"):
        np.testing.assert_array_equal(getattr(m, k), getattr(n, k))
    obs = np.random.default_rng(0).standard_normal((2, 4))
    np.testing.assert_allclose(n.normalize_obs(obs) * n.obs_std + n.obs_mean, obs, atol=1e-12)


@given(
    arrays=st.lists(
        st.one_of(
            hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=5, min_side=0)),
            hnp.arrays(np.float32, hnp.array_shapes(max_dims=2, max_side=5, min_side=0)),
            hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=5, min_side=0)),
        ),
        max_size=4,
    )
)
def test_container_round_trip(arrays):
    blocks = {f"b{i}": (a.dtype.newbyteorder("<").str, a) for i, a in enumerate(arrays)}
    data = containers.encode(b"TESTFMT\x00", 3, {"note": "x"}, blocks)
    header, back = containers.decode(data, b"TESTFMT\x00", 3)
    assert header == {"note": "x"}
    for name, (_, arr) in blocks.items():
        assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_container_errors():
    data = containers.encode(b"TESTFMT\x00", 1, {}, {"a": ("<f8", np.ones(3))})
    with pytest.raises(FormatError):
        containers.decode(data, b"OTHERFM\x00", 1)
    with pytest.raises(FormatError, match="version"):
        containers.decode(data, b"TESTFMT\x00", 2)
    with pytest.raises(CorruptedFileError):
        containers.decode(data[:-33] + bytes([data[-33] ^ 1]) + data[-32:], b"TESTFMT\x00", 1)
    with pytest.raises(FormatError):
        containers.decode(b"short", b"TESTFMT\x00", 1)
    with pytest.raises(ValueError):
        containers.encode(b"TESTFMT\x00", 1, {}, {"a": ("<c16", np.ones(3))})
    with pytest.raises(ValueError):
        containers.encode(b"SHORT", 1, {}, {})


def test_write_atomic_leaves_no_temp(tmp_path):
    containers.write_atomic(tmp_path / "sub" / "f.bin", b"abc")
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"abc"
    assert sorted(p.name for p in (tmp_path / "sub").iterdir()) == ["f.bin"]


# -- compiled vs fallback kernels ------------------------------------------------------


compiled = pytest.mark.skipif(_backend.compiled_kernels is None, reason="compiled extension not built")


@compiled
def test_backend_kernels_agree_on_l2():
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((300, 24)).astype(np.float32)
    queries = rng.standard_normal((40, 24)).astype(np.float32)
    a = _backend.compiled_kernels.l2_argmin_many(keys, queries)
    b = _backend.python_kernels.l2_argmin_many(keys, queries)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


@compiled
@pytest.mark.parametrize("activate,residual", [(False, False), (True, False), (True, True)])
def test_backend_kernels_agree_on_dense(activate, residual):
    rng = np.random.default_rng(1)
    n = 16
    x = rng.standard_normal((5, n))
    w = rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    ya = _backend.compiled_kernels.dense_forward(x, w, b, activate, residual)
    yb = _backend.python_kernels.dense_forward(x, w, b, activate, residual)
    np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("flag,want", [("1", "python"), ("0", None)])
def test_backend_selected_at_import(flag, want):
    env = dict(os.environ, RAGDP_PURE_PYTHON=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from ragdp import _backend; print(_backend.BACKEND)"], env=env, capture_output=True, text=True, check=True
    ).stdout.strip()
    assert out == (want or _backend.BACKEND)
