import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ragdp import envs, kbase
from ragdp.envs import DemoDataset, Episode
from ragdp.errors import CorruptedFileError, FormatError, MetadataMismatchError
from ragdp.kbase import Embedder, KnowledgeBase
from tests.oracles import brute_force_argmin, sequential_argmin


def flat_kb(keys, values=None):
    """KB over 1-frame windows with an identity embedder, so queries are raw keys."""
    keys = np.asarray(keys, dtype=np.float32)
    n, d = keys.shape
    if values is None:
        values = np.arange(n, dtype=np.float32).reshape(n, 1, 1)
    return KnowledgeBase(keys, values, Embedder(np.zeros(d), np.ones(d)), np.zeros(1), np.ones(1), meta={"T_o": 1, "T_p": 1})


@pytest.fixture(scope="module")
def small_ds():
    return envs.generate_dataset(envs.PointReach2D(), envs.PointReachExpert(), 6, seed=3)


def test_two_key_geometry():
    kb = flat_kb([[0.0, 0.0], [1.0, 1.0]])
    i, value, dist = kb.retrieve(np.array([[0.1, 0.0]]))
    assert i == 0 and value[0, 0] == 0.0
    assert dist == pytest.approx(0.01, rel=1e-6)


def test_ties_go_to_lowest_index():
    kb = flat_kb([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 1.0]])
    assert kb.retrieve(np.array([[0.0, 0.0]]))[0] == 0
    assert kb.retrieve(np.array([[0.0, 1.0]]))[0] == 1


@pytest.mark.parametrize("seed", range(5))
def test_retrieve_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 65))
    keys = rng.standard_normal((1000, d)).astype(np.float32)
    kb = flat_kb(keys)
    for _ in range(10):
        q = rng.standard_normal(d)
        got_i, _, got_d = kb.retrieve(q[None, :])
        want_i, want_d = brute_force_argmin(keys, q)
        assert got_i == want_i
        assert got_d == want_d


def test_search_matches_sequential_oracle_with_many_ties():
    rng = np.random.default_rng(0)
    keys = rng.integers(-2, 3, size=(500, 3)).astype(np.float32)  # lots of duplicates
    queries = rng.integers(-2, 3, size=(200, 3)).astype(np.float32)
    idx, dist = flat_kb(keys).search(queries)
    for q, i, dd in zip(queries, idx, dist):
        assert (i, dd) == sequential_argmin(keys, q)


@given(
    keys=hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 6)), elements=st.floats(-4, 4, width=32)),
    data=st.data(),
)
def test_retrieve_property_brute_force(keys, data):
    q = data.draw(hnp.arrays(np.float32, keys.shape[1], elements=st.floats(-4, 4, width=32)))
    i, _, d = flat_kb(keys).retrieve(q[None, :])
    assert (i, d) == brute_force_argmin(keys, q)


@given(
    keys=hnp.arrays(np.float32, st.tuples(st.integers(1, 30), st.just(3)), elements=st.integers(-2, 2).map(float)),
    new=hnp.arrays(np.float32, 3, elements=st.integers(-2, 2).map(float)),
    q=hnp.arrays(np.float32, 3, elements=st.integers(-2, 2).map(float)),
    data=st.data(),
)
def test_adding_an_entry_is_monotone(keys, new, q, data):
    pos = data.draw(st.integers(0, len(keys)))
    old_i, _, old_d = flat_kb(keys).retrieve(q[None, :])
    grown = np.insert(keys, pos, new, axis=0)
    new_i, _, new_d = flat_kb(grown).retrieve(q[None, :])
    cand = float(np.sum((new.astype(np.float64) - q) ** 2))
    if cand < old_d or (cand == old_d and pos <= old_i):
        assert new_i == pos
    else:
        assert new_i == old_i + (1 if pos <= old_i else 0)
    assert new_d == min(old_d, cand)


def test_self_retrieval_distance_zero(small_ds):
    kb = kbase.build(small_ds, 2, 16)
    raw, _, _ = small_ds.chunks(2, 16, normalized=False)
    for j in (0, 17, len(raw) // 2, len(raw) - 1):
        i, value, dist = kb.retrieve(raw[j])
        assert dist == 0.0
        # identical windows at the episode start (padding) may resolve to an earlier twin
        assert i <= j and np.array_equal(kb.keys[i], kb.keys[j])
        np.testing.assert_array_equal(value, kb.values[i])


def test_dense_window_count_and_padding():
    L = 23
    obs = np.arange(L * 2, dtype=float).reshape(L, 2)
    act = -np.arange(L * 2, dtype=float).reshape(L, 2)
    ds = DemoDataset("point_reach", [Episode(obs, act)])
    kb = kbase.build(ds, 3, 5)
    assert len(kb) == L
    raw, act_chunks, _ = ds.chunks(3, 5, normalized=False)
    np.testing.assert_array_equal(raw[0], obs[[0, 0, 0]])
    np.testing.assert_array_equal(raw[1], obs[[0, 0, 1]])
    np.testing.assert_array_equal(act_chunks[-1], act[[L - 1] * 5])
    np.testing.assert_array_equal(act_chunks[L - 3], act[[L - 3, L - 2, L - 1, L - 1, L - 1]])

    doubled = kbase.build(DemoDataset("point_reach", [Episode(obs, act), Episode(obs.copy(), act.copy())]), 3, 5)
    assert len(doubled) == 2 * L
    np.testing.assert_array_equal(doubled.keys[:L], doubled.keys[L:])


def test_short_episodes_skipped_and_all_short_is_error():
    long = Episode(np.zeros((20, 2)), np.zeros((20, 2)))
    short = Episode(np.ones((4, 2)), np.ones((4, 2)))
    kb = kbase.build(DemoDataset("point_reach", [long, short]), 2, 8)
    assert len(kb) == 20 and kb.meta["skipped_episodes"] == 1
    with pytest.raises(ValueError):
        kbase.build(DemoDataset("point_reach", [short]), 2, 8)


def test_keys_match_hand_normalization(small_ds):
    kb = kbase.build(small_ds, 2, 16)
    all_obs = np.concatenate([ep.observations for ep in small_ds.episodes])
    mean = all_obs.sum(axis=0) / len(all_obs)
    std = np.sqrt(((all_obs - mean) ** 2).sum(axis=0) / len(all_obs))
    rng = np.random.default_rng(0)
    offsets = np.cumsum([0] + [len(ep) for ep in small_ds.episodes])
    for j in rng.choice(len(kb), 5, replace=False):
        e = int(np.searchsorted(offsets, j, side="right") - 1)
        t = j - offsets[e]
        frames = [small_ds.episodes[e].observations[max(t - 1, 0)], small_ds.episodes[e].observations[t]]
        want = np.concatenate([(f - mean) / std for f in frames]).astype(np.float32)
        np.testing.assert_allclose(kb.keys[j], want, rtol=1e-6, atol=1e-6)


def test_degenerate_dimension_std_is_repaired():
    obs = np.zeros((20, 3))
    obs[:, 0] = np.linspace(0, 1, 20)  # dims 1 and 2 are constant
    kb = kbase.build(DemoDataset("point_reach", [Episode(obs, np.zeros((20, 2)))]), 1, 4)
    assert np.all(kb.embedder.obs_std > 0)
    assert kb.embedder.obs_std[1] == kb.embedder.obs_std[2] == 1.0
    with pytest.raises(ValueError):
        Embedder(np.zeros(2), np.array([1.0, 0.0]))


@pytest.mark.parametrize("scale,shift", [(2.0, 0.0), (0.37, 5.0), (1000.0, -3.0)])
def test_retrieval_invariant_to_affine_units(small_ds, scale, shift):
    kb = kbase.build(small_ds, 2, 16)
    scaled = DemoDataset(
        small_ds.env_id,
        [Episode(ep.observations * scale + shift, ep.actions) for ep in small_ds.episodes],
    )
    kb2 = kbase.build(scaled, 2, 16)
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = rng.uniform(-1, 1, size=(2, 4))
        assert kb.retrieve(q)[0] == kb2.retrieve(q * scale + shift)[0]


def test_query_shape_checked(small_ds):
    kb = kbase.build(small_ds, 2, 16)
    with pytest.raises(ValueError):
        kb.retrieve(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        kb.retrieve(np.zeros((2, 5)))


def test_save_load_round_trip(tmp_path, small_ds):
    kb = kbase.build(small_ds, 2, 16)
    kb.save(tmp_path / "kb.bin")
    back = KnowledgeBase.load(tmp_path / "kb.bin")
    assert back == kb
    assert back.meta["dataset_hash"] == small_ds.content_hash()
    back.save(tmp_path / "kb2.bin")
    assert (tmp_path / "kb.bin").read_bytes() == (tmp_path / "kb2.bin").read_bytes()


def test_corruption_and_mismatch_detected(tmp_path, small_ds):
    kb = kbase.build(small_ds, 2, 16)
    path = tmp_path / "kb.bin"
    kb.save(path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0x01
    (tmp_path / "bad.bin").write_bytes(bytes(data))
    with pytest.raises(CorruptedFileError):
        KnowledgeBase.load(tmp_path / "bad.bin")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x40
    (tmp_path / "bad2.bin").write_bytes(bytes(data))
    with pytest.raises(CorruptedFileError):
        KnowledgeBase.load(tmp_path / "bad2.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a knowledge base file" * 4)
    with pytest.raises(FormatError):
        KnowledgeBase.load(tmp_path / "junk.bin")
    with pytest.raises(MetadataMismatchError):
        KnowledgeBase.load(path, T_o=3)
    with pytest.raises(MetadataMismatchError):
        KnowledgeBase.load(path, dataset_hash="0" * 64)
    KnowledgeBase.load(path, T_o=2, T_p=16, dataset_hash=small_ds.content_hash())


def test_version_mismatch(tmp_path, small_ds):
    from ragdp import containers

    kb = kbase.build(small_ds, 2, 16)
    header, blocks = containers.decode(kb.to_bytes(), kbase.KB_MAGIC, kbase.KB_VERSION)
    raw = containers.encode(kbase.KB_MAGIC, kbase.KB_VERSION + 1, header, {k: ("<f8", v) for k, v in blocks.items()})
    (tmp_path / "v2.bin").write_bytes(raw)
    with pytest.raises(FormatError, match="version"):
        KnowledgeBase.load(tmp_path / "v2.bin")


def test_stored_arrays_are_read_only(small_ds):
    kb = kbase.build(small_ds, 2, 16)
    with pytest.raises(ValueError):
        kb.keys[0, 0] = 1.0
