import math
import struct

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relmatch.embedding import (
    INDEX_MAGIC,
    CachedProvider,
    LocalHashProvider,
    RemoteEmbeddingProvider,
    build_index,
    embed,
    load_index,
    query_topk,
    save_index,
    serialize_entity,
)
from relmatch.errors import CorruptIndex, DimensionMismatch, DuplicateId, EmptyInput, IoFailure, ProviderUnavailable
from relmatch.model import EntityRecord

from tests.oracles import brute_force_ranking


def grid_vectors(rng, n, dim):
    # multiples of 2**-10 keep every distance computation exact
    return rng.integers(-1024, 1025, size=(n, dim)) / 1024.0


def test_serialize_entity():
    assert serialize_entity(EntityRecord("e", (("item", "Power Adapter"),)), ["item"]) == "item: Power Adapter"
    assert serialize_entity(EntityRecord("e", (("item", ""),)), ["item"]) == "item: "
    rec = EntityRecord("e", (("item", "small car"), ("size", "small")))
    assert serialize_entity(rec, ["item", "size"]) == "item: small car; size: small"


def test_local_provider_deterministic_and_shaped():
    provider = LocalHashProvider(16, seed=3)
    a = embed("item: Power Adapter", provider)
    b = embed("item: Power Adapter", LocalHashProvider(16, seed=3))
    assert a.shape == (16,)
    assert np.all(np.isfinite(a))
    assert np.array_equal(a, b)
    assert np.all((a >= -1) & (a < 1))
    assert not np.array_equal(a, embed("item: Power Adapter", LocalHashProvider(16, seed=4)))
    assert len(embed("x", LocalHashProvider(40))) == 40


def test_embed_rejects_wrong_dimension():
    class Liar:
        id = "liar"
        dimension = 8

        def embed_text(self, text):
            return np.zeros(7)

    with pytest.raises(DimensionMismatch):
        embed("x", Liar())
    with pytest.raises(ValueError):
        embed("", LocalHashProvider())


def test_cached_remote_provider_skips_network(tmp_path):
    requests = []

    def handler(request):
        requests.append(request)
        return httpx.Response(200, json={"data": [{"embedding": [0.5, -0.25, 1.0]}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    remote = RemoteEmbeddingProvider("http://embed.test/v1/embeddings", "ada-002", 3, api_key="k", client=client)
    provider = CachedProvider(remote, tmp_path)
    first = embed("item: Power Adapter", provider)
    second = embed("item: Power Adapter", provider)
    assert len(requests) == 1
    assert np.array_equal(first, second)
    assert requests[0].headers["authorization"] == "Bearer k"
    # a fresh wrapper over the same directory still hits the cache
    embed("item: Power Adapter", CachedProvider(remote, tmp_path))
    assert len(requests) == 1


def test_remote_provider_failure():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    provider = RemoteEmbeddingProvider("http://embed.test", "m", 3, api_key="", client=client)
    with pytest.raises(ProviderUnavailable):
        embed("x", provider)


def test_build_index_basic_and_errors():
    index = build_index([("a", [0, 0, 0, 0]), ("b", [1, 0, 0, 0]), ("c", [0, 1, 0, 0])])
    assert index.dimension == 4 and len(index) == 3
    with pytest.raises(DuplicateId):
        build_index([("e1", [0.0]), ("e1", [1.0])])
    with pytest.raises(EmptyInput):
        build_index([])
    with pytest.raises(DimensionMismatch):
        build_index([("a", [0.0, 1.0]), ("b", [1.0])])
    with pytest.raises(DimensionMismatch):
        query_topk(index, [0.0, 0.0], 1)


def test_index_is_immutable():
    index = build_index([("a", [0.0, 1.0])])
    with pytest.raises(ValueError):
        index.vectors[0, 0] = 5.0


def test_self_query_and_exhaustion():
    rng = np.random.default_rng(0)
    vecs = grid_vectors(rng, 7, 4)
    index = build_index([(f"e{i}", v) for i, v in enumerate(vecs)])
    batch = query_topk(index, vecs[3], 10)
    assert batch.candidates[0] == ("e3", 0.0)
    assert len(batch) == 7
    assert batch.batch_index == 0
    assert query_topk(index, vecs[3], 3, offset=3).batch_index == 1
    assert len(query_topk(index, vecs[3], 3, offset=7)) == 0


def test_matches_brute_force_on_200_vectors():
    rng = np.random.default_rng(7)
    vecs = grid_vectors(rng, 200, 16)
    ids = [f"v{i:03d}" for i in range(200)]
    index = build_index(zip(ids, vecs))
    for probe in grid_vectors(rng, 20, 16):
        full = brute_force_ranking(ids, vecs, probe)
        for offset in range(0, 200, 10):
            got = query_topk(index, probe, 10, offset)
            assert list(got.candidates) == full[offset : offset + 10]


def test_ties_broken_by_id():
    index = build_index([("b", [1.0, 0.0]), ("c", [0.0, 1.0]), ("a", [-1.0, 0.0]), ("d", [0.0, 0.0])])
    batch = query_topk(index, [0.0, 0.0], 4)
    assert batch.ids == ["d", "a", "b", "c"]
    assert [d for _, d in batch.candidates] == [0.0, 1.0, 1.0, 1.0]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 12), seed=st.integers(0, 2**16), dup=st.integers(0, 5))
def test_pagination_covers_ranking(n, k, seed, dup):
    rng = np.random.default_rng(seed)
    vecs = np.vstack([grid_vectors(rng, n, 3), np.zeros((dup, 3))])
    ids = [f"x{i}" for i in range(len(vecs))]
    index = build_index(zip(ids, vecs))
    probe = grid_vectors(rng, 1, 3)[0]
    pages = []
    offset = 0
    while True:
        batch = query_topk(index, probe, k, offset)
        if not batch.candidates:
            break
        assert batch.batch_index == offset // k
        pages.extend(batch.candidates)
        offset += k
    assert pages == brute_force_ranking(ids, vecs, probe)
    assert len({i for i, _ in pages}) == len(ids)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = grid_vectors(rng, 2, 5)
    dist_ab = dict(query_topk(build_index([("b", b)]), a, 1).candidates)["b"]
    dist_ba = dict(query_topk(build_index([("a", a)]), b, 1).candidates)["a"]
    assert dist_ab == dist_ba == math.dist(a, b)
    assert query_topk(build_index([("a", a)]), a, 1).candidates[0][1] == 0.0


def test_save_load_round_trip(tmp_path):
    index = build_index([("a", [0.1, 0.2]), ("bé", [1.5, -2.25]), ("c", [3.0, 4.0])])
    path = tmp_path / "idx.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded == index
    assert loaded.ids == index.ids
    assert loaded.vectors.tobytes() == index.vectors.tobytes()


def test_file_format_is_bit_exact(tmp_path):
    index = build_index([("e1", [1.0, -2.0]), ("e2", [0.5, 0.25])])
    path = tmp_path / "idx.bin"
    save_index(index, path)
    expected = (
        INDEX_MAGIC
        + struct.pack("<II", 2, 2)
        + struct.pack("<H", 2) + b"e1" + struct.pack("<2f", 1.0, -2.0)
        + struct.pack("<H", 2) + b"e2" + struct.pack("<2f", 0.5, 0.25)
    )
    assert path.read_bytes() == expected


def test_corrupt_index_detection(tmp_path):
    index = build_index([("a", [0.1, 0.2]), ("b", [1.5, -2.25])])
    path = tmp_path / "idx.bin"
    save_index(index, path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(CorruptIndex):
        load_index(path)
    path.write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(CorruptIndex):
        load_index(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CorruptIndex):
        load_index(path)
    with pytest.raises(IoFailure):
        load_index(tmp_path / "missing.bin")
