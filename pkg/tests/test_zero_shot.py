import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import make_clip
from multiamp.tone_encoder import EncoderConfig, ToneEncoder, embed_audio
from multiamp.zero_shot import (RetrievalIndex, build_index, cosine_sim, select, select_direct,
                                select_mean, select_nearest, tone_means)


def exhaustive_nearest(q, rows):
    """Plain loop: best cosine, earliest index on ties."""
    best, best_i = -np.inf, None
    for i, r in enumerate(rows):
        s = float(np.dot(q, r) / (np.linalg.norm(q) * np.linalg.norm(r)))
        if s > best:
            best, best_i = s, i
    return best_i, best


def random_index(seed, n_tones=5, per_tone=8, dim=12):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_tones, dim))
    emb, tones, contents = [], [], []
    for t in range(n_tones):
        for k in range(per_tone):
            v = centres[t] + 0.6 * rng.standard_normal(dim)
            emb.append(v / np.linalg.norm(v))
            tones.append(f"tone{t}")
            contents.append(f"c{k}")
    return RetrievalIndex.from_entries(np.array(emb), tones, contents), rng


def test_cosine_sim():
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([2, 0], [3, 0]) == pytest.approx(1.0)
    assert cosine_sim([1, 1], [-1, -1]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])


def test_tone_means_are_normalised_means():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, -3.0]])
    ids, means = tone_means(emb, ["a", "a", "b", "b"])
    assert ids == ["a", "b"]
    np.testing.assert_allclose(means[0], [2 ** -0.5, 2 ** -0.5], atol=1e-7)
    np.testing.assert_allclose(means[1], [0.0, -1.0], atol=1e-7)


def test_selection_matches_exhaustive_scan_on_100_queries():
    index, rng = random_index(0)
    for _ in range(100):
        q = rng.standard_normal(12)
        i, s = exhaustive_nearest(q, index.embeddings.astype(np.float64))
        phi, tone, sim = select_nearest(q, index)
        np.testing.assert_array_equal(phi.vector, index.embeddings[i])
        assert tone == index.tone_ids[i] and phi.source_tone_id == tone
        assert sim == pytest.approx(s, abs=1e-12)
        j, s = exhaustive_nearest(q, index.means.astype(np.float64))
        phi, tone, sim = select_mean(q, index)
        np.testing.assert_array_equal(phi.vector, index.means[j])
        assert tone == index.mean_ids[j]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_nearest_over_means_is_mean_strategy(seed):
    index, rng = random_index(seed)
    means_only = RetrievalIndex.from_entries(index.means, index.mean_ids, [""] * len(index.mean_ids))
    q = rng.standard_normal(12)
    a, ta, sa = select_nearest(q, means_only)
    b, tb, sb = select_mean(q, index)
    np.testing.assert_allclose(a.vector, b.vector, atol=1e-6)
    assert ta == tb and sa == pytest.approx(sb, abs=1e-6)


def test_query_equal_to_entry_returns_it():
    index, _ = random_index(1)
    for i in (0, 13, 39):
        _, tone, sim = select_nearest(index.embeddings[i], index)
        assert tone == index.tone_ids[i] and sim == pytest.approx(1.0, abs=1e-6)


def test_ties_pick_lowest_ordinal():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    index = RetrievalIndex.from_entries(emb, ["b", "a", "c"], ["x", "y", "z"])
    _, tone, _ = select_nearest([1.0, 0.0], index)
    assert tone == "b"


def test_selection_errors():
    index, _ = random_index(2)
    with pytest.raises(ValueError):
        select_nearest(np.zeros(12), index)
    empty = RetrievalIndex.from_entries(np.zeros((0, 12)), [], [])
    with pytest.raises(ValueError):
        select_nearest(np.ones(12), empty)
    with pytest.raises(ValueError):
        RetrievalIndex(np.zeros((2, 3)), ["a"], ["b", "c"], [], np.zeros((0, 3)))


def test_index_round_trip(tmp_path):
    index, rng = random_index(3)
    index.save(tmp_path / "idx")
    again = RetrievalIndex.load(tmp_path / "idx")
    np.testing.assert_array_equal(again.embeddings, index.embeddings)
    np.testing.assert_array_equal(again.means, index.means)
    assert again.tone_ids == index.tone_ids and again.content_ids == index.content_ids
    assert again.mean_ids == index.mean_ids
    q = rng.standard_normal(12)
    assert select_nearest(q, again)[1] == select_nearest(q, index)[1]


def test_index_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="zero-shot"):
        RetrievalIndex.load(tmp_path / "none")
    index, _ = random_index(4)
    d = index.save(tmp_path / "idx")
    raw = (d / "index.bin").read_bytes()
    (d / "index.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        RetrievalIndex.load(d)
    (d / "index.bin").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValueError):
        RetrievalIndex.load(d)


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return ToneEncoder(EncoderConfig(channels=(4, 8), hidden_dim=16, embedding_dim=16, head_dims=(8,),
                                     n_mels=32)).eval()


def _clips(n_tones, per_tone, n=8000, sr=16000):
    rng = np.random.default_rng(0)
    return [make_clip(rng.standard_normal(n), tone=f"t{t}", content=f"c{k}", sr=sr)
            for t in range(n_tones) for k in range(per_tone)]


def test_build_index_counts_and_sampling(encoder, caplog):
    clips = _clips(3, 5)
    index = build_index(clips, encoder, per_tone_count=4, seed=0)
    assert len(index) == 12
    assert [index.tone_ids.count(t) for t in ("t0", "t1", "t2")] == [4, 4, 4]
    assert len(set(zip(index.tone_ids, index.content_ids))) == 12  # no replacement needed
    big = build_index(clips, encoder, per_tone_count=7, seed=0)
    assert len(big) == 21 and "with replacement" in caplog.text
    np.testing.assert_allclose(np.linalg.norm(index.embeddings, axis=1), 1.0, atol=1e-5)
    again = build_index(clips, encoder, per_tone_count=4, seed=0)
    assert again.content_ids == index.content_ids


def test_build_index_with_embed_function_matches_encoder(encoder):
    clips = _clips(2, 3)
    a = build_index(clips, encoder, per_tone_count=3)
    b = build_index(clips, per_tone_count=3, embed=lambda c: embed_audio(encoder, c.samples, c.sample_rate))
    np.testing.assert_allclose(a.embeddings, b.embeddings, atol=1e-5)
    with pytest.raises(ValueError):
        build_index(clips, per_tone_count=3)
    with pytest.raises(ValueError):
        build_index(clips, encoder, per_tone_count=0)


def test_select_dispatch(encoder):
    clips = _clips(2, 3)
    index = build_index(clips, encoder, per_tone_count=3)
    ref = make_clip(np.random.default_rng(9).standard_normal(22050), sr=44100)
    direct = select("direct", ref, encoder)
    np.testing.assert_allclose(direct.vector, select_direct(ref, encoder).vector)
    np.testing.assert_allclose(direct.vector, embed_audio(encoder, ref.samples, 44100))
    near = select("nearest", ref, encoder, index)
    assert near.source_tone_id in ("t0", "t1")
    assert any(np.array_equal(near.vector, row) for row in index.embeddings)
    mean = select("mean", ref, encoder, index)
    assert any(np.array_equal(mean.vector, row) for row in index.means)
    q = index.embeddings[4]
    np.testing.assert_array_equal(select("nearest", ref, encoder, index, query=q).vector, q)
    with pytest.raises(ValueError):
        select("nearest", ref, encoder)
    with pytest.raises(ValueError):
        select("median", ref, encoder, index)
