import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_clip
from multiamp.dataset import (CLIP_SAMPLES, MissingRenderError, Pair, ReferencePool, build_corpus,
                              build_pairs, load_corpus, peak_normalize, read_manifest, read_wav,
                              resample, sample_reference, segment, split, write_wav)
from multiamp.virtual_amps import amp_bank


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2000), st.floats(-40.0, 0.0), st.integers(0, 2**31 - 1))
def test_peak_normalize(n, target, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    if not np.any(x):
        return
    y = peak_normalize(x, target)
    assert np.max(np.abs(y)) == pytest.approx(10 ** (target / 20), rel=1e-9)
    # a pure scale: the ratio to the input is constant
    k = np.argmax(np.abs(x))
    np.testing.assert_allclose(y, x * (y[k] / x[k]), rtol=1e-9, atol=1e-15)


def test_peak_normalize_zero():
    with pytest.raises(ValueError):
        peak_normalize(np.zeros(10))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20 * 441), st.floats(0.01, 0.05))
def test_segment_counts(n, dur):
    x = np.arange(n, dtype=np.float32)
    clips = segment(x, duration_s=dur, sr=44100)
    seg = int(round(dur * 44100))
    assert len(clips) == n // seg
    for i, c in enumerate(clips):
        assert len(c) == seg
        assert c.samples[0] == i * seg  # consecutive, non-overlapping
    assert len({c.content_id for c in clips}) == len(clips)


def test_segment_default_length():
    clips = segment(np.zeros(2 * CLIP_SAMPLES + 100))
    assert [len(c) for c in clips] == [154350, 154350]


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 400), st.integers(0, 1000))
def test_split_partition(n, seed):
    ids = [f"c{i:05d}" for i in range(n)]
    sp = split(ids, seed=seed)
    parts = [sp.train, sp.val, sp.test]
    assert sorted(sum(parts, [])) == ids
    assert not set(sp.train) & set(sp.val) and not set(sp.train) & set(sp.test)
    assert not set(sp.val) & set(sp.test)
    assert len(sp.val) == len(sp.test) == int(0.1 * n + 1e-9)
    assert len(sp.val) >= 1
    assert split(ids, seed=seed).to_dict() == sp.to_dict()


def test_split_sizes_90():
    sp = split([f"c{i}" for i in range(90)])
    assert (len(sp.train), len(sp.val), len(sp.test)) == (72, 9, 9)


@pytest.mark.parametrize("ids,fr", [
    ([f"c{i}" for i in range(9)], (0.8, 0.1, 0.1)),
    ([f"c{i}" for i in range(20)], (0.8, 0.1, 0.2)),
    ([f"c{i}" for i in range(20)], (1.1, -0.05, -0.05)),
    (["a"] * 12, (0.8, 0.1, 0.1)),
])
def test_split_errors(ids, fr):
    with pytest.raises(ValueError):
        split(ids, fr)


def _wet_table(cids, tones, n=64):
    return {(c, t): make_clip(np.ones(n), tone=t, content=c) for c in cids for t in tones}


def test_build_pairs_and_missing():
    clean = [make_clip(np.ones(64), tone="clean", content=c, role="clean") for c in ("a", "b")]
    wet = _wet_table(["a", "b"], ["t1", "t2"])
    pairs = build_pairs(clean, ["t1", "t2"], wet)
    assert len(pairs) == 4
    assert {(p.content_id, p.tone_id) for p in pairs} == {("a", "t1"), ("a", "t2"), ("b", "t1"), ("b", "t2")}
    del wet[("b", "t2")]
    with pytest.raises(MissingRenderError) as e:
        build_pairs(clean, ["t1", "t2"], wet)
    assert (e.value.content_id, e.value.tone_id) == ("b", "t2")


def test_build_pairs_misaligned():
    clean = [make_clip(np.ones(64), tone="clean", content="a", role="clean")]
    wet = {("a", "t1"): make_clip(np.ones(63), tone="t1", content="a")}
    with pytest.raises(ValueError):
        build_pairs(clean, ["t1"], wet)


def test_unpaired_reference_is_uniform_and_never_same_content():
    cids = [f"c{i}" for i in range(5)]
    wet = _wet_table(cids, ["t1", "t2"])
    pool = ReferencePool(wet.values())
    target = Pair(make_clip(np.ones(64), "clean", "c2", role="clean"), wet[("c2", "t1")])
    rng = np.random.default_rng(0)
    counts = {}
    n = 8000
    for _ in range(n):
        z = sample_reference(target, "unpaired", rng, pool)
        assert z.tone_id == "t1" and z.content_id != "c2" and z.role == "reference"
        counts[z.content_id] = counts.get(z.content_id, 0) + 1
    assert sorted(counts) == ["c0", "c1", "c3", "c4"]
    # chi-square against uniform, 3 dof, p=0.001 critical value 16.27
    chi2 = sum((v - n / 4) ** 2 / (n / 4) for v in counts.values())
    assert chi2 < 16.27


def test_paired_reference_and_fallback(caplog):
    wet = _wet_table(["c0"], ["t1"])
    pool = ReferencePool(wet.values())
    target = Pair(make_clip(np.ones(64), "clean", "c0", role="clean"), wet[("c0", "t1")])
    z = sample_reference(target, "paired", np.random.default_rng(0), pool)
    assert z.content_id == "c0" and np.array_equal(z.samples, target.y.samples)
    z = sample_reference(target, "unpaired", np.random.default_rng(0), pool)
    assert z.content_id == "c0"
    assert "paired reference" in caplog.text
    with pytest.raises(ValueError):
        sample_reference(target, "other", np.random.default_rng(0), pool)


def _alias_level(f_in):
    # tone above the 8 kHz output Nyquist must be suppressed after 44.1k -> 16k
    t = np.arange(44100) / 44100
    y = resample(np.sin(2 * np.pi * f_in * t), 44100, 16000).astype(np.float64)
    w = np.hanning(len(y))
    spec = np.abs(np.fft.rfft(y * w)) / (w.sum() / 2)
    return 20 * np.log10(spec.max() + 1e-20)


@pytest.mark.parametrize("f_in", [8000.0, 9000.0, 12000.0, 18000.0, 21000.0])
def test_resample_alias_rejection(f_in):
    assert _alias_level(f_in) < -60.0


def test_resample_passband_and_length():
    t = np.arange(44100) / 44100
    y = resample(np.sin(2 * np.pi * 1000 * t), 44100, 16000)
    assert len(y) == 16000
    ref = np.sin(2 * np.pi * 1000 * np.arange(16000) / 16000)
    mid = slice(500, -500)
    np.testing.assert_allclose(y[mid], ref[mid], atol=2e-3)


def test_resample_upsampling_round_trip():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 440 * t)
    y = resample(x, 16000, 44100)
    assert len(y) == 44100
    back = resample(y, 44100, 16000)
    np.testing.assert_allclose(back[1000:-1000], x[1000:-1000], atol=1e-3)


@pytest.mark.parametrize("subtype,tol", [("float32", 0.0), ("pcm16", 0.5 / 32768)])
def test_wav_round_trip(tmp_path, rng, subtype, tol):
    x = (0.5 * rng.standard_normal(1000)).clip(-0.99, 0.99).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, 44100, subtype)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 44100 and y.dtype == np.float32
    assert np.max(np.abs(y - x)) <= tol + 1e-7


def test_wav_rejects_stereo(tmp_path):
    from scipy.io import wavfile
    wavfile.write(str(tmp_path / "s.wav"), 44100, np.zeros((10, 2), np.float32))
    with pytest.raises(ValueError):
        read_wav(tmp_path / "s.wav")
    with pytest.raises(ValueError):
        write_wav(tmp_path / "t.wav", np.zeros((10, 2)), 44100)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    rng = np.random.default_rng(3)
    audio = 0.3 * rng.standard_normal(CLIP_SAMPLES * 10 + 17)
    amps = amp_bank()[:2]
    out = tmp_path_factory.mktemp("corpus")
    return build_corpus(audio, amps, out, seed=1), out


def test_corpus_layout(small_corpus):
    corpus, out = small_corpus
    rows = read_manifest(out / "manifest.csv")
    assert len(rows) == 10 * 3
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert len(corpus.clean_clips("train")) == 8
    for c in corpus.clean.values():
        assert np.max(np.abs(c.samples)) == pytest.approx(10 ** (-12 / 20), rel=1e-6)
    for y in corpus.wet.values():
        assert np.max(np.abs(y.samples)) == pytest.approx(10 ** (-12 / 20), rel=1e-6)


def test_corpus_round_trip(small_corpus):
    corpus, out = small_corpus
    again = load_corpus(out)
    assert again.split.to_dict() == corpus.split.to_dict()
    assert again.seen_ids == corpus.seen_ids
    for k, clip in corpus.wet.items():
        assert np.array_equal(again.wet[k].samples, clip.samples)
    pairs = again.pairs("test", again.seen_ids)
    assert len(pairs) == len(again.split.test) * 2


def test_corpus_missing_file(small_corpus, tmp_path):
    import shutil
    corpus, out = small_corpus
    copy = tmp_path / "c"
    shutil.copytree(out, copy)
    cid = corpus.split.test[0]
    tone = corpus.seen_ids[0]
    (copy / "wet" / tone / f"{cid}.wav").unlink()
    c2 = load_corpus(copy)
    with pytest.raises(MissingRenderError):
        c2.pairs("test", [tone])
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nothing")
