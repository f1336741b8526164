import json

import numpy as np
import pytest
import torch

from multiamp import training
from multiamp.checkpoint import weights_hash
from multiamp.dataset import AudioClip, Pair, build_corpus, render_wet
from multiamp.generator import GCNConfig
from multiamp.tone_encoder import EncoderConfig, ToneEncoder
from multiamp.training import (Conditioner, EmbeddingCache, TrainConfig, TrainingDivergedError,
                               clip_losses, load_generator, summarize, train_generator,
                               train_one_to_one, validate)
from multiamp.virtual_amps import amp_bank

SR = 44100
N = 4410
ENC = dict(channels=(4, 8), hidden_dim=16, embedding_dim=16, head_dims=(8,), n_mels=32)


def gcn(mode="film", source="lut", n_tones=3):
    return GCNConfig(num_layers=4, channels=4, film_head_depth=2, film_head_width=6, embedding_dim=16,
                     condition_dim=8, num_luts=n_tones, conditioning_mode=mode, condition_source=source)


def cfg(**kw):
    base = dict(batch_size=3, max_steps=6, crop_samples=2048, val_every=3, patience=5, seed=7)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(0)
    amps = amp_bank()[:3]
    out = {"train": [], "val": []}
    for part, count in (("train", 4), ("val", 2)):
        for c in range(count):
            x = AudioClip((0.25 * rng.standard_normal(N)).astype(np.float32), SR, "clean", "clean", f"{part}{c}")
            for a in amps:
                out[part].append(Pair(x, render_wet(x, a)))
    return out


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return ToneEncoder(EncoderConfig(**ENC)).eval()


def test_train_config_validation():
    for kw in ({"lr": 0}, {"batch_size": 0}, {"condition_source": "onehot"},
               {"reference_mode": "both"}, {"conditioning_mode": "add"}, {"crop_samples": 1000},
               {"patience": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    d = TrainConfig()
    assert (d.lr, d.batch_size) == (1e-3, 12)


def test_config_diff_isolates_condition_source():
    lut = TrainConfig(condition_source="lut")
    emb = TrainConfig(condition_source="tone_embedding")
    assert lut.diff(emb) == {"condition_source": ("lut", "tone_embedding")}
    assert lut.hash() != emb.hash() and lut.hash() == TrainConfig(condition_source="lut").hash()


def test_make_batch_matches_padded_clip(pairs):
    rf = 31
    rng = np.random.default_rng(0)
    x, y, starts = training._make_batch(pairs["train"], [0, 4, 7], rf, 2048, rng)
    assert x.shape == (3, 2048 + rf - 1) and y.shape == (3, 2048)
    for row, (i, s) in enumerate(zip([0, 4, 7], starts)):
        p = pairs["train"][i]
        padded = np.concatenate([np.zeros(rf - 1, np.float32), p.x.samples])
        np.testing.assert_array_equal(x[row].numpy(), padded[s: s + 2048 + rf - 1])
        np.testing.assert_array_equal(y[row].numpy(), p.y.samples[s: s + 2048])


def test_lut_training_outputs(pairs, tmp_path):
    res = train_generator(pairs["train"], cfg(condition_source="lut"), gcn("film", "lut"),
                          val_pairs=pairs["val"], out_dir=tmp_path, manifest_hash="abc")
    assert res.tone_ids == ["amp1", "amp2", "amp3"]
    assert res.initial_val is not None and res.best_step in (3, 6)
    steps = [r["step"] for r in res.history]
    assert steps == [0, 1, 2, 3, 4, 5, 6]
    for name in ("config.json", "metrics.jsonl", "model_card.txt", "generator.pt",
                 "checkpoints/last.pt", "checkpoints/best.pt"):
        assert (tmp_path / name).exists(), name
    card = (tmp_path / "model_card.txt").read_text()
    assert "parameters:" in card and "data manifest hash: abc" in card
    metrics = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == steps
    model, conf = load_generator(tmp_path / "generator.pt")
    x = torch.randn(2, 500)
    with torch.no_grad():
        torch.testing.assert_close(model(x, torch.tensor([0, 2])), res.model(x, torch.tensor([0, 2])))
    assert conf["train_hash"] == cfg(condition_source="lut").hash()


def test_frozen_encoder(pairs, encoder):
    before = weights_hash(encoder)
    grads_seen = []
    encoder.register_full_backward_hook(lambda *a: grads_seen.append(1))
    res = train_generator(pairs["train"], cfg(max_steps=4), gcn("film", "tone_embedding"), encoder=encoder,
                          val_pairs=pairs["val"])
    assert weights_hash(encoder) == before
    assert all(not p.requires_grad for p in encoder.parameters())
    assert not grads_seen
    assert len(res.history) == 5


def test_nan_loss_writes_snapshot(pairs, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = training.complex_stft_loss

    def flaky(y_hat, y, *a):
        calls["n"] += 1
        out = real(y_hat, y, *a)
        return out * float("nan") if calls["n"] == 3 else out

    monkeypatch.setattr(training, "complex_stft_loss", flaky)
    with pytest.raises(TrainingDivergedError) as e:
        train_generator(pairs["train"], cfg(condition_source="lut", lr=0.01), gcn("film", "lut"),
                        out_dir=tmp_path)
    assert "step 3" in str(e.value) and "lr=0.01" in str(e.value)
    snap = torch.load(tmp_path / "nan_snapshot.pt", weights_only=False)
    assert snap["step"] == 3 and snap["lr"] == 0.01
    assert snap["x"].shape[0] == 3 and len(snap["tone_ids"]) == 3


def test_resume_after_interruption_matches_uninterrupted(pairs, tmp_path):
    c = cfg(condition_source="lut", max_steps=10, val_every=5, checkpoint_every=5)
    ref = train_generator(pairs["train"], c, gcn("film", "lut"), val_pairs=pairs["val"])

    def crash(row):
        if row["step"] == 7:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train_generator(pairs["train"], c, gcn("film", "lut"), val_pairs=pairs["val"], out_dir=tmp_path,
                        on_step=crash)
    res = train_generator(pairs["train"], c, gcn("film", "lut"), val_pairs=pairs["val"], out_dir=tmp_path)
    assert [r["step"] for r in res.history] == [r["step"] for r in ref.history]
    for a, b in zip(ref.history, res.history):
        assert a.get("train_loss", 0) == pytest.approx(b.get("train_loss", 0), abs=1e-6)
    for p, q in zip(ref.model.parameters(), res.model.parameters()):
        torch.testing.assert_close(p, q, rtol=0, atol=1e-6)


def test_resume_refuses_changed_config(pairs, tmp_path):
    c = cfg(condition_source="lut", max_steps=3, checkpoint_every=3)
    train_generator(pairs["train"], c, gcn("film", "lut"), out_dir=tmp_path)
    with pytest.raises(ValueError, match="different train config"):
        train_generator(pairs["train"], cfg(condition_source="lut", max_steps=3, lr=0.1), gcn("film", "lut"),
                        out_dir=tmp_path)


def test_seeded_runs_are_identical(pairs, encoder):
    c = cfg(max_steps=4)
    a = train_generator(pairs["train"], c, gcn("film", "tone_embedding"), encoder=encoder, val_pairs=pairs["val"])
    b = train_generator(pairs["train"], c, gcn("film", "tone_embedding"), encoder=encoder, val_pairs=pairs["val"])
    assert a.history == b.history


def test_unpaired_audit_counts_every_example(pairs, encoder):
    c = cfg(max_steps=4, audit=True, reference_mode="unpaired")
    res = train_generator(pairs["train"], c, gcn("film", "tone_embedding"), encoder=encoder)
    assert res.history[-1]["audited"] == 4 * 3


def test_audit_catches_content_reuse(pairs, encoder, monkeypatch):
    monkeypatch.setattr(training, "sample_reference", lambda pair, mode, rng, pool: pair.y.as_role("reference"))
    with pytest.raises(AssertionError, match="reuses target content"):
        train_generator(pairs["train"], cfg(max_steps=2, audit=True), gcn("film", "tone_embedding"),
                        encoder=encoder)


def test_conditioner_dispatch(pairs, encoder):
    cache = EmbeddingCache(encoder)
    from multiamp.dataset import ReferencePool
    pool = ReferencePool([p.y for p in pairs["train"]])
    rng = np.random.default_rng(0)
    p = pairs["train"][4]
    lut = Conditioner("lut", "film", ["amp1", "amp2", "amp3"])
    assert lut(p, rng) == ["amp1", "amp2", "amp3"].index(p.tone_id)
    assert Conditioner("lut", "none", ["amp1"])(p, rng) is None
    with pytest.raises(ValueError):
        Conditioner("lut", "film", ["amp9"])(p, rng)
    paired = Conditioner("tone_embedding", "film", [], pool, cache, "paired")
    np.testing.assert_array_equal(paired(p, rng), cache.get(p.y))
    unpaired = Conditioner("tone_embedding", "film", [], pool, cache, "unpaired")
    v = unpaired(p, rng)
    keys = [k for k, e in cache.table.items() if np.array_equal(e, v)]
    assert keys and all(k[0] == p.tone_id and k[1] != p.content_id for k in keys)
    with pytest.raises(ValueError):
        Conditioner("tone_embedding", "film", [])
    with pytest.raises(KeyError):
        EmbeddingCache(None).get(p.y)


def test_lut_rows_must_match_tones(pairs):
    with pytest.raises(ValueError, match="LUT has"):
        train_generator(pairs["train"], cfg(condition_source="lut"), gcn("film", "lut", n_tones=5))
    with pytest.raises(ValueError, match="disagree"):
        train_generator(pairs["train"], cfg(condition_source="lut"), gcn("concat", "lut"))
    with pytest.raises(ValueError, match="encoder"):
        train_generator(pairs["train"], cfg(), gcn("film", "tone_embedding"))


def test_early_stopping_restores_best(pairs, monkeypatch, tmp_path):
    vals = iter([1.0, 0.5, 0.7, 0.8, 0.9, 1.0])
    monkeypatch.setattr(training, "validate", lambda *a, **k: {"mean": next(vals), "per_amp": {}, "counts": {}})
    c = cfg(condition_source="lut", max_steps=20, val_every=2, patience=2)
    res = train_generator(pairs["train"], c, gcn("film", "lut"), val_pairs=pairs["val"], out_dir=tmp_path)
    assert res.stopped_early and res.best_val == 0.5 and res.best_step == 2
    assert res.history[-1]["step"] == 6
    assert res.initial_val == 1.0
    best = torch.load(tmp_path / "checkpoints" / "best.pt", weights_only=True)["state_dict"]
    final = torch.load(tmp_path / "generator.pt", weights_only=True)["state_dict"]
    assert best.keys() == final.keys()
    assert all(torch.equal(best[k], final[k]) for k in best)


def test_one_to_one(pairs, tmp_path):
    single = [p for p in pairs["train"] if p.tone_id == "amp2"]
    val = [p for p in pairs["val"] if p.tone_id == "amp2"]
    res = train_one_to_one(single, cfg(max_steps=3), gcn("film", "tone_embedding"), val_pairs=val,
                           out_dir=tmp_path)
    m = res.model
    assert m.cfg.conditioning_mode == "none" and m.heads is None and m.lut is None and m.projection is None
    assert res.tone_ids == ["amp2"]
    x = torch.randn(300)
    with torch.no_grad():
        torch.testing.assert_close(m(x), m(x, torch.randn(16)))
    with pytest.raises(ValueError, match="single-tone"):
        train_one_to_one(pairs["train"], cfg(max_steps=1))
    with pytest.raises(ValueError, match="same amp"):
        train_one_to_one(single, cfg(max_steps=1), val_pairs=pairs["val"])


class _Echo(torch.nn.Module):
    """Returns the target exactly: gives an oracle loss of zero."""

    def __init__(self, lookup):
        super().__init__()
        self.lookup = lookup

    def forward(self, x, cond=None):
        return torch.stack([torch.from_numpy(self.lookup[float(row[0])]) for row in x])


def test_validate_properties(pairs):
    val = pairs["val"]
    lookup = {float(p.x.samples[0]): p.y.samples for p in val if p.tone_id == "amp1"}
    only = [p for p in val if p.tone_id == "amp1"]
    cond = Conditioner("lut", "none", [])
    res = validate(_Echo(lookup), only, cond)
    assert res["mean"] == 0.0 and res["per_amp"] == {"amp1": 0.0}
    with pytest.raises(ValueError):
        validate(_Echo(lookup), [], cond)


def test_summarize_is_clip_weighted():
    rows = [{"tone_id": "a", "content_id": "1", "loss": 1.0}, {"tone_id": "a", "content_id": "2", "loss": 3.0},
            {"tone_id": "b", "content_id": "1", "loss": 5.0}]
    s = summarize(rows)
    assert s["per_amp"] == {"a": 2.0, "b": 5.0}
    assert s["counts"] == {"a": 2, "b": 1}
    assert s["mean"] == pytest.approx(3.0)


def test_clip_losses_deterministic(pairs):
    torch.manual_seed(0)
    from multiamp.generator import ConditionalGCN
    model = ConditionalGCN(gcn("film", "lut"))
    cond = Conditioner("lut", "film", ["amp1", "amp2", "amp3"])
    a = clip_losses(model, pairs["val"], cond, seconds=0.05, batch_size=4)
    b = clip_losses(model, pairs["val"], cond, seconds=0.05, batch_size=1)
    assert len(a) == len(pairs["val"])
    for r, s in zip(a, b):
        assert r["loss"] == pytest.approx(s["loss"], rel=1e-5)


@pytest.mark.slow
def test_desk_scale_training_progress(tmp_path):
    """3 amps, 5 min of audio, 2k steps, fixed seed: final val < 0.5 x initial val."""
    from multiamp.synth import clean_guitar
    audio = clean_guitar(300.0, seed=0)
    corpus = build_corpus(audio, amp_bank()[:3], tmp_path / "corpus", seed=0)
    tones = corpus.seen_ids
    c = TrainConfig(condition_source="lut", batch_size=4, max_steps=2000, crop_samples=2048, val_every=250,
                    patience=8, val_seconds=1.0, seed=0)
    g = GCNConfig(num_layers=10, channels=8, condition_source="lut", num_luts=3)
    res = train_generator(corpus.pairs("train", tones), c, g, val_pairs=corpus.pairs("val", tones))
    final = res.history[-1]["val_loss"]
    assert final < 0.5 * res.initial_val, (res.initial_val, final)
