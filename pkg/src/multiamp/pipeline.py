"""Pipeline stages behind the CLI commands.

Run directory layout::

    corpus/                     manifest.csv, split.json, amp_bank.json, clean/, wet/<amp>/
    encoder/                    encoder.pt, checkpoints/, log.jsonl
    generators/<variant>/       generator.pt, checkpoints/, metrics.jsonl, model_card.txt
    generators/one_to_one/<amp>/
    index/                      index.bin + manifest.csv
    embeddings/                 wet.f32 + wet.csv
    eval/                       table1.*, table2.*, embedding_metrics.json, spectrograms/
    configs/<command>.yaml      resolved config of each invocation

Every stage directory gets a ``DONE.json`` marker with the hash of the
configuration (and upstream markers) that produced it. Re-running with the
same hash is a no-op; a different hash is refused unless ``force`` is set.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .dataset import (GENERATOR_SR, AudioClip, ReferencePool, build_corpus, load_corpus,
                      peak_normalize, read_wav, resample, write_wav)
from .evaluation import (ONE_TO_ONE, VARIANTS, ResultTable, embedding_metrics, eval_table,
                         export_spectrograms, project_2d, variant_dirname, write_embeddings,
                         zero_shot_table)
from .generator import GCNConfig, generate
from .synth import clean_guitar
from .tone_encoder import (build_encoder_corpus, embed_clips, load_encoder, train_encoder)
from .training import (Conditioner, EmbeddingCache, TrainConfig, clip_losses, load_generator,
                       summarize, train_generator, train_one_to_one)
from .virtual_amps import amp_bank, load_bank
from .zero_shot import RetrievalIndex, build_index, select, select_mean, select_nearest

log = logging.getLogger(__name__)

MARKER = "DONE.json"


class StaleOutputError(ConfigError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# -- stage bookkeeping -----------------------------------------------------------

def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _stage_done(d: Path, h: str, force: bool) -> bool:
    m = d / MARKER
    if m.exists():
        prev = json.loads(m.read_text())["hash"]
        if prev == h and not force:
            log.info("%s is up to date", d)
            return True
        if prev != h and not force:
            raise StaleOutputError(
                f"{d} holds results of a different configuration (hash {prev}, now {h}); "
                "use --force to overwrite or choose another --out")
    if force and d.exists():
        shutil.rmtree(d)
    return False


def _mark(d: Path, h: str, **info) -> None:
    d.mkdir(parents=True, exist_ok=True)
    (d / MARKER).write_text(json.dumps({"hash": h, **info}, indent=1, sort_keys=True))


def _upstream(d: Path, command: str) -> str:
    m = d / MARKER
    if not m.exists():
        raise MissingArtifactError(f"{d} is missing or incomplete; run `multiamp {command}` first")
    return json.loads(m.read_text())["hash"]


def _save_config(cfg: RunConfig, root: Path, command: str) -> None:
    cfg.dump(root / "configs" / f"{command}.yaml")


# -- data ----------------------------------------------------------------------

def _bank(cfg: RunConfig):
    return load_bank(cfg.data.amp_bank) if cfg.data.amp_bank else amp_bank()


def _clean_audio(cfg: RunConfig) -> np.ndarray:
    if not cfg.data.clean_wav_dir:
        return clean_guitar(cfg.data.clean_seconds, cfg.seed)
    d = Path(cfg.data.clean_wav_dir)
    files = sorted(d.glob("*.wav"))
    if not files:
        raise ConfigError(f"no .wav files in clean_wav_dir {d}")
    parts = []
    for f in files:
        x, sr = read_wav(f)
        parts.append(resample(x, sr, GENERATOR_SR))
    return np.concatenate(parts)


def render_dataset(cfg: RunConfig, root: Path, force: bool = False) -> Path:
    d = root / "corpus"
    bank = _bank(cfg)
    h = _hash("corpus", cfg.seed, dataclasses.asdict(cfg.data), [a.to_record() for a in bank])
    if _stage_done(d, h, force):
        return d
    build_corpus(_clean_audio(cfg), bank, d, seed=cfg.seed, fractions=tuple(cfg.data.fractions),
                 target_dbfs=cfg.data.target_dbfs, wav_subtype=cfg.data.wav_subtype)
    _mark(d, h, manifest_sha256=hashlib.sha256((d / "manifest.csv").read_bytes()).hexdigest())
    return d


def _corpus(root: Path):
    h = _upstream(root / "corpus", "render-dataset")
    return load_corpus(root / "corpus"), h


# -- encoder -------------------------------------------------------------------

def train_encoder_stage(cfg: RunConfig, root: Path, force: bool = False) -> Path:
    corpus, ch = _corpus(root)
    d = root / "encoder"
    h = _hash("encoder", ch, cfg.encoder.to_dict())
    if _stage_done(d, h, force):
        return d
    ec = cfg.encoder
    seen = [corpus.amp(a) for a in corpus.seen_ids]
    enc_corpus = build_encoder_corpus(corpus.clean_clips("train"), seen, ec.num_random_tones,
                                      ec.contents_per_tone, cfg.seed, ec.corpus_clip_seconds)
    train_encoder(enc_corpus, ec, out_dir=d, resume=True)
    _mark(d, h)
    return d


def _encoder(root: Path):
    h = _upstream(root / "encoder", "train-encoder")
    return load_encoder(root / "encoder" / "encoder.pt"), h


# -- generators ----------------------------------------------------------------

def _variant_configs(cfg: RunConfig, variant: str, num_tones: int):
    mode, source, ref = VARIANTS[variant]
    tc = TrainConfig(**{**cfg.train.to_dict(), "conditioning_mode": mode,
                        "condition_source": source, "reference_mode": ref})
    gc = GCNConfig(**{**cfg.generator.to_dict(), "conditioning_mode": mode,
                      "condition_source": source, "num_luts": num_tones})
    return tc, gc


def _one_to_one_configs(cfg: RunConfig):
    steps = cfg.experiment.one_to_one_steps or cfg.train.max_steps
    batch = cfg.experiment.one_to_one_batch_size or cfg.train.batch_size
    tc = TrainConfig(**{**cfg.train.to_dict(), "conditioning_mode": "none", "max_steps": steps,
                        "batch_size": batch})
    gc = GCNConfig(**{**cfg.generator.to_dict(), "conditioning_mode": "none"})
    return tc, gc


def _seen_cache(encoder, corpus, parts=("train", "val")) -> EmbeddingCache:
    cache = EmbeddingCache(encoder)
    for part in parts:
        cache.preload(corpus.wet_clips(part, corpus.seen_ids))
    return cache


def train_generators(cfg: RunConfig, root: Path, variants: Optional[Sequence[str]] = None,
                     one_to_one_amps: Optional[Sequence[str]] = None, force: bool = False) -> List[Path]:
    """Train the requested one-to-many variants and one-to-one baselines."""
    corpus, ch = _corpus(root)
    seen = corpus.seen_ids
    variants = list(cfg.experiment.variants if variants is None else variants)
    if one_to_one_amps is None:
        one_to_one_amps = seen if cfg.experiment.one_to_one else []
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {list(VARIANTS)}")
    for a in one_to_one_amps:
        if a not in seen:
            raise ConfigError(f"{a!r} is not a seen amp ({seen})")
    train_pairs, val_pairs = corpus.pairs("train", seen), corpus.pairs("val", seen)
    mhash = json.loads((root / "corpus" / MARKER).read_text()).get("manifest_sha256", "")
    written = []
    encoder = cache = eh = None
    for v in variants:
        tc, gc = _variant_configs(cfg, v, len(seen))
        uses_encoder = tc.condition_source == "tone_embedding"
        if uses_encoder and encoder is None:
            encoder, eh = _encoder(root)
            cache = _seen_cache(encoder, corpus)
        d = root / "generators" / variant_dirname(v)
        h = _hash("generator", v, ch, eh if uses_encoder else None, tc.to_dict(), gc.to_dict())
        if not _stage_done(d, h, force):
            log.info("training %s", v)
            train_generator(train_pairs, tc, gc, encoder=encoder if uses_encoder else None,
                            val_pairs=val_pairs, out_dir=d, cache=cache if uses_encoder else None,
                            tone_ids=seen, manifest_hash=mhash)
            _mark(d, h, variant=v)
        written.append(d)
    tc, gc = _one_to_one_configs(cfg)
    for a in one_to_one_amps:
        d = root / "generators" / "one_to_one" / a
        h = _hash("one-to-one", a, ch, tc.to_dict(), gc.to_dict())
        if not _stage_done(d, h, force):
            log.info("training one-to-one %s", a)
            train_one_to_one(corpus.pairs("train", [a]), tc, gc, val_pairs=corpus.pairs("val", [a]),
                             out_dir=d, manifest_hash=mhash)
            _mark(d, h, variant=ONE_TO_ONE, amp=a)
        written.append(d)
    return written


def _load_variant(root: Path, variant: str, amp: Optional[str] = None):
    if variant == ONE_TO_ONE:
        d = root / "generators" / "one_to_one" / amp
    else:
        d = root / "generators" / variant_dirname(variant)
    if not (d / MARKER).exists():
        raise MissingArtifactError(
            f"no trained model for variant {variant!r}{' / ' + amp if amp else ''} in {d}; "
            "run `multiamp train-generator` first")
    return load_generator(d / "generator.pt")


def _eval_conditioner(variant: str, tone_ids, pool: Optional[ReferencePool], cache):
    if variant == ONE_TO_ONE:
        return Conditioner("lut", "none", tone_ids)
    mode, source, ref = VARIANTS[variant]
    if source == "lut":
        return Conditioner("lut", mode, tone_ids)
    return Conditioner(source, mode, tone_ids, pool, cache, ref)


# -- index ---------------------------------------------------------------------

def build_index_stage(cfg: RunConfig, root: Path, force: bool = False, cache=None) -> Path:
    corpus, ch = _corpus(root)
    encoder, eh = _encoder(root)
    d = root / "index"
    h = _hash("index", ch, eh, cfg.experiment.per_tone_count, cfg.seed)
    if _stage_done(d, h, force):
        return d
    clips = corpus.wet_clips("train", corpus.seen_ids)
    count = cfg.experiment.per_tone_count or min(
        sum(1 for c in clips if c.tone_id == t) for t in corpus.seen_ids)
    cache = cache or EmbeddingCache(encoder)
    cache.preload(clips)
    index = build_index(clips, per_tone_count=count, seed=cfg.seed, embed=cache.get)
    index.save(d)
    _mark(d, h, size=len(index), per_tone_count=count)
    return d


def _index(root: Path) -> RetrievalIndex:
    _upstream(root / "index", "zero-shot")
    return RetrievalIndex.load(root / "index")


# -- evaluation ----------------------------------------------------------------

def _rows(corpus, ids):
    return [(a, corpus.amp(a).gain_class) for a in ids]


def _table1(cfg, root, corpus, cache) -> ResultTable:
    seen = corpus.seen_ids
    test = corpus.pairs("test", seen)
    pool = ReferencePool([p.y for p in test])
    columns: Dict[str, object] = {}
    hashes = {}
    if cfg.experiment.one_to_one:
        per_amp = {}
        for a in seen:
            model, info = _load_variant(root, ONE_TO_ONE, a)
            per_amp[a] = (model, _eval_conditioner(ONE_TO_ONE, info["tone_ids"], pool, cache))
            hashes[f"{ONE_TO_ONE}/{a}"] = info["train_hash"]
        columns[ONE_TO_ONE] = per_amp
    for v in cfg.experiment.variants:
        model, info = _load_variant(root, v)
        columns[v] = (model, _eval_conditioner(v, info["tone_ids"], pool, cache))
        hashes[v] = info["train_hash"]
    return eval_table(columns, test, _rows(corpus, seen), seed=cfg.seed,
                      batch_size=cfg.experiment.eval_batch,
                      metadata={"config_hashes": hashes, "title_note": "one-to-one vs one-to-many"},
                      title="Per-amp test loss (complex STFT)")


def _seen_reference(cfg, root, corpus, cache, model, info, variant) -> Dict[str, float]:
    """Mean seen-amp test loss per gain class for the zero-shot model."""
    t1 = root / "eval" / "table1.json"
    if t1.exists():
        table = ResultTable.load(t1)
        if variant in table.columns:
            return {g: table.column_mean(variant, g) for g in sorted({g for _, g in table.rows})}
    test = corpus.pairs("test", corpus.seen_ids)
    cond = _eval_conditioner(variant, info["tone_ids"], ReferencePool([p.y for p in test]), cache)
    res = summarize(clip_losses(model, test, cond, seed=cfg.seed, batch_size=cfg.experiment.eval_batch))
    out: Dict[str, List[float]] = {}
    for a, loss in res["per_amp"].items():
        out.setdefault(corpus.amp(a).gain_class, []).append(loss)
    return {g: float(np.mean(v)) for g, v in sorted(out.items())}


def zero_shot_stage(cfg: RunConfig, root: Path, force: bool = False, cache=None) -> Path:
    corpus, _ = _corpus(root)
    encoder, _ = _encoder(root)
    cache = cache or _seen_cache(encoder, corpus, ("test",))
    unseen = corpus.unseen_ids
    if not unseen:
        raise ConfigError("amp bank has no unseen amps for zero-shot evaluation")
    strategies = cfg.experiment.strategies
    index = None
    if any(s != "direct" for s in strategies):
        build_index_stage(cfg, root, force=force, cache=cache)
        index = _index(root)
    variant = cfg.experiment.zero_shot_variant
    model, info = _load_variant(root, variant)
    seen_ref = _seen_reference(cfg, root, corpus, cache, model, info, variant)
    pairs = corpus.pairs("test", unseen)
    table = zero_shot_table(model, pairs, _rows(corpus, unseen), cache.get, index, strategies,
                            seen_reference=seen_ref, seed=cfg.seed, batch_size=cfg.experiment.eval_batch,
                            metadata={"model": variant, "config_hash": info["train_hash"]})
    table.save(root / "eval" / "table2")
    return root / "eval" / "table2.json"


def _embedding_report(cfg, root, corpus, encoder, cache) -> dict:
    seen = corpus.seen_ids
    clips = corpus.wet_clips("test", seen)
    cache.preload(clips)
    emb = np.stack([cache.get(c) for c in clips])
    labels = [c.tone_id for c in clips]
    report = embedding_metrics(emb, labels)
    index = _index(root)
    near = [select_nearest(e, index)[1] for e in emb]
    mean = [select_mean(e, index)[1] for e in emb]
    report["nearest_accuracy"] = float(np.mean([p == t for p, t in zip(near, labels)]))
    report["mean_accuracy"] = float(np.mean([p == t for p, t in zip(mean, labels)]))
    # level robustness of retrieval: rescale the reference and re-query
    changed = []
    for scale in (0.5, 2.0):
        scaled = [AudioClip(c.samples * scale, c.sample_rate, "reference", c.tone_id, c.content_id) for c in clips]
        e2 = embed_clips(encoder, scaled)
        changed += [select_nearest(e, index)[1] != p for e, p in zip(e2, near)]
    report["level_change_rate"] = float(np.mean(changed))
    proj = project_2d(emb)
    with open(root / "eval" / "embedding_pca.csv", "w") as f:
        f.write("tone_id,content_id,pc1,pc2\n")
        for c, (u, v) in zip(clips, proj):
            f.write(f"{c.tone_id},{c.content_id},{u:.6f},{v:.6f}\n")
    return report


def evaluate(cfg: RunConfig, root: Path, force: bool = False) -> Dict[str, Path]:
    """Table 1 analog, Table 2 analog, embedding metrics and spectrogram exports."""
    corpus, _ = _corpus(root)
    encoder, _ = _encoder(root)
    out = root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    cache = _seen_cache(encoder, corpus, ("test",))
    cache.preload(corpus.wet_clips("test", corpus.unseen_ids))
    table = _table1(cfg, root, corpus, cache)
    table.save(out / "table1")
    build_index_stage(cfg, root, force=False, cache=cache)
    zero_shot_stage(cfg, root, force=False, cache=cache)
    report = _embedding_report(cfg, root, corpus, encoder, cache)
    (out / "embedding_metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))

    variant = cfg.experiment.zero_shot_variant
    model, info = _load_variant(root, variant)
    test = corpus.pairs("test", corpus.seen_ids)
    cond = _eval_conditioner(variant, info["tone_ids"], ReferencePool([p.y for p in test]), cache)
    rng = np.random.default_rng(cfg.seed)
    for amp in cfg.experiment.spectrogram_amps:
        group = [p for p in test if p.tone_id == amp]
        if not group:
            continue
        p = group[0]
        c = cond.collate([cond(p, rng)])
        y_hat = generate(model, p.x.samples, c).numpy()
        export_spectrograms(p.x.samples, p.y.samples, y_hat, out / "spectrograms" / amp)
    return {"table1": out / "table1.json", "table2": out / "table2.json",
            "embedding_metrics": out / "embedding_metrics.json"}


# -- user-facing inference ------------------------------------------------------

def infer(cfg: RunConfig, root: Path, input_wav, output_wav, variant: Optional[str] = None,
          amp: Optional[str] = None, reference_wav=None, strategy: str = "direct") -> Path:
    """Process a clean WAV with a trained model, conditioned on an amp id or a reference WAV."""
    variant = variant or cfg.experiment.zero_shot_variant
    if (amp is None) == (reference_wav is None):
        raise ConfigError("give exactly one of --amp or --reference")
    x, sr = read_wav(input_wav)
    x = peak_normalize(resample(x, sr, GENERATOR_SR), cfg.data.target_dbfs)
    model, info = _load_variant(root, variant, amp if variant == ONE_TO_ONE else None)
    tone_ids = info["tone_ids"]
    gcfg = model.cfg
    cond = None
    if gcfg.conditioning_mode == "none":
        pass
    elif gcfg.condition_source == "lut":
        if reference_wav is not None:
            raise ConfigError("LUT models are conditioned by --amp, not a reference")
        if amp not in tone_ids:
            raise ConfigError(f"{amp!r} has no LUT row; LUT models only know {tone_ids}")
        cond = torch.tensor([tone_ids.index(amp)])
    else:
        encoder, _ = _encoder(root)
        if amp is not None:
            index = _index(root)
            if amp not in index.mean_ids:
                raise ConfigError(f"{amp!r} is not in the retrieval index; pass a --reference WAV instead")
            phi = index.means[index.mean_ids.index(amp)]
        else:
            z, zsr = read_wav(reference_wav)
            ref = AudioClip(peak_normalize(z, cfg.data.target_dbfs), zsr, "reference", "unknown", "ref")
            index = _index(root) if strategy != "direct" else None
            phi = select(strategy, ref, encoder, index).vector
        cond = torch.from_numpy(np.asarray(phi, dtype=np.float32))[None]
    y = generate(model, x, cond).numpy()
    write_wav(output_wav, y, GENERATOR_SR)
    return Path(output_wav)


def export_embeddings(cfg: RunConfig, root: Path, parts=("train", "val", "test")) -> Path:
    corpus, _ = _corpus(root)
    encoder, _ = _encoder(root)
    clips = [c for part in parts for c in corpus.wet_clips(part)]
    emb = embed_clips(encoder, clips)
    stem = root / "embeddings" / "wet"
    write_embeddings(stem, emb, [c.tone_id for c in clips], [c.content_id for c in clips])
    return stem.with_suffix(".f32")


def query_index(cfg: RunConfig, root: Path, reference_wav) -> dict:
    encoder, _ = _encoder(root)
    index = _index(root)
    z, sr = read_wav(reference_wav)
    ref = AudioClip(peak_normalize(z, cfg.data.target_dbfs), sr, "reference", "unknown", "ref")
    phi = select("direct", ref, encoder)
    _, near_tone, near_sim = select_nearest(phi, index)
    _, mean_tone, mean_sim = select_mean(phi, index)
    return {"nearest": {"tone_id": near_tone, "similarity": near_sim},
            "mean": {"tone_id": mean_tone, "similarity": mean_sim}, "index_size": len(index)}


def demo(cfg: RunConfig, root: Path, force: bool = False) -> dict:
    """render -> encoder -> all generator variants -> evaluation tables."""
    render_dataset(cfg, root, force)
    train_encoder_stage(cfg, root, force)
    train_generators(cfg, root, force=force)
    paths = evaluate(cfg, root, force)
    t1 = ResultTable.load(paths["table1"])
    t2 = ResultTable.load(paths["table2"])
    metrics = json.loads(paths["embedding_metrics"].read_text())
    summary = {"table1_column_means": {c: t1.column_mean(c) for c in t1.columns},
               "table2": t2.cells, "table2_ratios": t2.ratios, "embedding": metrics}
    (root / "eval" / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
