"""Condition selection for unseen tones: direct, nearest-embedding and mean-embedding."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import AudioClip
from .tone_encoder import ToneEmbedding, ToneEncoder, embed_audio, embed_clips

log = logging.getLogger(__name__)

STRATEGIES = ("direct", "nearest", "mean")
INDEX_MAGIC = b"MAIDX"
INDEX_VERSION = 1


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tone_means(embeddings: np.ndarray, tone_ids: Sequence[str]) -> Tuple[List[str], np.ndarray]:
    """Per-tone arithmetic mean of the entries, re-normalised to unit length."""
    tone_ids = np.asarray(tone_ids)
    ids = sorted(set(tone_ids.tolist()))
    means = np.stack([embeddings[tone_ids == t].astype(np.float64).mean(0) for t in ids])
    return ids, _unit(means).astype(np.float32)


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray  # (|Phi|, dim) float32, unit rows
    tone_ids: List[str]
    content_ids: List[str]
    mean_ids: List[str]
    means: np.ndarray  # (N, dim)

    def __post_init__(self):
        if len(self.embeddings) != len(self.tone_ids) or len(self.tone_ids) != len(self.content_ids):
            raise ValueError("index entries and labels have different lengths")

    def __len__(self):
        return len(self.tone_ids)

    @classmethod
    def from_entries(cls, embeddings, tone_ids, content_ids) -> "RetrievalIndex":
        emb = np.asarray(embeddings, dtype=np.float32)
        ids, means = tone_means(emb, tone_ids) if len(emb) else ([], np.zeros((0, emb.shape[-1]), np.float32))
        return cls(emb, list(tone_ids), list(content_ids), ids, means)

    def save(self, directory) -> Path:
        """``index.bin`` (header + float32 rows) and ``manifest.csv`` (ordinal, tone, content)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        n, dim = self.embeddings.shape
        with open(d / "index.bin", "wb") as f:
            f.write(INDEX_MAGIC + struct.pack("<IIII", INDEX_VERSION, n, len(self.mean_ids), dim))
            f.write(np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.means, dtype="<f4").tobytes())
        with open(d / "manifest.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "ordinal", "tone_id", "content_id"])
            for i, (t, c) in enumerate(zip(self.tone_ids, self.content_ids)):
                w.writerow(["entry", i, t, c])
            for i, t in enumerate(self.mean_ids):
                w.writerow(["mean", i, t, ""])
        return d

    @classmethod
    def load(cls, directory) -> "RetrievalIndex":
        d = Path(directory)
        if not (d / "index.bin").exists():
            raise FileNotFoundError(f"retrieval index {d} not found (run `multiamp zero-shot` to build it)")
        raw = (d / "index.bin").read_bytes()
        if raw[:5] != INDEX_MAGIC:
            raise ValueError(f"{d / 'index.bin'} is not a retrieval index")
        version, n, n_means, dim = struct.unpack("<IIII", raw[5:21])
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        body = np.frombuffer(raw[21:], dtype="<f4")
        if body.size != (n + n_means) * dim:
            raise ValueError(f"{d / 'index.bin'} is truncated")
        emb = body[: n * dim].reshape(n, dim).astype(np.float32)
        means = body[n * dim:].reshape(n_means, dim).astype(np.float32)
        tones, contents, mean_ids = [], [], []
        with open(d / "manifest.csv", newline="") as f:
            for row in csv.DictReader(f):
                if row["kind"] == "entry":
                    tones.append(row["tone_id"])
                    contents.append(row["content_id"])
                else:
                    mean_ids.append(row["tone_id"])
        return cls(emb, tones, contents, mean_ids, means)


def build_index(clips: Sequence[AudioClip], encoder: Optional[ToneEncoder] = None,
                per_tone_count: int = 400, seed: int = 0, embed=None) -> RetrievalIndex:
    """Sample ``per_tone_count`` wet clips per tone and embed them.

    ``embed`` may be given as a callable (clip -> vector) to reuse cached
    embeddings; otherwise ``encoder`` is run on the clips.
    """
    if per_tone_count < 1:
        raise ValueError("per_tone_count must be >= 1")
    rng = np.random.default_rng(seed)
    by_tone: Dict[str, List[AudioClip]] = {}
    for c in clips:
        by_tone.setdefault(c.tone_id, []).append(c)
    chosen: List[AudioClip] = []
    for tone in sorted(by_tone):
        group = sorted(by_tone[tone], key=lambda c: c.content_id)
        replace = len(group) < per_tone_count
        if replace:
            log.warning("tone %s has %d clips, fewer than %d; sampling with replacement",
                        tone, len(group), per_tone_count)
        picks = rng.choice(len(group), size=per_tone_count, replace=replace)
        chosen.extend(group[i] for i in picks)
    if not chosen:
        raise ValueError("no clips to index")
    if embed is not None:
        vecs = np.stack([embed(c) for c in chosen])
    else:
        if encoder is None:
            raise ValueError("build_index needs an encoder or an embed function")
        unique = {(c.tone_id, c.content_id): c for c in chosen}
        keys = list(unique)
        table = dict(zip(keys, embed_clips(encoder, [unique[k] for k in keys])))
        vecs = np.stack([table[(c.tone_id, c.content_id)] for c in chosen])
    return RetrievalIndex.from_entries(vecs, [c.tone_id for c in chosen], [c.content_id for c in chosen])


def select_direct(reference: AudioClip, encoder: ToneEncoder) -> ToneEmbedding:
    """phi* = E(z*), after resampling z* to the encoder's rate."""
    return ToneEmbedding(embed_audio(encoder, reference.samples, reference.sample_rate), None)


def _argmax(query, candidates: np.ndarray) -> Tuple[int, float]:
    if len(candidates) == 0:
        raise ValueError("retrieval index is empty")
    q = np.asarray(query, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ValueError("query embedding is a zero vector")
    c = candidates.astype(np.float64)
    sims = (c @ q) / (np.linalg.norm(c, axis=1) * nq)
    i = int(np.argmax(sims))  # first maximum: lowest ordinal wins ties
    return i, float(np.clip(sims[i], -1.0, 1.0))


def _vector(query) -> np.ndarray:
    return query.vector if isinstance(query, ToneEmbedding) else np.asarray(query)


def select_nearest(query, index: RetrievalIndex) -> Tuple[ToneEmbedding, str, float]:
    """Index entry with the highest cosine similarity to the query embedding."""
    i, sim = _argmax(_vector(query), index.embeddings)
    return ToneEmbedding(index.embeddings[i].copy(), index.tone_ids[i]), index.tone_ids[i], sim


def select_mean(query, index: RetrievalIndex) -> Tuple[ToneEmbedding, str, float]:
    """Per-tone mean embedding with the highest cosine similarity to the query."""
    i, sim = _argmax(_vector(query), index.means)
    return ToneEmbedding(index.means[i].copy(), index.mean_ids[i]), index.mean_ids[i], sim


def select(strategy: str, reference: AudioClip, encoder: ToneEncoder,
           index: Optional[RetrievalIndex] = None, query=None) -> ToneEmbedding:
    """Dispatch on strategy; ``query`` may carry a precomputed E(z*)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    phi = ToneEmbedding(np.asarray(query), None) if query is not None else select_direct(reference, encoder)
    if strategy == "direct":
        return phi
    if index is None:
        raise ValueError(f"strategy {strategy!r} needs a retrieval index")
    return (select_nearest if strategy == "nearest" else select_mean)(phi, index)[0]
