"""Loss tables, zero-shot table, embedding cluster metrics and spectrogram exports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset import Pair
from .spectral import StftConfig, stft
from .training import clip_losses, summarize
from .zero_shot import STRATEGIES, RetrievalIndex, select_mean, select_nearest

ONE_TO_ONE = "one-to-one"
VARIANTS = {
    # column name: (conditioning_mode, condition_source, reference_mode)
    "FiLM+LUT": ("film", "lut", "paired"),
    "FiLM+ToneEmb-paired": ("film", "tone_embedding", "paired"),
    "FiLM+ToneEmb-unpaired": ("film", "tone_embedding", "unpaired"),
    "Concat+LUT": ("concat", "lut", "paired"),
    "Concat+ToneEmb-paired": ("concat", "tone_embedding", "paired"),
}
TABLE1_COLUMNS = [ONE_TO_ONE] + list(VARIANTS)


def variant_dirname(name: str) -> str:
    return name.lower().replace("+", "_").replace("-", "_")


@dataclass
class ResultTable:
    title: str
    rows: List[Tuple[str, str]]  # (amp_id, gain_class)
    columns: List[str]
    cells: Dict[str, Dict[str, float]]  # amp_id -> column -> loss
    metadata: dict = field(default_factory=dict)
    ratios: Dict[str, Dict[str, float]] = field(default_factory=dict)
    # columns that compete for the per-row "best" mark
    ranked_columns: Optional[List[str]] = None

    def cell(self, amp_id: str, column: str) -> float:
        return self.cells[amp_id][column]

    def column_mean(self, column: str, gain_class: Optional[str] = None) -> float:
        vals = [self.cells[a][column] for a, g in self.rows if gain_class is None or g == gain_class]
        return float(np.mean(vals))

    def best_per_row(self) -> Dict[str, str]:
        cols = self.ranked_columns if self.ranked_columns is not None else self.columns
        return {a: min(cols, key=lambda c: self.cells[a][c]) for a, _ in self.rows if cols}

    def to_dict(self) -> dict:
        return {"title": self.title, "rows": [list(r) for r in self.rows], "columns": self.columns,
                "cells": self.cells, "ratios": self.ratios, "metadata": self.metadata,
                "ranked_columns": self.ranked_columns, "best": self.best_per_row()}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultTable":
        return cls(d["title"], [tuple(r) for r in d["rows"]], list(d["columns"]), d["cells"],
                   d.get("metadata", {}), d.get("ratios", {}), d.get("ranked_columns"))

    def to_text(self) -> str:
        best = self.best_per_row()
        labels = list(self.columns) + ([f"ratio({c})" for c in self.columns] if self.ratios else [])
        width = max(12, *(len(c) + 2 for c in labels))
        head = f"{'amp':<8}{'class':<11}" + "".join(f"{c:>{width}}" for c in self.columns)
        if self.ratios:
            head += "".join(f"{'ratio(' + c + ')':>{width}}" for c in self.columns)
        lines = [self.title, head, "-" * len(head)]
        for amp, gain in self.rows:
            cells = ""
            for c in self.columns:
                mark = "*" if best.get(amp) == c else " "
                cells += f"{self.cells[amp][c]:>{width - 1}.5f}{mark}"
            if self.ratios:
                cells += "".join(f"{self.ratios[amp][c]:>{width}.3f}" for c in self.columns)
            lines.append(f"{amp:<8}{gain:<11}{cells}")
        lines.append("-" * len(head))
        lines.append(f"{'mean':<19}" + "".join(f"{self.column_mean(c):>{width - 1}.5f} " for c in self.columns))
        ranked = self.ranked_columns if self.ranked_columns is not None else self.columns
        lines.append(f"* lowest loss among {', '.join(ranked)} in each row; "
                     "cells are mean complex STFT loss over the test clips")
        return "\n".join(lines) + "\n"

    def save(self, stem) -> Tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        j, t = stem.with_suffix(".json"), stem.with_suffix(".txt")
        j.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        t.write_text(self.to_text())
        return j, t

    @classmethod
    def load(cls, path) -> "ResultTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def eval_table(variants: Mapping[str, object], test_pairs: Sequence[Pair],
               rows: Sequence[Tuple[str, str]], seed: int = 0, batch_size: int = 4,
               metadata: Optional[dict] = None, title: str = "Per-amp test loss") -> ResultTable:
    """Evaluate every variant on the identical test pairs.

    ``variants`` maps a column name to ``(model, conditioner)`` for a shared
    multi-amp model, or to ``{amp_id: (model, conditioner)}`` for per-amp
    models. Cells are mean per-clip complex STFT loss.
    """
    by_amp: Dict[str, List[Pair]] = {}
    for p in test_pairs:
        by_amp.setdefault(p.tone_id, []).append(p)
    cells: Dict[str, Dict[str, float]] = {a: {} for a, _ in rows}
    for name, spec in variants.items():
        for amp, _ in rows:
            if amp not in by_amp:
                raise ValueError(f"no test pairs for {amp}")
            if isinstance(spec, Mapping):
                if amp not in spec:
                    raise KeyError(f"variant {name!r} has no model for {amp}")
                model, cond = spec[amp]
            else:
                model, cond = spec
            res = summarize(clip_losses(model, by_amp[amp], cond, seed=seed, batch_size=batch_size))
            cells[amp][name] = res["per_amp"][amp]
    meta = {"aggregation": "mean over test clips", "seed": seed,
            "test_clips_per_amp": {a: len(by_amp[a]) for a, _ in rows}}
    meta.update(metadata or {})
    ranked = [c for c in variants if c != ONE_TO_ONE]
    return ResultTable(title, list(rows), list(variants), cells, meta, ranked_columns=ranked)


class MappedConditioner:
    """Conditioner returning a precomputed embedding per (tone, content)."""

    def __init__(self, table: Dict[Tuple[str, str], np.ndarray]):
        self.table = table

    def __call__(self, pair, rng):
        return self.table[(pair.tone_id, pair.content_id)]

    def collate(self, conds):
        return torch.from_numpy(np.stack(conds).astype(np.float32))


def zero_shot_references(pairs: Sequence[Pair]) -> Dict[Tuple[str, str], object]:
    """Reference z* for each unseen-amp pair: the wet render of the next test
    clip of the same amp, so z* never shares content with the target."""
    by_amp: Dict[str, List[Pair]] = {}
    for p in pairs:
        by_amp.setdefault(p.tone_id, []).append(p)
    refs = {}
    for amp, group in by_amp.items():
        group = sorted(group, key=lambda p: p.content_id)
        if len(group) < 2:
            raise ValueError(f"zero-shot evaluation of {amp} needs at least 2 test clips")
        for i, p in enumerate(group):
            refs[(amp, p.content_id)] = group[(i + 1) % len(group)].y.as_role("reference")
    return refs


def zero_shot_table(model, unseen_pairs: Sequence[Pair], rows: Sequence[Tuple[str, str]],
                    embed, index: Optional[RetrievalIndex] = None,
                    strategies: Sequence[str] = STRATEGIES,
                    seen_reference: Optional[Dict[str, float]] = None,
                    seed: int = 0, batch_size: int = 4, metadata: Optional[dict] = None) -> ResultTable:
    """Loss of a tone-embedding model on unseen amps under each selection strategy.

    ``embed`` maps a reference clip to E(z*). ``seen_reference`` maps gain
    class -> mean seen-amp loss of the same model, used for the ratio column.
    The direct strategy never reads ``index``.
    """
    refs = zero_shot_references(unseen_pairs)
    queries = {k: np.asarray(embed(z)) for k, z in refs.items()}
    cells: Dict[str, Dict[str, float]] = {a: {} for a, _ in rows}
    selected: Dict[str, Dict[str, List[str]]] = {}
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if strategy == "direct":
            table = dict(queries)
        else:
            if index is None:
                raise ValueError(f"strategy {strategy!r} needs a retrieval index")
            pick = select_nearest if strategy == "nearest" else select_mean
            table = {}
            for k, q in queries.items():
                phi, tone, _ = pick(q, index)
                table[k] = phi.vector
                selected.setdefault(strategy, {}).setdefault(k[0], []).append(tone)
        cond = MappedConditioner(table)
        for amp, _ in rows:
            group = [p for p in unseen_pairs if p.tone_id == amp]
            res = summarize(clip_losses(model, group, cond, seed=seed, batch_size=batch_size))
            cells[amp][strategy] = res["per_amp"][amp]
    ratios = {}
    if seen_reference:
        for amp, gain in rows:
            ratios[amp] = {s: cells[amp][s] / seen_reference[gain] for s in strategies}
    meta = {"aggregation": "mean over test clips", "seed": seed,
            "reference": "wet render of the next test clip of the same amp",
            "ratio": "unseen loss / mean seen loss of the same gain class (same model)",
            "seen_reference": seen_reference or {}, "retrieved_tones": selected}
    meta.update(metadata or {})
    return ResultTable("Zero-shot test loss on unseen amps", list(rows), list(strategies), cells,
                       meta, ratios, ranked_columns=list(strategies))


# -- embeddings ----------------------------------------------------------------

def embedding_metrics(embeddings, labels: Sequence[str]) -> dict:
    """Silhouette (cosine distance), nearest-centroid purity and intra/inter cosine gap.

    All metrics are computed in the full embedding space.
    """
    from sklearn.metrics import silhouette_score

    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    tones = sorted(set(labels.tolist()))
    if len(tones) < 2:
        raise ValueError("embedding metrics need at least 2 tones")
    counts = {t: int((labels == t).sum()) for t in tones}
    if min(counts.values()) < 2:
        raise ValueError("embedding metrics need at least 2 clips per tone")
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    gap = float(sims[same & off].mean() - sims[~same].mean())
    centroids = np.stack([unit[labels == t].mean(0) for t in tones])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    pred = np.asarray(tones)[np.argmax(unit @ centroids.T, axis=1)]
    purity = float((pred == labels).mean())
    dist = np.clip(1.0 - sims, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    sil = float(silhouette_score(dist, labels, metric="precomputed"))
    if not math.isfinite(sil):
        sil = 0.0
    return {"silhouette": sil, "purity": purity, "gap": gap, "num_tones": len(tones),
            "num_clips": int(len(labels))}


def project_2d(embeddings) -> np.ndarray:
    """PCA to two dimensions, for inspection only."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


def write_embeddings(path_stem, embeddings, tone_ids: Sequence[str], content_ids: Sequence[str]) -> Tuple[Path, Path]:
    """Flat little-endian float32 matrix plus a CSV manifest (row, content_id, tone_id, dim)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    b, m = stem.with_suffix(".f32"), stem.with_suffix(".csv")
    b.write_bytes(emb.tobytes())
    with open(m, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "content_id", "tone_id", "dim"])
        for i, (c, t) in enumerate(zip(content_ids, tone_ids)):
            w.writerow([i, c, t, emb.shape[1]])
    return b, m


def read_embeddings(path_stem) -> Tuple[np.ndarray, List[str], List[str]]:
    stem = Path(path_stem)
    with open(stem.with_suffix(".csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    dim = int(rows[0]["dim"]) if rows else 0
    emb = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4").reshape(len(rows), dim)
    return emb.astype(np.float32), [r["tone_id"] for r in rows], [r["content_id"] for r in rows]


# -- spectrograms --------------------------------------------------------------

BANDS_HZ = (0, 250, 500, 1000, 2000, 4000, 8000, 16000, 22050)


def band_error(target_mag: np.ndarray, generated_mag: np.ndarray, sr: int = 44100,
               bands: Sequence[float] = BANDS_HZ) -> List[dict]:
    """Mean absolute magnitude error per frequency band."""
    freqs = np.linspace(0.0, sr / 2.0, target_mag.shape[0])
    err = np.abs(generated_mag - target_mag)
    out = []
    for lo, hi in zip(bands[:-1], bands[1:]):
        sel = (freqs >= lo) & (freqs < hi) if hi < bands[-1] else (freqs >= lo) & (freqs <= hi)
        out.append({"low_hz": lo, "high_hz": hi, "mean_abs_error": float(err[sel].mean()) if sel.any() else 0.0})
    return out


def export_spectrograms(clean, target, generated, path, sr: int = 44100,
                        cfg: StftConfig = StftConfig(), image: bool = True) -> Dict[str, Path]:
    """Write magnitude grids (bins x frames) for clean/target/generated, the
    |generated - target| error grid, a per-band error table and a figure."""
    clean, target, generated = (np.asarray(a, dtype=np.float32) for a in (clean, target, generated))
    if not (len(clean) == len(target) == len(generated)):
        raise ValueError("spectrogram export needs signals of equal length")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    mags = {k: stft(v, cfg).abs().numpy().astype(np.float32)
            for k, v in (("clean", clean), ("target", target), ("generated", generated))}
    mags["error"] = np.abs(mags["generated"] - mags["target"])
    files = {}
    for k, m in mags.items():
        files[k] = out / f"{k}.npy"
        np.save(files[k], m)
    bands = band_error(mags["target"], mags["generated"], sr)
    files["bands"] = out / "band_error.csv"
    with open(files["bands"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["low_hz", "high_hz", "mean_abs_error"])
        w.writeheader()
        w.writerows(bands)
    if image:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(4, 1, figsize=(8, 10), sharex=True)
        extent = [0, len(clean) / sr, 0, sr / 2000.0]
        for ax, k in zip(axes, ("clean", "target", "generated", "error")):
            ax.imshow(20 * np.log10(mags[k] + 1e-6), origin="lower", aspect="auto", extent=extent,
                      cmap="magma" if k != "error" else "viridis")
            ax.set_title(k)
            ax.set_ylabel("kHz")
        axes[-1].set_xlabel("s")
        fig.tight_layout()
        files["figure"] = out / "spectrograms.png"
        fig.savefig(files["figure"], dpi=80)
        plt.close(fig)
    return files
