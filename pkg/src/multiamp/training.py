"""Generator training loops (one-to-many and one-to-one) and validation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import (load_checkpoint, restore_rng, rng_state, save_checkpoint,
                         weights_hash)
from .dataset import AudioClip, Pair, ReferencePool, sample_reference
from .generator import ConditionalGCN, GCNConfig, count_parameters
from .spectral import StftConfig, complex_stft_loss
from .tone_encoder import ToneEncoder, embed_clips

log = logging.getLogger(__name__)

CONDITION_SOURCES = ("tone_embedding", "lut")
REFERENCE_MODES = ("paired", "unpaired")
CONDITIONING_MODES = ("film", "concat", "none")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 12
    max_steps: int = 2000
    seed: int = 0
    condition_source: str = "tone_embedding"
    reference_mode: str = "unpaired"
    conditioning_mode: str = "film"
    device: str = "cpu"
    # output samples per training example; the model also sees rf - 1 samples of history
    crop_samples: Optional[int] = 8192
    val_every: int = 100
    patience: int = 5
    val_seconds: Optional[float] = None
    val_batch: int = 4
    checkpoint_every: Optional[int] = None  # defaults to val_every
    audit: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.condition_source not in CONDITION_SOURCES:
            raise ValueError(f"condition_source must be one of {CONDITION_SOURCES}")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"reference_mode must be one of {REFERENCE_MODES}")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"conditioning_mode must be one of {CONDITIONING_MODES}")
        if self.crop_samples is not None and self.crop_samples < 2048:
            raise ValueError("crop_samples must cover at least one STFT window (2048)")
        if self.val_every < 1 or self.patience < 1:
            raise ValueError("val_every and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def diff(self, other: "TrainConfig") -> dict:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


# -- conditioning --------------------------------------------------------------

class EmbeddingCache:
    """Tone embeddings of wet clips under a frozen encoder, keyed by (tone, content)."""

    def __init__(self, encoder: Optional[ToneEncoder] = None):
        self.encoder = encoder
        self.table: Dict[tuple, np.ndarray] = {}

    def get(self, clip: AudioClip) -> np.ndarray:
        key = (clip.tone_id, clip.content_id)
        if key not in self.table:
            if self.encoder is None:
                raise KeyError(f"no embedding cached for {key} and no encoder to compute it")
            self.table[key] = embed_clips(self.encoder, [clip])[0]
        return self.table[key]

    def preload(self, clips: Sequence[AudioClip], batch_size: int = 16) -> None:
        todo = [c for c in clips if (c.tone_id, c.content_id) not in self.table]
        if todo:
            for c, v in zip(todo, embed_clips(self.encoder, todo, batch_size)):
                self.table[(c.tone_id, c.content_id)] = v


class Conditioner:
    """Maps a target pair to the generator's raw condition (LUT index, embedding or None)."""

    def __init__(self, source: str, mode: str, tone_ids: Sequence[str],
                 pool: Optional[ReferencePool] = None, cache: Optional[EmbeddingCache] = None,
                 reference_mode: str = "paired", audit: bool = False):
        self.source, self.mode = source, mode
        self.tone_ids = list(tone_ids)
        self.pool, self.cache = pool, cache
        self.reference_mode = reference_mode
        self.audit = audit
        self.audited = 0
        if mode != "none" and source == "tone_embedding" and (pool is None or cache is None):
            raise ValueError("tone-embedding conditioning needs a reference pool and embedding cache")

    def __call__(self, pair: Pair, rng: np.random.Generator):
        if self.mode == "none":
            return None
        if self.source == "lut":
            if pair.tone_id not in self.tone_ids:
                raise ValueError(f"tone {pair.tone_id!r} has no LUT row (seen: {self.tone_ids})")
            return self.tone_ids.index(pair.tone_id)
        z = sample_reference(pair, self.reference_mode, rng, self.pool)
        if self.audit and self.reference_mode == "unpaired":
            if z.content_id == pair.content_id:
                raise AssertionError(
                    f"unpaired reference reuses target content {pair.content_id} ({pair.tone_id})")
            self.audited += 1
        return self.cache.get(z)

    def collate(self, conds: list):
        if self.mode == "none":
            return None
        if self.source == "lut":
            return torch.tensor(conds, dtype=torch.long)
        return torch.from_numpy(np.stack(conds).astype(np.float32))


# -- validation ----------------------------------------------------------------

def _predict(model, x: torch.Tensor, cond) -> torch.Tensor:
    if isinstance(model, torch.nn.Module):
        model.eval()
    with torch.no_grad():
        return model(x, cond)


def clip_losses(model, pairs: Sequence[Pair], conditioner: Conditioner, seed: int = 0,
                seconds: Optional[float] = None, batch_size: int = 4,
                stft_cfg: StftConfig = StftConfig()) -> List[dict]:
    """Per-clip complex STFT loss of ``model`` on each pair (deterministic given seed)."""
    rng = np.random.default_rng(seed)
    conds = [conditioner(p, rng) for p in pairs]
    rows = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i: i + batch_size]
        n = len(chunk[0].x) if seconds is None else int(seconds * chunk[0].x.sample_rate)
        x = torch.from_numpy(np.stack([p.x.samples[:n] for p in chunk]))
        y = torch.from_numpy(np.stack([p.y.samples[:n] for p in chunk]))
        y_hat = _predict(model, x, conditioner.collate(conds[i: i + batch_size]))
        for p, a, b in zip(chunk, y_hat, y):
            rows.append({"tone_id": p.tone_id, "content_id": p.content_id,
                         "loss": float(complex_stft_loss(a, b, stft_cfg))})
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    per, counts = {}, {}
    for r in rows:
        per.setdefault(r["tone_id"], []).append(r["loss"])
    for k in per:
        counts[k] = len(per[k])
        per[k] = float(np.mean(per[k]))
    total = sum(counts.values())
    mean = sum(per[k] * counts[k] for k in per) / total
    return {"per_amp": dict(sorted(per.items())), "counts": dict(sorted(counts.items())), "mean": mean}


def validate(model, pairs: Sequence[Pair], conditioner: Conditioner, seed: int = 0,
             seconds: Optional[float] = None, batch_size: int = 4) -> dict:
    """Per-amp mean loss plus the clip-weighted overall mean."""
    if not pairs:
        raise ValueError("validation split is empty")
    return summarize(clip_losses(model, pairs, conditioner, seed, seconds, batch_size))


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ConditionalGCN
    history: List[dict]
    best_val: Optional[float] = None
    best_step: Optional[int] = None
    initial_val: Optional[float] = None
    stopped_early: bool = False
    tone_ids: List[str] = field(default_factory=list)


def _make_batch(pairs, idx, rf, crop, rng):
    xs, ys, starts = [], [], []
    for i in idx:
        p = pairs[i]
        T = len(p.x)
        c = T if crop is None or crop > T else crop
        s = int(rng.integers(T - c + 1))
        # zero history before the clip start matches the padded full-clip forward
        xpad = np.concatenate([np.zeros(rf - 1, dtype=np.float32), p.x.samples])
        xs.append(xpad[s: s + c + rf - 1])
        ys.append(p.y.samples[s: s + c])
        starts.append(s)
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)), starts


def _write_metrics(out: Path, history: List[dict]) -> None:
    with open(out / "metrics.jsonl", "w") as f:
        for row in history:
            f.write(json.dumps(row) + "\n")


def _model_card(out: Path, model, gcn_cfg, cfg, tone_ids, manifest_hash, encoder_hash, result):
    lines = [
        f"variant: {cfg.conditioning_mode} / {cfg.condition_source}"
        + (f" / {cfg.reference_mode}" if cfg.condition_source == "tone_embedding" else ""),
        f"parameters: {count_parameters(model)}",
        f"receptive field: {model.receptive_field} samples",
        f"tones: {', '.join(tone_ids)}",
        f"generator config: {json.dumps(gcn_cfg.to_dict(), sort_keys=True)}",
        f"train config: {json.dumps(cfg.to_dict(), sort_keys=True)}",
        f"train config hash: {cfg.hash()}",
        f"data manifest hash: {manifest_hash}",
        f"encoder weights hash: {encoder_hash}",
        f"best val loss: {result.best_val} at step {result.best_step}",
    ]
    (out / "model_card.txt").write_text("\n".join(lines) + "\n")


def train_generator(pairs: Sequence[Pair], cfg: TrainConfig, gcn_cfg: Optional[GCNConfig] = None,
                    encoder: Optional[ToneEncoder] = None, val_pairs: Optional[Sequence[Pair]] = None,
                    out_dir=None, resume: bool = True, cache: Optional[EmbeddingCache] = None,
                    tone_ids: Optional[Sequence[str]] = None, manifest_hash: str = "",
                    on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``G`` on (x, y) pairs with the condition source given by ``cfg``.

    The encoder is only ever run in inference mode; its weight hash is checked
    before and after training. Validation runs every ``cfg.val_every`` steps
    and the best weights are kept (early stopping after ``cfg.patience``
    validations without improvement).
    """
    if not pairs:
        raise ValueError("no training pairs")
    tone_ids = sorted({p.tone_id for p in pairs}) if tone_ids is None else list(tone_ids)
    if gcn_cfg is None:
        gcn_cfg = GCNConfig(conditioning_mode=cfg.conditioning_mode,
                            condition_source=cfg.condition_source, num_luts=max(len(tone_ids), 1))
    if (gcn_cfg.conditioning_mode != cfg.conditioning_mode
            or (cfg.conditioning_mode != "none" and gcn_cfg.condition_source != cfg.condition_source)):
        raise ValueError("generator config and train config disagree on the conditioning variant")
    if gcn_cfg.condition_source == "lut" and cfg.conditioning_mode != "none" and gcn_cfg.num_luts != len(tone_ids):
        raise ValueError(f"LUT has {gcn_cfg.num_luts} rows but {len(tone_ids)} tones are trained")

    uses_encoder = cfg.conditioning_mode != "none" and cfg.condition_source == "tone_embedding"
    encoder_hash = None
    if uses_encoder:
        if encoder is None and (cache is None or cache.encoder is None):
            raise ValueError("tone-embedding training needs a trained encoder")
        encoder = encoder or cache.encoder
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
        encoder_hash = weights_hash(encoder)
        cache = cache if cache is not None else EmbeddingCache(encoder)
        if cache.encoder is None:
            cache.encoder = encoder

    def conditioner(split_pairs, audit=False):
        pool = ReferencePool([p.y for p in split_pairs]) if uses_encoder else None
        return Conditioner(cfg.condition_source, cfg.conditioning_mode, tone_ids, pool, cache,
                           cfg.reference_mode, audit)

    train_cond = conditioner(pairs, cfg.audit)
    val_cond = conditioner(val_pairs) if val_pairs else None

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    device = torch.device(cfg.device)
    model = ConditionalGCN(gcn_cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rf = model.receptive_field
    ckpt_every = cfg.checkpoint_every or cfg.val_every

    out = Path(out_dir) if out_dir is not None else None
    full_config = {"generator": gcn_cfg.to_dict(), "train": cfg.to_dict(), "train_hash": cfg.hash(),
                   "tone_ids": tone_ids, "encoder_hash": encoder_hash, "manifest_hash": manifest_hash}
    result = TrainResult(model, [], tone_ids=tone_ids)
    start, bad, best_state = 0, 0, None
    last = out / "checkpoints" / "last.pt" if out is not None else None

    def run_val():
        return validate(model, val_pairs, val_cond, seed=cfg.seed + 1, seconds=cfg.val_seconds,
                        batch_size=cfg.val_batch)

    if resume and last is not None and last.exists():
        payload = load_checkpoint(last, model, kind="generator_training")
        if payload["config"]["train_hash"] != cfg.hash():
            raise ValueError(f"{last} was written with a different train config; refusing to resume")
        opt.load_state_dict(payload["optimizer"])
        restore_rng(payload["rng"], rng)
        ex = payload["extra"]
        start, bad = ex["step"], ex["bad"]
        result.history, result.best_val, result.best_step = list(ex["history"]), ex["best_val"], ex["best_step"]
        result.initial_val = ex["initial_val"]
        best = out / "checkpoints" / "best.pt"
        if best.exists():
            best_state = torch.load(best, map_location="cpu", weights_only=True)["state_dict"]
        log.info("resuming generator training at step %d", start)
    elif val_pairs:
        v = run_val()
        result.initial_val = v["mean"]
        result.history.append({"step": 0, "val_loss": v["mean"], "val_per_amp": v["per_amp"]})

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(full_config, indent=1, sort_keys=True))

    def checkpoint(step):
        if out is None:
            return
        save_checkpoint(last, "generator_training", model, full_config, optimizer=opt, rng=rng_state(rng),
                        step=step, bad=bad, history=result.history, best_val=result.best_val,
                        best_step=result.best_step, initial_val=result.initial_val)
        _write_metrics(out, result.history)

    model.train()
    for step in range(start, cfg.max_steps):
        idx = rng.integers(len(pairs), size=cfg.batch_size)
        x, y, _ = _make_batch(pairs, idx, rf, cfg.crop_samples, rng)
        cond = train_cond.collate([train_cond(pairs[i], rng) for i in idx])
        x, y = x.to(device), y.to(device)
        if cond is not None:
            cond = cond.to(device)
        y_hat = model(x, cond, pad=False)
        loss = complex_stft_loss(y_hat, y)
        if not torch.isfinite(loss):
            snap = {"step": step + 1, "lr": cfg.lr, "x": x.cpu(), "y": y.cpu(),
                    "cond": None if cond is None else cond.cpu(),
                    "tone_ids": [pairs[i].tone_id for i in idx],
                    "content_ids": [pairs[i].content_id for i in idx]}
            where = ""
            if out is not None:
                torch.save(snap, out / "nan_snapshot.pt")
                where = f"; snapshot written to {out / 'nan_snapshot.pt'}"
            raise TrainingDivergedError(f"non-finite loss at step {step + 1} (lr={cfg.lr}){where}", snap)
        opt.zero_grad()
        loss.backward()
        opt.step()

        row = {"step": step + 1, "train_loss": loss.item()}
        if cfg.audit:
            row["audited"] = train_cond.audited
        stop = False
        if val_pairs and (step + 1) % cfg.val_every == 0:
            v = run_val()
            model.train()
            row["val_loss"], row["val_per_amp"] = v["mean"], v["per_amp"]
            if result.best_val is None or v["mean"] < result.best_val:
                result.best_val, result.best_step, bad = v["mean"], step + 1, 0
                best_state = copy.deepcopy(model.state_dict())
                if out is not None:
                    save_checkpoint(out / "checkpoints" / "best.pt", "generator", model, full_config)
            else:
                bad += 1
                stop = bad >= cfg.patience
        result.history.append(row)
        if on_step is not None:
            on_step(row)
        if (step + 1) % ckpt_every == 0 or stop:
            checkpoint(step + 1)
        if stop:
            result.stopped_early = True
            log.info("early stop at step %d (best %.5f at %d)", step + 1, result.best_val, result.best_step)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if uses_encoder and weights_hash(encoder) != encoder_hash:
        raise RuntimeError("encoder weights changed during generator training")
    if out is not None:
        checkpoint(result.history[-1]["step"] if result.history else 0)
        save_checkpoint(out / "generator.pt", "generator", model, full_config)
        _model_card(out, model, gcn_cfg, cfg, tone_ids, manifest_hash, encoder_hash, result)
    return result


def train_one_to_one(pairs: Sequence[Pair], cfg: TrainConfig, gcn_cfg: Optional[GCNConfig] = None,
                     val_pairs: Optional[Sequence[Pair]] = None, out_dir=None, resume: bool = True,
                     manifest_hash: str = "") -> TrainResult:
    """Unconditioned baseline for a single amp."""
    tones = {p.tone_id for p in pairs}
    if len(tones) != 1:
        raise ValueError(f"one-to-one training needs a single-tone corpus, got {sorted(tones)}")
    if val_pairs and {p.tone_id for p in val_pairs} != tones:
        raise ValueError("validation pairs must come from the same amp")
    cfg = TrainConfig(**{**cfg.to_dict(), "conditioning_mode": "none"})
    if gcn_cfg is None:
        gcn_cfg = GCNConfig(conditioning_mode="none")
    elif gcn_cfg.conditioning_mode != "none":
        gcn_cfg = GCNConfig(**{**gcn_cfg.to_dict(), "conditioning_mode": "none"})
    return train_generator(pairs, cfg, gcn_cfg, val_pairs=val_pairs, out_dir=out_dir, resume=resume,
                           tone_ids=sorted(tones), manifest_hash=manifest_hash)


def load_generator(path) -> tuple:
    """Load ``generator.pt``; returns (model, full config dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"generator checkpoint {path} not found (run `multiamp train-generator` first)")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = ConditionalGCN(GCNConfig(**payload["config"]["generator"]))
    load_checkpoint(path, model, kind="generator")
    model.eval()
    return model, payload["config"]
