"""Contrastively trained tone encoder.

Wet clips -> 16 kHz log-mel -> small strided CNN -> temporal mean pool ->
projection -> L2-normalised 512-d tone embedding. A two-layer head on top of
the embedding is used only by the NT-Xent loss during training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, restore_rng, rng_state, save_checkpoint
from .dataset import ENCODER_SR, AudioClip, peak_normalize, resample, render_wet
from .virtual_amps import AmpChainConfig, random_amp

log = logging.getLogger(__name__)

EMBEDDING_DIM = 512


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = ENCODER_SR
    n_mels: int = 128
    win_length: int = 400  # 25 ms
    hop: int = 160  # 10 ms
    n_fft: int = 1024
    f_min: float = 0.0
    f_max: float = 8000.0
    floor: float = 1e-10

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_length:
            return 0
        return (num_samples - self.win_length) // self.hop + 1


@dataclass
class MelSpec:
    matrix: np.ndarray  # (n_mels, frames)
    frame_rate: float
    sample_rate: int


@dataclass
class ToneEmbedding:
    vector: np.ndarray
    source_tone_id: Optional[str] = None


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3.0)
    logstep = math.log(6.4) / 27.0
    return np.where(f >= 1000.0, 15.0 + np.log(np.maximum(f, 1e-9) / 1000.0) / logstep, lin)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    logstep = math.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), m * 200.0 / 3.0)


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular, area-normalised Slaney filterbank of shape (n_mels, n_fft//2 + 1)."""
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, cfg.n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return fb.astype(np.float32)


class LogMel(nn.Module):
    """Batched log-mel in torch; frames are ``win_length`` long, no centering."""

    def __init__(self, cfg: MelConfig = MelConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("window", torch.hann_window(cfg.win_length), persistent=False)
        self.register_buffer("fb", torch.from_numpy(mel_filterbank(cfg)), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.shape[-1] < cfg.win_length:
            raise ValueError(f"need at least {cfg.win_length} samples for one mel frame")
        frames = x.unfold(-1, cfg.win_length, cfg.hop) * self.window
        spec = torch.fft.rfft(frames, n=cfg.n_fft)
        power = spec.real.square() + spec.imag.square()
        mel = power @ self.fb.T
        return torch.log(torch.clamp(mel, min=cfg.floor)).transpose(-1, -2)


def mel_frontend(clip: AudioClip, cfg: MelConfig = MelConfig()) -> MelSpec:
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"mel frontend expects {cfg.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    with torch.no_grad():
        m = LogMel(cfg)(torch.from_numpy(np.asarray(clip.samples, dtype=np.float32)))
    return MelSpec(m.numpy(), cfg.sample_rate / cfg.hop, cfg.sample_rate)


# -- model ---------------------------------------------------------------------

@dataclass
class EncoderConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 128, 128)
    hidden_dim: int = 512
    embedding_dim: int = EMBEDDING_DIM
    head_dims: Tuple[int, ...] = (256, 128)
    n_mels: int = 128
    temperature: float = 0.1
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 1000
    steps_per_epoch: int = 100
    crop_seconds: float = 1.0
    snr_db: Tuple[float, float] = (20.0, 40.0)
    noise: bool = True
    seed: int = 0
    num_random_tones: int = 150
    contents_per_tone: int = 6
    corpus_clip_seconds: Optional[float] = 2.0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.head_dims = tuple(self.head_dims)
        self.snr_db = tuple(self.snr_db)
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def model_dict(self) -> dict:
        return {"channels": list(self.channels), "hidden_dim": self.hidden_dim,
                "embedding_dim": self.embedding_dim, "head_dims": list(self.head_dims),
                "n_mels": self.n_mels}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"], d["head_dims"], d["snr_db"] = list(self.channels), list(self.head_dims), list(self.snr_db)
        return d


class ToneEncoder(nn.Module):
    """log-mel (B, n_mels, frames) -> unit-norm tone embedding (B, embedding_dim)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.logmel = LogMel(MelConfig(n_mels=cfg.n_mels))
        layers, in_ch = [], 1
        for ch in cfg.channels:
            layers += [nn.Conv2d(in_ch, ch, 3, stride=2, padding=1), nn.GroupNorm(min(8, ch), ch), nn.ReLU()]
            in_ch = ch
        self.features = nn.Sequential(*layers)
        freq_bins = cfg.n_mels
        for _ in cfg.channels:
            freq_bins = (freq_bins + 1) // 2
        self.projection = nn.Sequential(
            nn.Linear(in_ch * freq_bins, cfg.hidden_dim), nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.embedding_dim),
        )

    def forward(self, logmel: torch.Tensor) -> torch.Tensor:
        if logmel.dim() == 2:
            logmel = logmel.unsqueeze(0)
        # removing the clip's mean log-energy makes the embedding level-invariant
        x = logmel - logmel.mean(dim=(1, 2), keepdim=True)
        h = self.features((x / 10.0).unsqueeze(1))
        h = h.mean(dim=-1).flatten(1)
        return F.normalize(self.projection(h), dim=-1)

    def embed_waveform(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T) 16 kHz waveforms -> (B, embedding_dim)."""
        return self(self.logmel(x))


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, dims: Sequence[int]):
        super().__init__()
        layers = []
        for i, d in enumerate(dims):
            layers.append(nn.Linear(in_dim, d))
            if i < len(dims) - 1:
                layers.append(nn.ReLU())
            in_dim = d
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ContrastiveModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.encoder = ToneEncoder(cfg)
        self.head = ProjectionHead(cfg.embedding_dim, cfg.head_dims)


def encode(encoder: ToneEncoder, spec: MelSpec, source_tone_id: Optional[str] = None) -> ToneEmbedding:
    encoder.eval()
    with torch.no_grad():
        v = encoder(torch.from_numpy(np.asarray(spec.matrix, dtype=np.float32)))[0]
    return ToneEmbedding(v.numpy(), source_tone_id)


def embed_audio(encoder: ToneEncoder, samples, sr: int) -> np.ndarray:
    """Embed one waveform at any rate (resampled to the encoder rate first)."""
    x = resample(samples, sr, ENCODER_SR)
    encoder.eval()
    with torch.no_grad():
        return encoder.embed_waveform(torch.from_numpy(x)[None])[0].numpy()


def embed_clips(encoder: ToneEncoder, clips: Sequence[AudioClip], batch_size: int = 16) -> np.ndarray:
    """Embeddings (N, 512) for many clips; equal-length runs are batched."""
    out = np.zeros((len(clips), encoder.cfg.embedding_dim), dtype=np.float32)
    encoder.eval()
    i = 0
    with torch.no_grad():
        while i < len(clips):
            j = i + 1
            while j < len(clips) and j - i < batch_size and len(clips[j]) == len(clips[i]) \
                    and clips[j].sample_rate == clips[i].sample_rate:
                j += 1
            x = np.stack([resample(c.samples, c.sample_rate, ENCODER_SR) for c in clips[i:j]])
            out[i:j] = encoder.embed_waveform(torch.from_numpy(x)).numpy()
            i = j
    return out


# -- data ----------------------------------------------------------------------

def augment(clip: AudioClip, rng: np.random.Generator, crop_samples: int,
            snr_db: Tuple[float, float] = (20.0, 40.0), noise: bool = True,
            return_info: bool = False):
    """Random contiguous crop plus white noise at an SNR drawn from ``snr_db``."""
    n = len(clip)
    if n < crop_samples:
        raise ValueError(f"clip of {n} samples is shorter than crop length {crop_samples}")
    offset = int(rng.integers(n - crop_samples + 1))
    y = clip.samples[offset: offset + crop_samples].astype(np.float64)
    info = {"offset": offset, "snr_db": None}
    if noise:
        snr = float(rng.uniform(*snr_db))
        w = rng.standard_normal(crop_samples)
        p_sig = np.mean(y**2)
        p_w = np.mean(w**2)
        if p_sig > 0:
            y = y + w * math.sqrt(p_sig / (p_w * 10.0 ** (snr / 10.0)))
        info["snr_db"] = snr
    out = AudioClip(y.astype(np.float32), clip.sample_rate, clip.role, clip.tone_id, clip.content_id)
    return (out, info) if return_info else out


def make_contrastive_batch(corpus: Dict[str, List[AudioClip]], batch_size: int,
                           rng: np.random.Generator) -> List[Tuple[AudioClip, AudioClip]]:
    """``batch_size`` positive pairs (same tone, different content), one tone per pair."""
    tones = sorted(corpus)
    if len(tones) < 2:
        raise ValueError("contrastive batches need at least 2 tones")
    if batch_size > len(tones):
        raise ValueError(f"batch_size {batch_size} exceeds the number of tones ({len(tones)})")
    chosen = rng.choice(len(tones), size=batch_size, replace=False)
    pairs = []
    for t in chosen:
        clips = corpus[tones[t]]
        if len(clips) < 2:
            raise ValueError(f"tone {tones[t]} has fewer than 2 contents")
        i, j = rng.choice(len(clips), size=2, replace=False)
        pairs.append((clips[i], clips[j]))
    return pairs


def build_encoder_corpus(clean_clips: Sequence[AudioClip], amps: Sequence[AmpChainConfig],
                         num_random_tones: int, contents_per_tone: int, seed: int,
                         clip_seconds: Optional[float] = 2.0) -> Dict[str, List[AudioClip]]:
    """Render ``contents_per_tone`` clean clips through each given amp plus
    ``num_random_tones`` randomised snapshots; returns 16 kHz wet clips by tone."""
    rng = np.random.default_rng(seed)
    tones = list(amps) + [random_amp(rng, f"rand{i:04d}") for i in range(num_random_tones)]
    corpus: Dict[str, List[AudioClip]] = {}
    k = min(contents_per_tone, len(clean_clips))
    for amp in tones:
        picks = sorted(rng.choice(len(clean_clips), size=k, replace=False))
        clips = []
        for p in picks:
            y = render_wet(clean_clips[p], amp)
            z = resample(y.samples, y.sample_rate, ENCODER_SR)
            if clip_seconds is not None:
                z = z[: int(clip_seconds * ENCODER_SR)]
            clips.append(AudioClip(z, ENCODER_SR, "wet", amp.amp_id, y.content_id))
        corpus[amp.amp_id] = clips
    return corpus


# -- loss ----------------------------------------------------------------------

def nt_xent_loss(z: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """NT-Xent over 2B embeddings where rows (2k, 2k+1) are positives.

    Similarity is cosine; each anchor's softmax runs over the other 2B - 1 rows.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValueError("need an even number (>= 2) of embeddings")
    z = F.normalize(z, dim=-1)
    logits = (z @ z.T) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    positives = torch.arange(n, device=z.device) ^ 1
    return F.cross_entropy(logits, positives)


# -- training ------------------------------------------------------------------

def _batch_tensor(pairs, rng, cfg: EncoderConfig) -> torch.Tensor:
    crop = int(cfg.crop_seconds * ENCODER_SR)
    rows = []
    for a, b in pairs:
        rows.append(augment(a, rng, crop, cfg.snr_db, cfg.noise).samples)
        rows.append(augment(b, rng, crop, cfg.snr_db, cfg.noise).samples)
    return torch.from_numpy(np.stack(rows))


def train_encoder(corpus: Dict[str, List[AudioClip]], cfg: EncoderConfig,
                  out_dir=None, resume: bool = True) -> Tuple[ToneEncoder, List[dict]]:
    """Train with in-batch negatives; checkpoints every ``steps_per_epoch`` steps.

    Returns the trained encoder and the per-step loss log. If ``out_dir`` holds
    a ``checkpoints/last.pt`` and ``resume`` is set, training continues from it.
    """
    if len(corpus) < 2:
        raise ValueError("encoder training needs a corpus with at least 2 tones")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ContrastiveModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: List[dict] = []
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    last = out / "checkpoints" / "last.pt" if out is not None else None
    if resume and last is not None and last.exists():
        payload = load_checkpoint(last, model, kind="encoder_training")
        opt.load_state_dict(payload["optimizer"])
        restore_rng(payload["rng"], rng)
        start = payload["extra"]["step"]
        history = list(payload["extra"]["history"])
        log.info("resuming encoder training at step %d", start)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    model.train()
    for step in range(start, cfg.steps):
        pairs = make_contrastive_batch(corpus, cfg.batch_size, rng)
        x = _batch_tensor(pairs, rng, cfg)
        z = model.head(model.encoder.embed_waveform(x))
        loss = nt_xent_loss(z, cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": loss.item(), "batch_size": cfg.batch_size})
        if out is not None and ((step + 1) % cfg.steps_per_epoch == 0 or step + 1 == cfg.steps):
            epoch = (step + 1 + cfg.steps_per_epoch - 1) // cfg.steps_per_epoch
            kw = dict(kind="encoder_training", model=model, config=cfg.to_dict(), optimizer=opt,
                      rng=rng_state(rng), step=step + 1, history=history)
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.pt", **kw)
            save_checkpoint(last, **kw)
    model.eval()
    if out is not None:
        save_encoder(model.encoder, out / "encoder.pt")
        with open(out / "log.jsonl", "w") as f:
            for row in history:
                f.write(json.dumps(row) + "\n")
    return model.encoder, history


def save_encoder(encoder: ToneEncoder, path) -> None:
    save_checkpoint(path, "encoder", encoder, {"model": encoder.cfg.model_dict()})


def load_encoder(path) -> ToneEncoder:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True) if Path(path).exists() else None
    if payload is None:
        raise FileNotFoundError(f"encoder checkpoint {path} not found (run `multiamp train-encoder` first)")
    encoder = ToneEncoder(EncoderConfig(**payload["config"]["model"]))
    load_checkpoint(path, encoder, kind="encoder")
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder
