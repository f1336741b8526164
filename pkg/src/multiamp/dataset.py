"""Paired clean/wet corpus: normalisation, segmentation, splits, rendering,
reference sampling, WAV and manifest I/O."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .virtual_amps import AmpChainConfig, render

log = logging.getLogger(__name__)

GENERATOR_SR = 44100
ENCODER_SR = 16000
CLIP_SECONDS = 3.5
CLIP_SAMPLES = int(round(CLIP_SECONDS * GENERATOR_SR))  # 154350
ROLES = ("clean", "wet", "reference")


class MissingRenderError(LookupError):
    def __init__(self, content_id: str, tone_id: str):
        super().__init__(f"missing rendered clip for (content_id={content_id!r}, tone_id={tone_id!r})")
        self.content_id = content_id
        self.tone_id = tone_id


@dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    role: str
    tone_id: str
    content_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono audio only")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.content_id}/{self.tone_id} has non-finite samples")

    def __len__(self):
        return len(self.samples)

    def as_role(self, role: str) -> "AudioClip":
        return AudioClip(self.samples, self.sample_rate, role, self.tone_id, self.content_id)


@dataclass
class DatasetSplit:
    train: List[str]
    val: List[str]
    test: List[str]
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def partition_of(self, content_id: str) -> str:
        for name in ("train", "val", "test"):
            if content_id in getattr(self, name):
                return name
        raise KeyError(content_id)

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test,
                "fractions": list(self.fractions), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]),
                   tuple(d["fractions"]), int(d["seed"]))


def peak_normalize(x, target_dbfs: float = -12.0) -> np.ndarray:
    x = np.asarray(x)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0:
        raise ValueError("cannot peak-normalise an all-zero signal")
    target = 10.0 ** (target_dbfs / 20.0)
    return (x.astype(np.float64) * (target / peak)).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def segment(x, duration_s: float = CLIP_SECONDS, sr: int = GENERATOR_SR,
            prefix: str = "c", role: str = "clean", tone_id: str = "clean") -> List[AudioClip]:
    """Non-overlapping consecutive segments; the trailing remainder is dropped."""
    x = np.asarray(x)
    n = int(round(duration_s * sr))
    count = len(x) // n
    return [AudioClip(x[i * n:(i + 1) * n], sr, role, tone_id, f"{prefix}{i:05d}")
            for i in range(count)]


def split(content_ids: Sequence[str], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then floor-sized val/test; the remainder goes to train."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    ids = list(content_ids)
    if len(ids) < 10:
        raise ValueError("need at least 10 content ids to split")
    if len(set(ids)) != len(ids):
        raise ValueError("content ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    # tiny epsilon so 0.1 * 10 floors to 1, not 0
    n_val = int(np.floor(fractions[1] * len(ids) + 1e-9))
    n_test = int(np.floor(fractions[2] * len(ids) + 1e-9))
    n_train = len(ids) - n_val - n_test
    return DatasetSplit(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
        fractions=tuple(fractions),
        seed=seed,
    )


def render_wet(clip: AudioClip, amp: AmpChainConfig, target_dbfs: Optional[float] = -12.0) -> AudioClip:
    """Render a clean clip through ``amp`` and (optionally) peak-normalise the result."""
    y = render(clip.samples, amp, clip.sample_rate)
    if target_dbfs is not None and np.any(y):
        y = peak_normalize(y, target_dbfs)
    return AudioClip(y, clip.sample_rate, "wet", amp.amp_id, clip.content_id)


@dataclass
class Pair:
    x: AudioClip
    y: AudioClip

    @property
    def tone_id(self) -> str:
        return self.y.tone_id

    @property
    def content_id(self) -> str:
        return self.x.content_id


def build_pairs(clean: Sequence[AudioClip], amps: Sequence, wet: Dict[Tuple[str, str], AudioClip]) -> List[Pair]:
    """Every (clean clip, amp) combination, looked up in ``wet[(content_id, tone_id)]``."""
    pairs = []
    for x in clean:
        for amp in amps:
            tone = amp if isinstance(amp, str) else amp.amp_id
            y = wet.get((x.content_id, tone))
            if y is None:
                raise MissingRenderError(x.content_id, tone)
            if len(y) != len(x) or y.content_id != x.content_id:
                raise ValueError(f"misaligned pair ({x.content_id}, {tone})")
            pairs.append(Pair(x, y))
    return pairs


class ReferencePool:
    """Same-tone wet clips available as conditioning references."""

    def __init__(self, clips: Iterable[AudioClip]):
        self.by_tone: Dict[str, List[AudioClip]] = defaultdict(list)
        for c in clips:
            self.by_tone[c.tone_id].append(c)
        for tone in self.by_tone:
            self.by_tone[tone].sort(key=lambda c: c.content_id)

    def candidates(self, tone_id: str, exclude_content: Optional[str] = None) -> List[AudioClip]:
        return [c for c in self.by_tone.get(tone_id, []) if c.content_id != exclude_content]


def sample_reference(target: Pair, mode: str, rng: np.random.Generator, pool: ReferencePool) -> AudioClip:
    """Pick the reference z for a training pair.

    paired: z is y itself. unpaired: a uniformly drawn same-tone clip with a
    different content id; if none exists, falls back to paired with a warning.
    """
    if mode == "paired":
        return target.y.as_role("reference")
    if mode != "unpaired":
        raise ValueError(f"unknown reference mode {mode!r}")
    cands = pool.candidates(target.tone_id, exclude_content=target.content_id)
    if not cands:
        log.warning("no unpaired reference for tone %s besides %s; using paired reference",
                    target.tone_id, target.content_id)
        return target.y.as_role("reference")
    return cands[int(rng.integers(len(cands)))].as_role("reference")


@lru_cache(maxsize=8)
def _antialias_fir(sr_in: int, sr_out: int, up: int) -> np.ndarray:
    # Kaiser lowpass at the upsampled rate: flat to 7/8 of the lower Nyquist,
    # >= 80 dB down at the lower Nyquist itself
    nyq = min(sr_in, sr_out) / 2.0
    width = nyq / 8.0
    fs_up = float(sr_in) * up
    numtaps, beta = signal.kaiserord(80.0, width / (fs_up / 2.0))
    return signal.firwin(numtaps | 1, nyq - width / 2.0, window=("kaiser", beta), fs=fs_up)


def resample(x, sr_in: int, sr_out: int) -> np.ndarray:
    """Windowed-sinc polyphase resampling; aliases end up more than 60 dB down."""
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float32)
    g = np.gcd(int(sr_in), int(sr_out))
    up, down = sr_out // g, sr_in // g
    h = _antialias_fir(int(sr_in), int(sr_out), up)
    y = signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)
    return y.astype(np.float32)


# -- I/O -----------------------------------------------------------------------

def write_wav(path, x, sr: int, subtype: str = "float32") -> None:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("only mono WAV is supported")
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(np.asarray(x, np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sr, data)


def read_wav(path) -> Tuple[np.ndarray, int]:
    """Read a mono WAV (16-bit PCM or 32-bit float) as float32 in [-1, 1]."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype.kind == "f":
        data = data.astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return data, int(sr)


MANIFEST_FIELDS = ("content_id", "tone_id", "split", "path")


def write_manifest(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in MANIFEST_FIELDS})


def read_manifest(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class Corpus:
    """A rendered corpus directory held in memory."""

    root: Path
    clean: Dict[str, AudioClip]
    wet: Dict[Tuple[str, str], AudioClip]
    split: DatasetSplit
    amps: List[AmpChainConfig] = field(default_factory=list)

    def clean_clips(self, part: str) -> List[AudioClip]:
        return [self.clean[c] for c in getattr(self.split, part)]

    def wet_clips(self, part: str, tone_ids: Optional[Sequence[str]] = None) -> List[AudioClip]:
        tones = tone_ids if tone_ids is not None else [a.amp_id for a in self.amps]
        out = []
        for c in getattr(self.split, part):
            for t in tones:
                if (c, t) not in self.wet:
                    raise MissingRenderError(c, t)
                out.append(self.wet[(c, t)])
        return out

    def pairs(self, part: str, tone_ids: Sequence[str]) -> List[Pair]:
        return build_pairs(self.clean_clips(part), list(tone_ids), self.wet)

    @property
    def seen_ids(self) -> List[str]:
        return [a.amp_id for a in self.amps if a.seen]

    @property
    def unseen_ids(self) -> List[str]:
        return [a.amp_id for a in self.amps if not a.seen]

    def amp(self, amp_id: str) -> AmpChainConfig:
        for a in self.amps:
            if a.amp_id == amp_id:
                return a
        raise KeyError(amp_id)


def build_corpus(clean_audio, amps: Sequence[AmpChainConfig], out_dir, seed: int = 0,
                 fractions=(0.8, 0.1, 0.1), target_dbfs: float = -12.0,
                 wav_subtype: str = "float32") -> Corpus:
    """Segment, normalise, split and render a clean recording; write WAVs,
    ``manifest.csv``, ``split.json`` and ``amp_bank.json`` under ``out_dir``."""
    from .virtual_amps import save_bank

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = [c for c in segment(clean_audio) if np.any(c.samples)]
    clean = {}
    for c in clips:
        clean[c.content_id] = AudioClip(peak_normalize(c.samples, target_dbfs), c.sample_rate,
                                        "clean", "clean", c.content_id)
    sp = split(list(clean), fractions, seed)
    rows, wet = [], {}
    for cid, c in clean.items():
        part = sp.partition_of(cid)
        p = Path("clean") / f"{cid}.wav"
        write_wav(out / p, c.samples, c.sample_rate, wav_subtype)
        rows.append({"content_id": cid, "tone_id": "clean", "split": part, "path": str(p)})
        for amp in amps:
            y = render_wet(c, amp, target_dbfs)
            wet[(cid, amp.amp_id)] = y
            p = Path("wet") / amp.amp_id / f"{cid}.wav"
            write_wav(out / p, y.samples, y.sample_rate, wav_subtype)
            rows.append({"content_id": cid, "tone_id": amp.amp_id, "split": part, "path": str(p)})
    write_manifest(out / "manifest.csv", rows)
    (out / "split.json").write_text(json.dumps(sp.to_dict(), indent=1))
    save_bank(amps, out / "amp_bank.json")
    return Corpus(out, clean, wet, sp, list(amps))


def load_corpus(root) -> Corpus:
    from .virtual_amps import load_bank

    root = Path(root)
    if not (root / "manifest.csv").exists():
        raise FileNotFoundError(f"{root}/manifest.csv not found (run `multiamp render-dataset` first)")
    sp = DatasetSplit.from_dict(json.loads((root / "split.json").read_text()))
    amps = load_bank(root / "amp_bank.json")
    clean, wet = {}, {}
    for r in read_manifest(root / "manifest.csv"):
        path = root / r["path"]
        if not path.exists():
            continue  # surfaces as MissingRenderError when the pair is requested
        x, sr = read_wav(path)
        if r["tone_id"] == "clean":
            clean[r["content_id"]] = AudioClip(x, sr, "clean", "clean", r["content_id"])
        else:
            wet[(r["content_id"], r["tone_id"])] = AudioClip(x, sr, "wet", r["tone_id"], r["content_id"])
    return Corpus(root, clean, wet, sp, amps)
