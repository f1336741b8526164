"""Parameterised virtual amplifier chains used as stand-ins for real amps.

A chain is: pre-gain -> waveshaper -> DC blocker -> 3-band tone stack ->
power-stage saturation -> DC blocker -> cabinet FIR -> output trim. Every stage is a pure
function of the input and the config, so renders are bit-reproducible.

Bank file schema (JSON, ``{"version": 1, "amps": [record, ...]}``), one record
per amp::

    amp_id       str, unique
    gain_class   "high_gain" | "low_gain" | "crunch"
    seen         bool, whether generators train on it
    pre_gain     float >= 0
    waveshaper   "tanh" | "asymmetric_tanh" | "hard_clip" | "soft_clip_cubic" | "linear"
    asymmetry    float, bias added before the shaper (0 = symmetric)
    low_shelf    {"freq": Hz, "gain_db": dB, "q": Q}
    mid_peak     {"freq": Hz, "gain_db": dB, "q": Q}
    high_shelf   {"freq": Hz, "gain_db": dB, "q": Q}
    power_sat    float >= 0 (0 = bypass)
    cab_ir       list of FIR taps (<= 2048), or omit it and give
    cab          {"seed": int, "length": int, "cutoff_hz": Hz, "decay_ms": ms}
    output_trim  float
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import signal

SAMPLE_RATE = 44100
GAIN_CLASSES = ("high_gain", "low_gain", "crunch")
WAVESHAPERS = ("tanh", "asymmetric_tanh", "hard_clip", "soft_clip_cubic", "linear")
MAX_CAB_TAPS = 2048
DC_BLOCK_HZ = 10.0
BANK_FORMAT_VERSION = 1


class AmpConfigError(ValueError):
    """Invalid amp-chain parameters or bank file."""


@dataclass(frozen=True)
class FilterSpec:
    freq: float
    gain_db: float = 0.0
    q: float = 0.707


@dataclass(frozen=True, eq=False)
class AmpChainConfig:
    amp_id: str
    gain_class: str
    pre_gain: float
    waveshaper: str
    asymmetry: float
    low_shelf: FilterSpec
    mid_peak: FilterSpec
    high_shelf: FilterSpec
    power_sat: float
    cab_ir: np.ndarray
    output_trim: float = 1.0
    seen: bool = True

    def __post_init__(self):
        if self.gain_class not in GAIN_CLASSES:
            raise AmpConfigError(f"{self.amp_id}: unknown gain_class {self.gain_class!r}")
        if self.waveshaper not in WAVESHAPERS:
            raise AmpConfigError(f"{self.amp_id}: unknown waveshaper {self.waveshaper!r}")
        if self.pre_gain < 0 or self.power_sat < 0:
            raise AmpConfigError(f"{self.amp_id}: pre_gain and power_sat must be >= 0")
        ir = np.asarray(self.cab_ir, dtype=np.float64)
        if ir.ndim != 1 or not 1 <= len(ir) <= MAX_CAB_TAPS or not np.all(np.isfinite(ir)):
            raise AmpConfigError(f"{self.amp_id}: cab_ir must be 1..{MAX_CAB_TAPS} finite taps")
        ir.setflags(write=False)
        object.__setattr__(self, "cab_ir", ir)

    def to_record(self) -> dict:
        rec = {
            "amp_id": self.amp_id,
            "gain_class": self.gain_class,
            "seen": self.seen,
            "pre_gain": self.pre_gain,
            "waveshaper": self.waveshaper,
            "asymmetry": self.asymmetry,
        }
        for name in ("low_shelf", "mid_peak", "high_shelf"):
            f = getattr(self, name)
            rec[name] = {"freq": f.freq, "gain_db": f.gain_db, "q": f.q}
        rec["power_sat"] = self.power_sat
        rec["cab_ir"] = [float(v) for v in self.cab_ir]
        rec["output_trim"] = self.output_trim
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "AmpChainConfig":
        known = {
            "amp_id", "gain_class", "seen", "pre_gain", "waveshaper", "asymmetry",
            "low_shelf", "mid_peak", "high_shelf", "power_sat", "cab_ir", "cab", "output_trim",
        }
        unknown = set(rec) - known
        if unknown:
            raise AmpConfigError(f"unknown amp fields: {sorted(unknown)}")
        try:
            if "cab_ir" in rec:
                ir = np.asarray(rec["cab_ir"], dtype=np.float64)
            elif "cab" in rec:
                ir = synth_cab_ir(**rec["cab"])
            else:
                raise AmpConfigError(f"{rec.get('amp_id')}: needs 'cab_ir' or 'cab'")
            return cls(
                amp_id=str(rec["amp_id"]),
                gain_class=rec["gain_class"],
                pre_gain=float(rec["pre_gain"]),
                waveshaper=rec["waveshaper"],
                asymmetry=float(rec.get("asymmetry", 0.0)),
                low_shelf=FilterSpec(**rec["low_shelf"]),
                mid_peak=FilterSpec(**rec["mid_peak"]),
                high_shelf=FilterSpec(**rec["high_shelf"]),
                power_sat=float(rec["power_sat"]),
                cab_ir=ir,
                output_trim=float(rec.get("output_trim", 1.0)),
                seen=bool(rec.get("seen", True)),
            )
        except (KeyError, TypeError) as exc:
            raise AmpConfigError(f"malformed amp record {rec.get('amp_id', '?')}: {exc}") from exc


def synth_cab_ir(seed: int, length: int = 512, cutoff_hz: float = 5000.0,
                 decay_ms: float = 3.0, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Cabinet-like IR: exponentially decaying noise through a 4th-order low-pass.

    Normalised to unit L1 norm, which bounds the FIR gain by 1.
    """
    if not 1 <= length <= MAX_CAB_TAPS:
        raise AmpConfigError(f"cab length must be in [1, {MAX_CAB_TAPS}]")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sr
    h = rng.standard_normal(length) * np.exp(-t / (decay_ms * 1e-3))
    h[0] += 2.0  # strong direct path keeps the response minimum-phase-ish
    sos = signal.butter(4, cutoff_hz, btype="low", fs=sr, output="sos")
    h = signal.sosfilt(sos, h)
    return h / np.sum(np.abs(h))


# -- DSP stages ---------------------------------------------------------------

def _shape(u: np.ndarray, kind: str) -> np.ndarray:
    if kind in ("tanh", "asymmetric_tanh"):
        return np.tanh(u)
    if kind == "hard_clip":
        return np.clip(u, -1.0, 1.0)
    if kind == "soft_clip_cubic":
        c = np.clip(u, -1.0, 1.0)
        return 1.5 * (c - c**3 / 3.0)
    return u


def waveshape(x: np.ndarray, kind: str, pre_gain: float, asymmetry: float = 0.0) -> np.ndarray:
    """Static nonlinearity ``s(g*x + a) - s(a)``; the offset keeps s(0) = 0."""
    u = pre_gain * x + asymmetry
    return _shape(u, kind) - _shape(np.asarray(asymmetry), kind)


def dc_block(x: np.ndarray, cutoff_hz: float = DC_BLOCK_HZ, sr: int = SAMPLE_RATE) -> np.ndarray:
    """First-order high-pass ``y[n] = x[n] - x[n-1] + R y[n-1]``."""
    r = math.exp(-2.0 * math.pi * cutoff_hz / sr)
    return signal.lfilter([1.0, -1.0], [1.0, -r], x)


def biquad(kind: str, spec: FilterSpec, sr: int = SAMPLE_RATE):
    """RBJ cookbook coefficients (b, a) for a shelf or peaking section."""
    A = 10.0 ** (spec.gain_db / 40.0)
    w0 = 2.0 * math.pi * spec.freq / sr
    cw, sw = math.cos(w0), math.sin(w0)
    alpha = sw / (2.0 * spec.q)
    if kind == "peak":
        b = [1 + alpha * A, -2 * cw, 1 - alpha * A]
        a = [1 + alpha / A, -2 * cw, 1 - alpha / A]
    elif kind == "low_shelf":
        k = 2 * math.sqrt(A) * alpha
        b = [A * ((A + 1) - (A - 1) * cw + k), 2 * A * ((A - 1) - (A + 1) * cw),
             A * ((A + 1) - (A - 1) * cw - k)]
        a = [(A + 1) + (A - 1) * cw + k, -2 * ((A - 1) + (A + 1) * cw),
             (A + 1) + (A - 1) * cw - k]
    elif kind == "high_shelf":
        k = 2 * math.sqrt(A) * alpha
        b = [A * ((A + 1) + (A - 1) * cw + k), -2 * A * ((A - 1) + (A + 1) * cw),
             A * ((A + 1) + (A - 1) * cw - k)]
        a = [(A + 1) - (A - 1) * cw + k, 2 * ((A - 1) - (A + 1) * cw),
             (A + 1) - (A - 1) * cw - k]
    else:
        raise ValueError(kind)
    b, a = np.array(b), np.array(a)
    return b / a[0], a / a[0]


def tone_stack(x: np.ndarray, cfg: AmpChainConfig, sr: int = SAMPLE_RATE) -> np.ndarray:
    y = x
    for kind, spec in (("low_shelf", cfg.low_shelf), ("peak", cfg.mid_peak),
                       ("high_shelf", cfg.high_shelf)):
        if spec.gain_db != 0.0:  # a flat section is skipped, not filtered
            b, a = biquad(kind, spec, sr)
            y = signal.lfilter(b, a, y)
    return y


def power_stage(x: np.ndarray, drive: float) -> np.ndarray:
    """``tanh(d*x) / tanh(d)``: bounded by 1/tanh(d), identity at d = 0."""
    if drive == 0.0:
        return x
    return np.tanh(drive * x) / math.tanh(drive)


def render(x, cfg: AmpChainConfig, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Render a clean mono waveform through one amp chain (same length, float32)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("render expects a mono 1-D waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("render input contains NaN/Inf")
    y = waveshape(x, cfg.waveshaper, cfg.pre_gain, cfg.asymmetry)
    if cfg.waveshaper != "linear":
        y = dc_block(y, sr=sr)
    y = tone_stack(y, cfg, sr)
    if cfg.power_sat > 0.0:
        # tanh of an asymmetric waveform regenerates DC
        y = dc_block(power_stage(y, cfg.power_sat), sr=sr)
    if len(y):
        y = signal.fftconvolve(y, cfg.cab_ir)[: len(x)]
    y = cfg.output_trim * y
    return y.astype(np.float32)


def measure_thd(x, f0: float, sr: int = SAMPLE_RATE, max_harmonic: int = 10) -> float:
    """Power in harmonics 2..max_harmonic divided by power at the fundamental.

    Uses a Blackman-Harris windowed FFT and sums each harmonic's main lobe
    (+/- 4 bins around the nearest bin). Harmonics at or above Nyquist are
    ignored.
    """
    if not 20.0 < f0 < 2000.0:
        raise ValueError(f"f0 must lie in (20, 2000) Hz, got {f0}")
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 10 * sr / f0:
        raise ValueError("signal must span at least 10 periods of f0")
    x = x - x.mean()
    w = signal.get_window("blackmanharris", len(x), fftbins=False)
    power = np.abs(np.fft.rfft(x * w)) ** 2
    bin_hz = sr / len(x)

    def band(k):
        centre = int(round(k * f0 / bin_hz))
        return power[max(centre - 4, 0): centre + 5].sum()

    fund = band(1)
    if fund == 0.0:
        raise ValueError("no energy at the fundamental")
    harmonics = sum(band(k) for k in range(2, max_harmonic + 1) if k * f0 < sr / 2)
    return float(harmonics / fund)


# -- the bank -----------------------------------------------------------------

def _amp(amp_id, gain_class, pre_gain, shaper, asym, low, mid, high, power, cab, trim=1.0, seen=True):
    return AmpChainConfig(
        amp_id=amp_id, gain_class=gain_class, pre_gain=pre_gain, waveshaper=shaper,
        asymmetry=asym, low_shelf=FilterSpec(*low), mid_peak=FilterSpec(*mid),
        high_shelf=FilterSpec(*high), power_sat=power, cab_ir=synth_cab_ir(**cab),
        output_trim=trim, seen=seen,
    )


def amp_bank() -> List[AmpChainConfig]:
    """The fixed 11-amp bank: 3 high-gain, 3 low-gain, 3 crunch seen amps plus
    one unseen high-gain and one unseen low-gain amp."""
    return [
        # high gain
        _amp("amp1", "high_gain", 60.0, "asymmetric_tanh", 0.20,
             (120, 3.0, 0.7), (750, -5.0, 0.8), (3200, 4.0, 0.7), 1.5,
             dict(seed=101, length=512, cutoff_hz=4500, decay_ms=3.0)),
        _amp("amp2", "high_gain", 90.0, "hard_clip", 0.05,
             (100, 1.5, 0.7), (1100, 3.0, 1.0), (4000, -2.0, 0.7), 1.0,
             dict(seed=102, length=512, cutoff_hz=5000, decay_ms=2.5)),
        _amp("amp3", "high_gain", 40.0, "tanh", 0.0,
             (150, 4.0, 0.7), (500, -2.0, 0.7), (2500, 2.0, 0.7), 2.0,
             dict(seed=103, length=512, cutoff_hz=4200, decay_ms=3.5)),
        # low gain
        _amp("amp4", "low_gain", 1.6, "tanh", 0.0,
             (200, 2.0, 0.7), (900, 2.0, 0.8), (3500, -3.0, 0.7), 0.5,
             dict(seed=104, length=512, cutoff_hz=5500, decay_ms=2.0)),
        _amp("amp5", "low_gain", 2.4, "asymmetric_tanh", 0.10,
             (120, -2.0, 0.7), (1500, 3.0, 1.0), (4500, 3.0, 0.7), 0.7,
             dict(seed=105, length=512, cutoff_hz=6000, decay_ms=2.5)),
        _amp("amp6", "low_gain", 2.0, "soft_clip_cubic", 0.0,
             (180, 1.0, 0.7), (600, -3.0, 0.8), (3000, 1.0, 0.7), 0.6,
             dict(seed=106, length=512, cutoff_hz=5000, decay_ms=3.0)),
        # crunch
        _amp("amp7", "crunch", 14.0, "asymmetric_tanh", 0.15,
             (140, 2.0, 0.7), (800, 2.5, 0.9), (3800, 2.0, 0.7), 1.2,
             dict(seed=107, length=512, cutoff_hz=5000, decay_ms=2.8)),
        _amp("amp8", "crunch", 7.0, "tanh", 0.0,
             (110, 3.0, 0.7), (1200, -2.0, 0.8), (3000, 3.0, 0.7), 1.0,
             dict(seed=108, length=512, cutoff_hz=5800, decay_ms=2.2)),
        _amp("amp9", "crunch", 9.0, "soft_clip_cubic", 0.05,
             (160, 1.0, 0.7), (700, 4.0, 1.2), (4200, -1.0, 0.7), 0.9,
             dict(seed=109, length=512, cutoff_hz=4800, decay_ms=3.2)),
        # unseen
        _amp("amp10", "high_gain", 55.0, "tanh", 0.10,
             (130, 2.5, 0.7), (900, -1.0, 0.9), (3500, 3.0, 0.7), 1.4,
             dict(seed=110, length=512, cutoff_hz=4700, decay_ms=3.0), seen=False),
        _amp("amp11", "low_gain", 2.2, "tanh", 0.05,
             (160, 1.0, 0.7), (1100, 2.5, 0.9), (4000, 0.0, 0.7), 0.6,
             dict(seed=111, length=512, cutoff_hz=5500, decay_ms=2.5), seen=False),
    ]


def seen_amps(bank: Sequence[AmpChainConfig]) -> List[AmpChainConfig]:
    return [a for a in bank if a.seen]


def unseen_amps(bank: Sequence[AmpChainConfig]) -> List[AmpChainConfig]:
    return [a for a in bank if not a.seen]


GAIN_RANGES = {"low_gain": (1.2, 3.5), "crunch": (5.0, 20.0), "high_gain": (25.0, 120.0)}


def random_amp(rng: np.random.Generator, amp_id: str, gain_class: Optional[str] = None) -> AmpChainConfig:
    """Draw a random amp snapshot (used to diversify encoder training tones)."""
    if gain_class is None:
        gain_class = GAIN_CLASSES[rng.integers(len(GAIN_CLASSES))]
    lo, hi = GAIN_RANGES[gain_class]
    shaper = WAVESHAPERS[rng.integers(4)]
    return AmpChainConfig(
        amp_id=amp_id,
        gain_class=gain_class,
        pre_gain=float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
        waveshaper=shaper,
        asymmetry=float(rng.uniform(0.0, 0.25)) if shaper != "tanh" else 0.0,
        low_shelf=FilterSpec(float(rng.uniform(80, 250)), float(rng.uniform(-4, 5)), 0.7),
        mid_peak=FilterSpec(float(rng.uniform(400, 1600)), float(rng.uniform(-6, 5)),
                            float(rng.uniform(0.6, 1.4))),
        high_shelf=FilterSpec(float(rng.uniform(2000, 5000)), float(rng.uniform(-5, 5)), 0.7),
        power_sat=float(rng.uniform(0.5, 2.5)),
        cab_ir=synth_cab_ir(seed=int(rng.integers(2**31)), length=512,
                            cutoff_hz=float(rng.uniform(3500, 7000)),
                            decay_ms=float(rng.uniform(1.5, 4.0))),
        output_trim=1.0,
        seen=True,
    )


def save_bank(bank: Sequence[AmpChainConfig], path) -> None:
    ids = [a.amp_id for a in bank]
    if len(set(ids)) != len(ids):
        raise AmpConfigError("duplicate amp_id in bank")
    payload = {"version": BANK_FORMAT_VERSION, "amps": [a.to_record() for a in bank]}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_bank(path) -> List[AmpChainConfig]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AmpConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("version") != BANK_FORMAT_VERSION:
        raise AmpConfigError(f"{path}: expected a version-{BANK_FORMAT_VERSION} amp bank")
    if not isinstance(payload.get("amps"), list) or not payload["amps"]:
        raise AmpConfigError(f"{path}: 'amps' must be a non-empty list")
    bank = [AmpChainConfig.from_record(r) for r in payload["amps"]]
    ids = [a.amp_id for a in bank]
    if len(set(ids)) != len(ids):
        raise AmpConfigError(f"{path}: duplicate amp_id")
    return bank


def linear_test_config(cab_ir, amp_id: str = "linear") -> AmpChainConfig:
    """Linear chain (unity shaper, flat tone stack, no power stage)."""
    flat = FilterSpec(1000.0, 0.0, 0.707)
    return AmpChainConfig(amp_id=amp_id, gain_class="low_gain", pre_gain=1.0,
                          waveshaper="linear", asymmetry=0.0, low_shelf=flat, mid_peak=flat,
                          high_shelf=flat, power_sat=0.0, cab_ir=cab_ir)
