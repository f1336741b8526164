"""Run configuration: strict YAML sections mapped onto the module dataclasses.

Schema (every key optional; unknown keys are rejected)::

    seed: int                     # global seed, copied into every section
    out: str                      # run directory
    data:       DataConfig        # clean source, split fractions, amp bank file
    encoder:    EncoderConfig     # tone encoder architecture + training
    generator:  GCNConfig         # architecture; the variant sets mode/source
    train:      TrainConfig       # optimiser, steps, crops, validation
    experiment: ExperimentConfig  # which variants, index size, eval options

Environment overrides (below CLI flags, above the file): MULTIAMP_OUT,
MULTIAMP_DEVICE, MULTIAMP_CLEAN_DIR, MULTIAMP_AMP_BANK.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .generator import GCNConfig
from .tone_encoder import EncoderConfig
from .training import TrainConfig
from .zero_shot import STRATEGIES

ALL_VARIANTS = ["FiLM+LUT", "FiLM+ToneEmb-paired", "FiLM+ToneEmb-unpaired", "Concat+LUT",
                "Concat+ToneEmb-paired"]

ENV_OVERRIDES = {
    "MULTIAMP_OUT": ("out",),
    "MULTIAMP_DEVICE": ("train", "device"),
    "MULTIAMP_CLEAN_DIR": ("data", "clean_wav_dir"),
    "MULTIAMP_AMP_BANK": ("data", "amp_bank"),
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    clean_seconds: float = 315.0  # synthetic clean audio when no WAV directory is given
    clean_wav_dir: Optional[str] = None
    fractions: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    target_dbfs: float = -12.0
    amp_bank: Optional[str] = None  # JSON bank file; built-in bank when unset
    wav_subtype: str = "float32"

    def __post_init__(self):
        if self.clean_seconds <= 0:
            raise ValueError("clean_seconds must be > 0")
        if len(self.fractions) != 3:
            raise ValueError("fractions must have three entries (train, val, test)")
        if self.wav_subtype not in ("float32", "pcm16"):
            raise ValueError("wav_subtype must be float32 or pcm16")


@dataclass
class ExperimentConfig:
    variants: List[str] = field(default_factory=lambda: list(ALL_VARIANTS))
    one_to_one: bool = True
    one_to_one_steps: Optional[int] = None  # defaults to train.max_steps
    one_to_one_batch_size: Optional[int] = None  # defaults to train.batch_size
    per_tone_count: Optional[int] = 400  # index entries per seen tone; None = all train clips
    strategies: List[str] = field(default_factory=lambda: list(STRATEGIES))
    zero_shot_variant: str = "FiLM+ToneEmb-unpaired"
    eval_batch: int = 4
    spectrogram_amps: List[str] = field(default_factory=lambda: ["amp1", "amp4"])

    def __post_init__(self):
        for v in self.variants:
            if v not in ALL_VARIANTS:
                raise ValueError(f"unknown variant {v!r}; expected one of {ALL_VARIANTS}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        if self.zero_shot_variant not in ALL_VARIANTS or "ToneEmb" not in self.zero_shot_variant:
            raise ValueError("zero_shot_variant must be a ToneEmb variant")


SECTIONS = {"data": DataConfig, "encoder": EncoderConfig, "generator": GCNConfig,
            "train": TrainConfig, "experiment": ExperimentConfig}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    generator: GCNConfig = field(default_factory=GCNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out": self.out}
        for name in SECTIONS:
            d[name] = json.loads(json.dumps(dataclasses.asdict(getattr(self, name))))
        g = d["generator"]
        if g["dilations"] == [2**i for i in range(g["num_layers"])]:
            g["dilations"] = None  # default schedule follows num_layers
        return d

    def section_hash(self, *names: str, extra=None) -> str:
        d = self.to_dict()
        payload = {"seed": self.seed, **{n: d[n] for n in names}, "extra": extra}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _build_section(name: str, cls, values) -> object:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section {name!r}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from e


def from_dict(d: Optional[dict], base: Optional[RunConfig] = None) -> RunConfig:
    """Overlay ``d`` on ``base`` (defaults when omitted), rejecting unknown keys."""
    d = dict(d or {})
    unknown = sorted(set(d) - {"seed", "out", *SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    merged = (base or RunConfig()).to_dict()
    for k, v in d.items():
        if k in SECTIONS:
            if v is not None and not isinstance(v, dict):
                raise ConfigError(f"section {k!r} must be a mapping")
            merged[k].update(v or {})
        else:
            merged[k] = v
    if not isinstance(merged["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(seed=merged["seed"], out=str(merged["out"]),
                    **{n: _build_section(n, cls, merged[n]) for n, cls in SECTIONS.items()})
    # the global seed drives every stage
    cfg.encoder.seed = cfg.seed
    cfg.train.seed = cfg.seed
    return cfg


def load_config(path=None, base: Optional[RunConfig] = None, env=None) -> RunConfig:
    d = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    env = os.environ if env is None else env
    for var, keys in ENV_OVERRIDES.items():
        if not env.get(var):
            continue
        if len(keys) == 1:
            d[keys[0]] = env[var]
        else:
            d[keys[0]] = {**(d.get(keys[0]) or {}), keys[1]: env[var]}
    return from_dict(d, base)


def desk_config() -> RunConfig:
    """Desk-scale preset used by ``multiamp demo``: single-CPU friendly sizes."""
    return from_dict({
        "out": "runs/demo",
        "data": {"clean_seconds": 315.0},
        "encoder": {"steps": 300, "batch_size": 32, "steps_per_epoch": 100,
                    "num_random_tones": 120, "contents_per_tone": 6},
        "generator": {"num_layers": 10, "channels": 8},
        "train": {"batch_size": 12, "max_steps": 700, "crop_samples": 4096, "val_every": 100,
                  "patience": 5, "val_seconds": 1.0},
        "experiment": {"one_to_one_steps": 400, "one_to_one_batch_size": 6, "per_tone_count": None},
    })
