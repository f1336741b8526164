"""Versioned checkpoint container shared by the encoder and generator."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def architecture_signature(model: nn.Module) -> list:
    return [(name, tuple(t.shape)) for name, t in model.state_dict().items()]


def architecture_hash(model: nn.Module) -> str:
    h = hashlib.sha256(repr(architecture_signature(model)).encode())
    return h.hexdigest()[:16]


def weights_hash(model: nn.Module) -> str:
    """Content hash of every tensor in the state dict (bit-exact)."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def rng_state(np_rng: Optional[np.random.Generator] = None) -> dict:
    state = {"torch": torch.get_rng_state()}
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return state


def restore_rng(state: dict, np_rng: Optional[np.random.Generator] = None) -> None:
    torch.set_rng_state(state["torch"])
    if np_rng is not None and "numpy" in state:
        np_rng.bit_generator.state = state["numpy"]


def save_checkpoint(path, kind: str, model: nn.Module, config: dict,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    rng: Optional[dict] = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture_hash": architecture_hash(model),
        "architecture": [[n, list(s)] for n, s in architecture_signature(model)],
        "config": config,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng,
        "extra": extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, model: Optional[nn.Module] = None, kind: Optional[str] = None) -> dict:
    """Load a checkpoint; if ``model`` is given, verify its architecture and load weights."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    if model is not None:
        if payload["architecture_hash"] != architecture_hash(model):
            saved = {n: tuple(s) for n, s in payload["architecture"]}
            mine = dict(architecture_signature(model))
            for name in list(mine) + [n for n in saved if n not in mine]:
                if saved.get(name) != mine.get(name):
                    raise CheckpointError(
                        f"{path}: layer {name!r} mismatch (checkpoint {saved.get(name)}, "
                        f"model {mine.get(name)})"
                    )
            raise CheckpointError(f"{path}: architecture hash mismatch")
        model.load_state_dict(payload["state_dict"])
    return payload
