"""Single-resolution STFT and the complex-valued spectral loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    hop: int = 512
    window: str = "hann"
    center: bool = False
    reduction: str = "magnitude"  # "magnitude" | "l1_parts"

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"window length must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, {self.n_fft}], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.reduction not in ("magnitude", "l1_parts"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def stft(x, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """One-sided Hann-windowed STFT, frames starting at sample 0.

    Returns a complex tensor of shape (..., n_fft // 2 + 1, frames).
    """
    x = _as_tensor(x)
    if x.shape[-1] < cfg.n_fft:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({cfg.n_fft})")
    window = torch.hann_window(cfg.n_fft, dtype=x.dtype, device=x.device)
    batch_shape = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, x.shape[-1]),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        window=window,
        center=cfg.center,
        return_complex=True,
    )
    return spec.reshape(*batch_shape, *spec.shape[-2:])


def complex_stft_loss(y_hat, y, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Mean over (frame, bin) of the complex magnitude of the spectral difference.

    Phase-sensitive: ``loss(y, -y) == 2 * mean|STFT(y)|``. With
    ``cfg.reduction == "l1_parts"`` the real and imaginary parts are penalised
    separately (|Re| + |Im|) instead.
    """
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    # STFT is linear, so transform the difference once
    diff = stft(y_hat - y, cfg)
    if cfg.reduction == "l1_parts":
        return (diff.real.abs() + diff.imag.abs()).mean()
    return diff.abs().mean()
