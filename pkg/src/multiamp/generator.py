"""Conditional gated convolutional generator with FiLM / concat conditioning.

Each layer: dilated conv -> tanh/sigmoid gate -> FiLM -> 1x1 conv -> + cropped
residual. The input is zero-padded once at the start; intermediate feature
maps are never padded, so every layer is shorter than its input and the
residual is cropped from the left (oldest samples dropped).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CONDITIONING_MODES = ("film", "concat", "none")
CONDITION_SOURCES = ("tone_embedding", "lut")


@dataclass
class GCNConfig:
    num_layers: int = 12
    channels: int = 16
    kernel_size: int = 3
    dilations: Optional[List[int]] = None  # default 2**l
    embedding_dim: int = 512
    condition_dim: int = 128
    film_head_depth: int = 10
    film_head_width: int = 12
    film_head_sharing: str = "per_layer"  # or "shared"
    conditioning_mode: str = "film"
    condition_source: str = "tone_embedding"
    num_luts: int = 9
    # tone embeddings are unit-norm; rescale so their entries have unit RMS like LUT rows
    embedding_scale: Optional[float] = None  # default sqrt(embedding_dim)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"unknown conditioning_mode {self.conditioning_mode!r}")
        if self.condition_source not in CONDITION_SOURCES:
            raise ValueError(f"unknown condition_source {self.condition_source!r}")
        if self.film_head_sharing not in ("per_layer", "shared"):
            raise ValueError(f"unknown film_head_sharing {self.film_head_sharing!r}")
        if self.film_head_depth < 1:
            raise ValueError("film_head_depth must be >= 1")
        if self.dilations is None:
            self.dilations = [2**i for i in range(self.num_layers)]
        if len(self.dilations) != self.num_layers:
            raise ValueError("len(dilations) must equal num_layers")
        if self.embedding_scale is None:
            self.embedding_scale = float(self.embedding_dim) ** 0.5

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def to_dict(self) -> dict:
        return asdict(self)


def film(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation ``gamma * F + beta``.

    ``features`` is (C, T) or (B, C, T); ``gamma``/``beta`` are (C,) or (B, C).
    """
    if gamma.shape != beta.shape:
        raise ValueError(f"gamma {tuple(gamma.shape)} and beta {tuple(beta.shape)} differ")
    channels = features.shape[-2]
    if gamma.shape[-1] != channels:
        raise ValueError(f"FiLM params have {gamma.shape[-1]} channels, features have {channels}")
    return gamma.unsqueeze(-1) * features + beta.unsqueeze(-1)


class LayerwiseMLP(nn.Module):
    """A stack of ``depth`` linear layers, one independent stack per GCN layer.

    Weights for all GCN layers are held in one tensor so a forward pass is a
    handful of batched matmuls instead of ``num_layers * depth`` small ones.
    """

    def __init__(self, num_stacks: int, in_dim: int, width: int, out_dim: int, depth: int):
        super().__init__()
        dims = [in_dim] + [width] * (depth - 1) + [out_dim]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = torch.empty(num_stacks, d_in, d_out)
            bound = 1.0 / d_in**0.5
            nn.init.uniform_(w, -bound, bound)
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.empty(num_stacks, 1, d_out).uniform_(-bound, bound)))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        # c: (B, in_dim) -> (S, B, out_dim)
        h = c.unsqueeze(0).expand(self.weights[0].shape[0], -1, -1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.baddbmm(b, h, w)
            if i < last:
                h = F.leaky_relu(h, 0.2)
        return h


class ConditionHeads(nn.Module):
    """Maps a condition vector to FiLM coefficients for every layer.

    A shared projection takes tone embeddings (512) to the condition width
    (128); LUT rows already live at the condition width and skip it. The final
    linear layer starts at zero weight with bias (1, 0) so FiLM begins as the
    identity.
    """

    def __init__(self, cfg: GCNConfig):
        super().__init__()
        self.cfg = cfg
        L, C = cfg.num_layers, cfg.channels
        if cfg.condition_source == "tone_embedding":
            self.projection = nn.Linear(cfg.embedding_dim, cfg.condition_dim)
        else:
            self.projection = None
        if cfg.film_head_sharing == "per_layer":
            self.mlp = LayerwiseMLP(L, cfg.condition_dim, cfg.film_head_width, 2 * C, cfg.film_head_depth)
        else:
            self.mlp = LayerwiseMLP(1, cfg.condition_dim, cfg.film_head_width, 2 * L * C, cfg.film_head_depth)
        with torch.no_grad():
            self.mlp.weights[-1].zero_()
            bias = self.mlp.biases[-1]
            bias.zero_()
            bias.view(bias.shape[0], 1, -1, 2 * C)[..., :C] = 1.0

    def condition(self, phi: torch.Tensor) -> torch.Tensor:
        expected = self.cfg.embedding_dim if self.projection is not None else self.cfg.condition_dim
        if phi.shape[-1] != expected:
            raise ValueError(f"condition has dim {phi.shape[-1]}, expected {expected}")
        return self.projection(phi) if self.projection is not None else phi

    def forward(self, phi: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(gamma, beta)``, each (B, L, C) (or (L, C) for an unbatched phi)."""
        squeeze = phi.dim() == 1
        if squeeze:
            phi = phi.unsqueeze(0)
        c = self.condition(phi)
        out = self.mlp(c)  # (S, B, 2C) or (1, B, 2LC)
        L, C = self.cfg.num_layers, self.cfg.channels
        if self.cfg.film_head_sharing == "per_layer":
            out = out.permute(1, 0, 2)
        else:
            out = out[0].reshape(-1, L, 2 * C)
        gamma, beta = out[..., :C], out[..., C:]
        if squeeze:
            gamma, beta = gamma[0], beta[0]
        return gamma, beta


class GatedLayer(nn.Module):
    def __init__(self, in_channels: int, channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.conv = nn.Conv1d(in_channels, 2 * channels, kernel_size, dilation=dilation)
        self.mix = nn.Conv1d(channels, channels, 1)

    @property
    def shrink(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    def forward(self, h, gamma=None, beta=None, cond=None):
        """``cond`` (B, D): time-constant extra input channels stacked under ``h``.

        A valid convolution over a constant channel is a constant, so those
        channels enter as a bias instead of being materialised along time.
        """
        if h.shape[-1] <= self.shrink:
            raise ValueError(
                f"input length {h.shape[-1]} too short for kernel span {self.shrink + 1}"
            )
        if cond is None:
            pre = self.conv(h)
        else:
            k = h.shape[1]
            w = self.conv.weight
            pre = F.conv1d(h, w[:, :k], self.conv.bias, dilation=self.dilation)
            pre = pre + (cond @ w[:, k:].sum(-1).T).unsqueeze(-1)
        a, b = pre.chunk(2, dim=1)
        z = torch.tanh(a) * torch.sigmoid(b)
        if gamma is not None:
            z = film(z, gamma, beta)
        z = self.mix(z)
        # concat-mode first layer: only the audio channel carries a residual
        residual = h if h.shape[1] == self.channels else h[:, :1]
        return z + residual[..., self.shrink:], z


class ConditionalGCN(nn.Module):
    """Gated convolutional generator ``G(x, phi)``."""

    def __init__(self, cfg: Optional[GCNConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or GCNConfig()
        mode = cfg.conditioning_mode
        in_ch = 1 + cfg.condition_dim if mode == "concat" else 1
        layers = []
        for d in cfg.dilations:
            layers.append(GatedLayer(in_ch, cfg.channels, cfg.kernel_size, d))
            in_ch = cfg.channels
        self.layers = nn.ModuleList(layers)
        self.output_mix = nn.Conv1d(cfg.channels * cfg.num_layers, 1, 1)

        self.heads = ConditionHeads(cfg) if mode == "film" else None
        if mode == "concat" and cfg.condition_source == "tone_embedding":
            self.projection = nn.Linear(cfg.embedding_dim, cfg.condition_dim)
        else:
            self.projection = None
        if mode != "none" and cfg.condition_source == "lut":
            self.lut = nn.Embedding(cfg.num_luts, cfg.condition_dim)
        else:
            self.lut = None

    @property
    def receptive_field(self) -> int:
        return self.cfg.receptive_field

    def lut_embedding(self, amp_index) -> torch.Tensor:
        """Learnable LUT row(s) for seen-amp index/indices."""
        if self.lut is None:
            raise ValueError("model has no LUT (condition_source is not 'lut')")
        idx = torch.as_tensor(amp_index, dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.cfg.num_luts):
            raise IndexError(
                f"amp index {idx.tolist()} outside LUT of {self.cfg.num_luts} seen amps"
            )
        return self.lut(idx)

    def resolve_condition(self, cond) -> Optional[torch.Tensor]:
        """Turn a raw condition (LUT index or embedding) into a (B, dim) tensor."""
        if self.cfg.conditioning_mode == "none":
            return None
        if cond is None:
            raise ValueError(f"{self.cfg.conditioning_mode} model requires a condition")
        if self.cfg.condition_source == "lut":
            if torch.is_tensor(cond) and cond.is_floating_point():
                raise ValueError("LUT-conditioned model expects an amp index, got an embedding")
            phi = self.lut_embedding(cond)
        else:
            if not (torch.is_tensor(cond) and cond.is_floating_point()):
                raise ValueError("tone-embedding model expects a float embedding tensor")
            if cond.shape[-1] != self.cfg.embedding_dim:
                raise ValueError(
                    f"condition has dim {cond.shape[-1]}, expected {self.cfg.embedding_dim}"
                )
            phi = cond * self.cfg.embedding_scale
        return phi if phi.dim() == 2 else phi.unsqueeze(0)

    def film_params(self, cond) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.heads is None:
            raise ValueError("model is not FiLM-conditioned")
        return self.heads(self.resolve_condition(cond))

    def concat_conditioning(self, x: torch.Tensor, cond) -> torch.Tensor:
        """Broadcast the condition along time and stack it under the audio channel.

        This is the literal concat input of the first layer; ``forward`` computes
        the same result without materialising the constant channels.
        """
        if self.cfg.conditioning_mode != "concat":
            raise ValueError("concat_conditioning requires conditioning_mode='concat'")
        phi = self.resolve_condition(cond)
        if self.projection is not None:
            phi = self.projection(phi)
        if x.dim() == 2:
            x = x.unsqueeze(1)
        phi = phi.expand(x.shape[0], -1)
        return torch.cat([x, phi.unsqueeze(-1).expand(-1, -1, x.shape[-1])], dim=1)

    def forward(self, x: torch.Tensor, cond=None, pad: bool = True) -> torch.Tensor:
        """Generate the wet waveform.

        ``x`` is (T,), (B, T) or (B, 1, T). With ``pad=True`` the output has the
        same length as ``x``; with ``pad=False`` the caller supplies the
        ``receptive_field - 1`` samples of history and gets ``T - rf + 1`` back.
        """
        shape = x.shape
        if x.dim() == 1:
            x = x.view(1, 1, -1)
        elif x.dim() == 2:
            x = x.unsqueeze(1)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite samples in generator input")
        if pad:
            x = F.pad(x, (self.receptive_field - 1, 0))
        elif x.shape[-1] < self.receptive_field:
            raise ValueError(f"unpadded input must be at least {self.receptive_field} samples")

        mode = self.cfg.conditioning_mode
        gamma = beta = None
        if mode == "film":
            gamma, beta = self.film_params(cond)
            if gamma.shape[0] == 1 and x.shape[0] > 1:
                gamma = gamma.expand(x.shape[0], -1, -1)
                beta = beta.expand(x.shape[0], -1, -1)
        elif mode == "concat":
            phi = self.resolve_condition(cond)
            if self.projection is not None:
                phi = self.projection(phi)
            concat = phi.expand(x.shape[0], -1)

        out_len = x.shape[-1] - self.receptive_field + 1
        h = x
        skips = []
        for l, layer in enumerate(self.layers):
            if gamma is not None:
                h, skip = layer(h, gamma[:, l], beta[:, l])
            elif mode == "concat" and l == 0:
                h, skip = layer(h, cond=concat)
            else:
                h, skip = layer(h)
            skips.append(skip[..., -out_len:])
        y = self.output_mix(torch.cat(skips, dim=1))
        if len(shape) == 1:
            return y.view(-1)
        if len(shape) == 2:
            return y[:, 0]
        return y


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_summary(model: ConditionalGCN) -> str:
    """Human-readable per-module parameter breakdown with the exact total."""
    lines = [f"{'module':<24}{'params':>10}"]
    for name, child in model.named_children():
        lines.append(f"{name:<24}{count_parameters(child):>10}")
    lines.append(f"{'total':<24}{count_parameters(model):>10}")
    lines.append(f"receptive field: {model.receptive_field} samples")
    return "\n".join(lines)


def generate(model: ConditionalGCN, x, cond=None, block: int = 441000) -> torch.Tensor:
    """Run ``model`` over a long 1-D signal in blocks.

    Each block gets the ``receptive_field - 1`` preceding samples as history,
    so the result equals a single padded forward pass.
    """
    x = torch.as_tensor(x, dtype=torch.float32).reshape(-1)
    rf = model.receptive_field
    xpad = F.pad(x, (rf - 1, 0))
    outs = []
    model.eval()
    with torch.no_grad():
        for s in range(0, x.numel(), block):
            seg = xpad[s: s + block + rf - 1]
            outs.append(model(seg.view(1, -1), cond, pad=False)[0])
    return torch.cat(outs) if outs else x.new_zeros(0)
