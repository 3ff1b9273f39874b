"""Four-phase pyramid transformer encoder with spatial-reduction attention.

Phases 2-4 carry an extra learnable counter token that attends over the patch
tokens; its final state is handed to the count heads in the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    index: int  # 1..4
    patch_stride: int
    channels: int
    reduction_ratio: int = 1
    num_heads: int = 1
    depth: int = 2
    mlp_ratio: float = 4.0
    has_counter_token: bool = False


def make_phases(widths=(128, 256, 512, 1024), depths=(2, 2, 2, 2), heads=(2, 4, 8, 16),
                sr_ratios=(8, 4, 2, 1), mlp_ratios=(4, 4, 4, 4)) -> tuple[PhaseConfig, ...]:
    phases = []
    for i in range(4):
        phases.append(PhaseConfig(
            index=i + 1,
            patch_stride=4 if i == 0 else 2,
            channels=widths[i],
            reduction_ratio=sr_ratios[i],
            num_heads=heads[i],
            depth=depths[i],
            mlp_ratio=mlp_ratios[i],
            has_counter_token=i > 0,
        ))
    return tuple(phases)


class PatchEmbed(nn.Module):
    """Strided projection + LayerNorm, positional embedding, optional counter token."""

    def __init__(self, in_channels: int, phase: PhaseConfig, ref_grid: int):
        super().__init__()
        self.stride = phase.patch_stride
        self.proj = nn.Conv2d(in_channels, phase.channels, self.stride, self.stride)
        self.norm = nn.LayerNorm(phase.channels)
        self.ref_grid = ref_grid
        self.pos_embed = nn.Parameter(torch.zeros(1, ref_grid * ref_grid, phase.channels))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.counter_token = None
        if phase.has_counter_token:
            self.counter_token = nn.Parameter(torch.zeros(1, 1, phase.channels))
            self.counter_pos = nn.Parameter(torch.zeros(1, 1, phase.channels))
            nn.init.trunc_normal_(self.counter_pos, std=0.02)

    def _pos(self, h: int, w: int) -> torch.Tensor:
        if h == w == self.ref_grid:
            return self.pos_embed
        g = self.ref_grid
        pe = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=(h, w), mode="bilinear", align_corners=False)
        return pe.flatten(2).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        _, _, H, W = x.shape
        if H % self.stride or W % self.stride:
            raise ConfigError(f"input {H}x{W} not divisible by patch stride {self.stride}")
        x = self.proj(x)
        B, C, h, w = x.shape
        x = self.norm(x.flatten(2).transpose(1, 2)) + self._pos(h, w)
        if self.counter_token is not None:
            tok = (self.counter_token + self.counter_pos).expand(B, -1, -1)
            x = torch.cat([x, tok], dim=1)
        return x, h, w


class SpatialReductionAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, sr_ratio: int = 1):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        B, N, C = x.shape
        n_extra = N - h * w  # 0 or 1 (counter token, always last)
        nh = self.num_heads
        q = self.q(x).reshape(B, N, nh, C // nh).transpose(1, 2)
        kv_in = x
        if self.sr_ratio > 1:
            grid = x[:, :h * w].transpose(1, 2).reshape(B, C, h, w)
            reduced = self.sr(grid).flatten(2).transpose(1, 2)
            kv_in = self.sr_norm(torch.cat([reduced, x[:, h * w:]], dim=1) if n_extra else reduced)
        kv = self.kv(kv_in).reshape(B, -1, 2, nh, C // nh).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class SRABlock(nn.Module):
    """Pre-norm transformer block: SRA then MLP, both residual."""

    def __init__(self, phase: PhaseConfig):
        super().__init__()
        dim = phase.channels
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, phase.num_heads, phase.reduction_ratio)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * phase.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x))


class EncoderPhase(nn.Module):
    def __init__(self, in_channels: int, phase: PhaseConfig, ref_grid: int):
        super().__init__()
        self.config = phase
        self.embed = PatchEmbed(in_channels, phase, ref_grid)
        self.blocks = nn.ModuleList(SRABlock(phase) for _ in range(phase.depth))
        self.norm = nn.LayerNorm(phase.channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        tokens, h, w = self.embed(x)
        for blk in self.blocks:
            tokens = blk(tokens, h, w)
        tokens = self.norm(tokens)
        B, _, C = tokens.shape
        fmap = tokens[:, :h * w].transpose(1, 2).reshape(B, C, h, w)
        counter = tokens[:, h * w] if self.config.has_counter_token else None
        return fmap, counter


@dataclass
class FeaturePyramid:
    features: list[torch.Tensor]  # S1..S4, each (B, C_i, H/2^(i+1), W/2^(i+1))
    counter_tokens: list[torch.Tensor]  # phases 2..4, each (B, C_i)


class PyramidEncoder(nn.Module):
    def __init__(self, phases: tuple[PhaseConfig, ...], in_channels: int = 3, ref_size: int = 256):
        super().__init__()
        for a, b in zip(phases, phases[1:]):
            if b.patch_stride != 2:
                raise ConfigError("phases 2-4 must halve the resolution")
        self.phases = nn.ModuleList()
        c_in, total_stride = in_channels, 1
        for p in phases:
            total_stride *= p.patch_stride
            self.phases.append(EncoderPhase(c_in, p, max(ref_size // total_stride, 1)))
            c_in = p.channels
        self.total_stride = total_stride

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        H, W = x.shape[-2:]
        if H % self.total_stride or W % self.total_stride:
            raise ConfigError(f"input {H}x{W} must be divisible by {self.total_stride}")
        feats, tokens = [], []
        for phase in self.phases:
            x, tok = phase(x)
            feats.append(x)
            if tok is not None:
                tokens.append(tok)
        return FeaturePyramid(feats, tokens)
