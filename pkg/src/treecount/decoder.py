"""Coarse-to-fine fusion decoder, perturbed density heads and token count heads."""

from __future__ import annotations

import enum
import math

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConfigError, FeaturePyramid

NOISE_BOUND = 0.3
MASK_RANGE = (0.7, 0.9)
MASK_FRACTION_CAP = 0.3


class PerturbKind(str, enum.Enum):
    FEATURE_NOISE = "P1"
    FEATURE_MASK = "P2"
    SPATIAL_DROPOUT = "P3"


DEFAULT_ORDER = (PerturbKind.FEATURE_NOISE, PerturbKind.FEATURE_MASK, PerturbKind.SPATIAL_DROPOUT)
CAFF_VARIANTS = ("ca", "none", "sa", "sa+ca", "off")


def parse_order(order) -> tuple[PerturbKind, ...]:
    if isinstance(order, str):
        order = [s for s in order.replace(" ", "").split(",") if s]
    kinds = tuple(PerturbKind(k) if not isinstance(k, PerturbKind) else k for k in order)
    if sorted(k.value for k in kinds) != ["P1", "P2", "P3"]:
        raise ConfigError(f"perturbation order must be a permutation of P1,P2,P3, got {order}")
    return kinds


def masked_count(n: int, eps: float) -> int:
    """Number of most-active entries zeroed by feature masking at threshold ``eps``.

    Entries are ranked into an empirical CDF F' = rank / n; those with F' > eps
    are masked, capped at 30% of n and never fewer than one.
    """
    k = n - math.floor(eps * n + 1e-9)
    return max(1, min(k, math.floor(MASK_FRACTION_CAP * n + 1e-9)))


def _topk_mask(scores: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Keep-mask (1 = keep) over the last dim of ``scores`` for per-row thresholds."""
    B, n = scores.shape
    keep = torch.ones_like(scores)
    for b in range(B):
        k = masked_count(n, float(eps[b]))
        idx = torch.topk(scores[b], k).indices
        keep[b, idx] = 0.0
    return keep


def perturb(x: torch.Tensor, kind: PerturbKind | str, training: bool = True,
            generator: torch.Generator | None = None, seed: int | None = None,
            noise_bound: float = NOISE_BOUND, mask_range: tuple[float, float] = MASK_RANGE,
            dropout_rate: float = 0.3) -> torch.Tensor:
    """Apply one of the three decoder perturbations to a (B, C, H, W) map or (B, C) vector.

    Identity when ``training`` is False.
    """
    kind = PerturbKind(kind)
    if not training:
        return x
    if x.numel() == 0:
        raise ValueError("cannot perturb an empty feature")
    if seed is not None:
        generator = torch.Generator().manual_seed(seed)
    B = x.shape[0]

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=x.dtype).to(x.device)

    if kind is PerturbKind.FEATURE_NOISE:
        xi = (rand(*x.shape) * 2 - 1) * noise_bound
        return x + x * xi
    if kind is PerturbKind.FEATURE_MASK:
        lo, hi = mask_range
        eps = lo + (hi - lo) * rand(B)
        if x.dim() == 4:
            scores = x.detach().sum(dim=1).flatten(1)
            keep = _topk_mask(scores, eps).reshape(B, 1, *x.shape[2:])
        else:
            keep = _topk_mask(x.detach(), eps)
        return x * keep
    if not 0 <= dropout_rate < 1:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    shape = (B, x.shape[1], 1, 1) if x.dim() == 4 else x.shape
    keep = (rand(*shape) >= dropout_rate).to(x.dtype)
    return x * keep / (1.0 - dropout_rate)


def conv_bn_relu(c_in: int, c_out: int, k: int = 3) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, k, padding=k // 2, bias=False),
                         nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style channel weights in (0, 1)."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(s))


class CAFF(nn.Module):
    """Fuse an upsampled coarse decoder feature with a re-weighted fine encoder feature."""

    def __init__(self, coarse_channels: int, fine_channels: int, out_channels: int,
                 variant: str = "ca"):
        super().__init__()
        if variant not in CAFF_VARIANTS:
            raise ConfigError(f"unknown CAFF variant {variant!r}; expected one of {CAFF_VARIANTS}")
        self.variant = variant
        if variant == "off":
            self.coarse = nn.Conv2d(coarse_channels, out_channels, 1)
            self.fine = nn.Conv2d(fine_channels, out_channels, 1)
            return
        self.coarse = nn.Sequential(conv_bn_relu(coarse_channels, out_channels),
                                    conv_bn_relu(out_channels, out_channels))
        self.fine = nn.Sequential(conv_bn_relu(fine_channels, out_channels),
                                  conv_bn_relu(out_channels, out_channels))
        self.ca = ChannelAttention(out_channels) if "ca" in variant else None
        self.sa = SpatialAttention() if "sa" in variant else None

    def forward(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        if coarse.shape[-2] * 2 != fine.shape[-2] or coarse.shape[-1] * 2 != fine.shape[-1]:
            raise ValueError(f"coarse {tuple(coarse.shape[-2:])} is not half of fine "
                             f"{tuple(fine.shape[-2:])}")
        up = F.interpolate(coarse, scale_factor=2, mode="bilinear", align_corners=False)
        c = self.coarse(up)
        f = self.fine(fine)
        if self.variant not in ("off", "none"):
            if self.sa is not None:
                f = f * self.sa(f)
            if self.ca is not None:
                f = f * self.ca(f)[:, :, None, None]
        return f + c


def halving_schedule(channels: int, tau: int) -> list[int]:
    """Channel widths through ``tau`` blocks: halve tau-1 times, then map to 1."""
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    widths = [channels]
    for _ in range(tau - 1):
        if widths[-1] < 2:
            raise ConfigError(f"cannot halve {channels} channels {tau - 1} times")
        widths.append(widths[-1] // 2)
    widths.append(1)
    return widths


class DensityHead(nn.Module):
    """Perturb -> upsample -> tau conv blocks ending in a single ReLU'd channel."""

    def __init__(self, channels: int, upsample: int, tau: int, kind: PerturbKind,
                 dropout_rate: float = 0.3):
        super().__init__()
        self.kind = PerturbKind(kind)
        self.upsample = upsample
        self.dropout_rate = dropout_rate
        self.perturb_enabled = True
        widths = halving_schedule(channels, tau)
        blocks = [conv_bn_relu(a, b) for a, b in zip(widths[:-2], widths[1:-1])]
        blocks.append(nn.Sequential(nn.Conv2d(widths[-2], 1, 1), nn.ReLU()))
        self.blocks = nn.Sequential(*blocks)
        self.channels = channels

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        x = perturb(x, self.kind, self.training and self.perturb_enabled, generator,
                    dropout_rate=self.dropout_rate)
        if self.upsample > 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return self.blocks(x)[:, 0]


class CountHead(nn.Module):
    """Perturbed counter token -> scalar tree count."""

    def __init__(self, channels: int, kind: PerturbKind, dropout_rate: float = 0.3):
        super().__init__()
        self.kind = PerturbKind(kind)
        self.dropout_rate = dropout_rate
        self.perturb_enabled = True
        self.proj = nn.Linear(channels, 1)
        self.channels = channels

    def forward(self, token: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if token.shape[-1] != self.channels:
            raise ValueError(f"token width {token.shape[-1]} != {self.channels}")
        token = perturb(token, self.kind, self.training and self.perturb_enabled, generator,
                        dropout_rate=self.dropout_rate)
        return self.proj(token)[:, 0]


class Decoder(nn.Module):
    def __init__(self, enc_widths=(128, 256, 512, 1024), dec_widths=(128, 256, 512),
                 taus=(1, 2, 3), order=DEFAULT_ORDER, caff_variant: str = "ca",
                 dropout_rate: float = 0.3):
        super().__init__()
        order = parse_order(order)
        self.fuse = nn.ModuleList([
            CAFF(dec_widths[1], enc_widths[0], dec_widths[0], caff_variant),
            CAFF(dec_widths[2], enc_widths[1], dec_widths[1], caff_variant),
            CAFF(enc_widths[3], enc_widths[2], dec_widths[2], caff_variant),
        ])
        self.density_heads = nn.ModuleList(
            DensityHead(dec_widths[k], 2 ** k, taus[k], order[k], dropout_rate) for k in range(3))
        self.count_heads = nn.ModuleList(
            CountHead(enc_widths[k + 1], order[k], dropout_rate) for k in range(3))

    def forward(self, pyr: FeaturePyramid, generator: torch.Generator | None = None):
        s1, s2, s3, s4 = pyr.features
        d3 = self.fuse[2](s4, s3)
        d2 = self.fuse[1](d3, s2)
        d1 = self.fuse[0](d2, s1)
        maps = torch.stack([head(f, generator) for head, f in zip(self.density_heads, (d1, d2, d3))],
                           dim=1)
        counts = torch.stack([head(t, generator) for head, t in zip(self.count_heads,
                                                                     pyr.counter_tokens)], dim=1)
        return maps, counts
