"""Full encoder-decoder counting network and its configuration presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import torch
from torch import nn

from .decoder import CAFF_VARIANTS, Decoder, parse_order
from .encoder import ConfigError, PhaseConfig, PyramidEncoder, make_phases


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (128, 256, 512, 1024)
    depths: tuple[int, ...] = (3, 4, 6, 3)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratios: tuple[float, ...] = (8, 8, 4, 4)
    taus: tuple[int, ...] = (1, 2, 3)
    perturb_order: tuple[str, ...] = ("P1", "P2", "P3")
    caff_variant: str = "ca"
    dropout_rate: float = 0.3
    ref_size: int = 256

    def __post_init__(self):
        for name in ("widths", "depths", "heads", "sr_ratios", "mlp_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs 4 entries")
        if len(self.taus) != 3:
            raise ConfigError("taus needs 3 entries")
        parse_order(self.perturb_order)
        if self.caff_variant not in CAFF_VARIANTS:
            raise ConfigError(f"unknown caff_variant {self.caff_variant!r}")

    @property
    def phases(self) -> tuple[PhaseConfig, ...]:
        return make_phases(self.widths, self.depths, self.heads, self.sr_ratios, self.mlp_ratios)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# "full": PVT-small depths/MLP ratios at the 128..1024 widths.
# "desk": same widths, two blocks per phase (shape tests).
# "tiny": quarter widths, one block per phase; CPU training experiments.
PRESETS = {
    "full": ModelConfig(),
    # CPU-sized: quarter widths, two blocks per phase
    "desk": ModelConfig(widths=(32, 64, 128, 256), depths=(2, 2, 2, 2), heads=(1, 2, 4, 8),
                        mlp_ratios=(4, 4, 4, 4)),
    # unit tests: one block per phase
    "tiny": ModelConfig(widths=(32, 64, 128, 256), depths=(1, 1, 1, 1), heads=(1, 2, 4, 8),
                        mlp_ratios=(4, 4, 4, 4)),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


class Prediction(NamedTuple):
    maps: torch.Tensor  # (B, 3, H/4, W/4), scales D1..D3
    counts: torch.Tensor  # (B, 3), token counts t1..t3


class TreeCounter(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.encoder = PyramidEncoder(config.phases, ref_size=config.ref_size)
        self.decoder = Decoder(config.widths, config.widths[:3], config.taus,
                               config.perturb_order, config.caff_variant, config.dropout_rate)

    def forward(self, images: torch.Tensor, generator: torch.Generator | None = None) -> Prediction:
        pyr = self.encoder(images)
        maps, counts = self.decoder(pyr, generator)
        return Prediction(maps, counts)

    def set_perturbation(self, enabled: bool) -> None:
        """Toggle the perturbation layers independently of train/eval mode."""
        for head in list(self.decoder.density_heads) + list(self.decoder.count_heads):
            head.perturb_enabled = enabled
