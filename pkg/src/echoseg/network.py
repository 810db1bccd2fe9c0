"""2-D V-Net variant with residual blocks, GN8, spatial dropout and deep supervision."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "echoseg-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    n_classes: int = 15
    levels: int = 5
    base_channels: int = 16
    convs_per_block: tuple = (1, 2, 3, 3, 3)
    kernel_size: int = 5
    gn_groups: int = 8
    dropout_rate: float = 0.2
    deep_supervision_levels: int = 2
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "convs_per_block", tuple(int(k) for k in self.convs_per_block))
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if len(self.convs_per_block) != self.levels:
            raise ConfigurationError(
                f"convs_per_block has {len(self.convs_per_block)} entries for {self.levels} levels"
            )
        if any(k < 1 for k in self.convs_per_block):
            raise ConfigurationError("every block needs at least one convolution")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd to preserve shape")
        for c in self.channels:
            if c % self.gn_groups:
                raise ConfigurationError(f"{c} channels are not divisible by {self.gn_groups} groups")
        if not 0 <= self.deep_supervision_levels <= self.levels - 1:
            raise ConfigurationError(
                f"deep_supervision_levels must lie in [0, {self.levels - 1}] for {self.levels} levels"
            )
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1]")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs_per_block"] = list(self.convs_per_block)
        return d


class NetworkOutput(NamedTuple):
    main_logits: torch.Tensor
    aux_logits: list

    @property
    def all_logits(self) -> list:
        return [self.main_logits, *self.aux_logits]


class SpatialDropout(nn.Module):
    """Zeroes whole channels; masks come from ``generator`` when one is attached."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.generator = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        if self.rate >= 1.0:
            return torch.zeros_like(x)
        keep = torch.full((x.shape[0], x.shape[1], 1, 1), 1.0 - self.rate, dtype=x.dtype, device=x.device)
        mask = torch.bernoulli(keep, generator=self.generator)
        return x * mask / (1.0 - self.rate)


def _norm_act(channels, cfg: NetworkConfig):
    return [nn.GroupNorm(cfg.gn_groups, channels), nn.LeakyReLU(cfg.negative_slope)]


class ResidualBlock(nn.Module):
    """k shape-preserving convolutions (conv, GN, activation) then spatial dropout, plus a shortcut."""

    def __init__(self, in_ch: int, out_ch: int, n_convs: int, cfg: NetworkConfig):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, cfg.kernel_size, padding=cfg.kernel_size // 2))
            layers.extend(_norm_act(out_ch, cfg))
        self.body = nn.Sequential(*layers)
        self.dropout = SpatialDropout(cfg.dropout_rate)
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.dropout(self.body(x)) + self.shortcut(x)


class VNet2d(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        ch = cfg.channels
        ks = cfg.convs_per_block
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(cfg.levels):
            self.encoders.append(ResidualBlock(cfg.in_channels if i == 0 else ch[i], ch[i], ks[i], cfg))
            if i < cfg.levels - 1:
                self.downs.append(nn.Sequential(nn.Conv2d(ch[i], ch[i + 1], 2, stride=2), *_norm_act(ch[i + 1], cfg)))
        # decoders[i] produces level i (i = levels-2 .. 0)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(cfg.levels - 1):
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2), *_norm_act(ch[i], cfg)))
            self.decoders.append(ResidualBlock(2 * ch[i], ch[i], ks[i], cfg))
        self.head = nn.Conv2d(ch[0], cfg.n_classes, 1)
        # auxiliary heads on the coarsest decoder levels
        self.aux_levels = list(range(cfg.levels - 2, cfg.levels - 2 - cfg.deep_supervision_levels, -1))
        self.aux_heads = nn.ModuleDict({str(i): nn.Conv2d(ch[i], cfg.n_classes, 1) for i in self.aux_levels})

    def set_generator(self, generator):
        for m in self.modules():
            if isinstance(m, SpatialDropout):
                m.generator = generator

    def forward(self, x) -> NetworkOutput:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected B x {cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise ConfigurationError(f"spatial size {h}x{w} is not divisible by {cfg.divisor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < cfg.levels - 1:
                skips.append(x)
                x = self.downs[i](x)
        aux = []
        for i in range(cfg.levels - 2, -1, -1):
            x = self.decoders[i](torch.cat([self.ups[i](x), skips[i]], dim=1))
            if str(i) in self.aux_heads:
                logits = self.aux_heads[str(i)](x)
                aux.append(F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False))
        return NetworkOutput(self.head(x), aux)


def build(config: NetworkConfig, seed: int | None = None) -> VNet2d:
    if seed is not None:
        torch.manual_seed(seed)
    return VNet2d(config)


def forward(model: VNet2d, batch, generator=None) -> NetworkOutput:
    """Run the model; ``generator`` drives dropout masks in training mode."""
    if generator is not None:
        model.set_generator(generator)
    return model(batch)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def group_normalize(x, groups: int, scale=None, bias=None, eps: float = 1e-5):
    """Per-sample group normalization followed by a per-channel affine map."""
    b, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels are not divisible by {groups} groups")
    g = x.reshape(b, groups, -1)
    mean = g.mean(dim=-1, keepdim=True)
    var = g.var(dim=-1, unbiased=False, keepdim=True)
    out = ((g - mean) / torch.sqrt(var + eps)).reshape(x.shape)
    shape = (1, c) + (1,) * (x.ndim - 2)
    if scale is not None:
        out = out * scale.reshape(shape)
    if bias is not None:
        out = out + bias.reshape(shape)
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: VNet2d, path, meta: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: NetworkConfig | None = None):
    """Return ``(model, config, meta)``; the model is in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not an echoseg checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = NetworkConfig(**payload["network"])
    if expected is not None and expected != cfg:
        raise ConfigurationError(f"checkpoint network config {cfg} does not match expected {expected}")
    model = VNet2d(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload.get("meta", {})
