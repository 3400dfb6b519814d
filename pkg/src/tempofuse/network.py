"""Symmetric multi-level encoder-decoder with RCU, CRP and multi-scale fusion blocks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_CHANNELS = 3
# fixed affine input standardization for [0, 1] scans
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


@dataclass(frozen=True)
class NetworkConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: int = 64
    num_classes: int = 5
    crp_stages: int = 2
    crp_pool_size: int = 5
    input_channels: int = INPUT_CHANNELS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.num_levels < 2:
            raise ValueError("need at least two encoder levels")
        if min(self.encoder_channels) < 1 or self.decoder_channels < 1:
            raise ValueError("all channel widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.crp_stages < 1:
            raise ValueError("crp_stages must be >= 1")
        if self.crp_pool_size < 1 or self.crp_pool_size % 2 == 0:
            raise ValueError("crp_pool_size must be a positive odd integer")
        if self.input_channels != INPUT_CHANNELS:
            raise ValueError("input_channels is fixed at 3")

    @property
    def num_levels(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: (tuple(v) if k == "encoder_channels" else v) for k, v in d.items()})


PRESETS = {
    # K=2 model for gradient checks
    "micro": NetworkConfig(encoder_channels=(4, 8), decoder_channels=4, num_classes=3),
    "tiny": NetworkConfig(encoder_channels=(8, 16, 32, 64), decoder_channels=32),
    "desk": NetworkConfig(encoder_channels=(16, 32, 64, 128), decoder_channels=64),
    # ResNet-50 stage widths; decoder width follows light-weight RefineNet
    "resnet50": NetworkConfig(encoder_channels=(256, 512, 1024, 2048), decoder_channels=256),
}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    d = base.to_dict()
    d.update(overrides)
    return NetworkConfig.from_dict(d)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=True)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1, bias=True)


def _check_channels(x: torch.Tensor, channels: int, who: str):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{who} expects (B, {channels}, H, W), got {tuple(x.shape)}")


class RCU(nn.Module):
    """Residual convolutional unit: x + conv(relu(conv(relu(x)))), no normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        _check_channels(x, self.channels, "RCU")
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class CRP(nn.Module):
    """Chained residual pooling.

    Each stage max-pools (stride 1, same padding) the previous stage's output
    and convolves it; all stage outputs are summed onto relu(x).
    """

    def __init__(self, channels: int, stages: int = 2, pool_size: int = 5):
        super().__init__()
        self.channels = channels
        self.pool_size = pool_size
        self.convs = nn.ModuleList(conv3x3(channels, channels) for _ in range(stages))

    def forward(self, x):
        _check_channels(x, self.channels, "CRP")
        out = F.relu(x)
        h = out
        for conv in self.convs:
            h = F.max_pool2d(h, self.pool_size, stride=1, padding=self.pool_size // 2)
            h = conv(h)
            out = out + h
        return out


class MFB(nn.Module):
    """Multi-scale fusion: conv(fine) + bilinear_upsample_x2(conv(coarse))."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fine_conv = conv1x1(channels, channels)
        self.coarse_conv = conv1x1(channels, channels)

    def forward(self, coarse, fine):
        _check_channels(coarse, self.channels, "MFB coarse input")
        _check_channels(fine, self.channels, "MFB fine input")
        up = F.interpolate(self.coarse_conv(coarse), scale_factor=2,
                           mode="bilinear", align_corners=False)
        if up.shape[-2:] != fine.shape[-2:]:
            raise ValueError(
                f"MFB: upsampled coarse map {tuple(up.shape[-2:])} does not match "
                f"fine map {tuple(fine.shape[-2:])}")
        return self.fine_conv(fine) + up


class EncoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = conv3x3(cin, cout, stride=2)
        self.rcu = RCU(cout)

    def forward(self, x):
        return self.rcu(F.relu(self.down(x)))


class DecoderLevel(nn.Module):
    def __init__(self, enc_channels: int, width: int, crp_stages: int, pool_size: int,
                 deepest: bool):
        super().__init__()
        self.adapt = conv1x1(enc_channels, width)
        self.rcu_in = RCU(width)
        self.mfb = None if deepest else MFB(width)
        self.crp = CRP(width, crp_stages, pool_size)
        self.rcu_out = RCU(width)

    def forward(self, enc, coarser=None):
        x = self.rcu_in(self.adapt(enc))
        if self.mfb is not None:
            x = self.mfb(coarser, x)
        return self.rcu_out(self.crp(x))


class SegmentationNet(nn.Module):
    """K-level encoder-decoder producing per-pixel class logits at input size."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = (config.input_channels,) + config.encoder_channels
        self.encoder = nn.ModuleList(
            EncoderLevel(widths[k], widths[k + 1]) for k in range(config.num_levels))
        self.decoder = nn.ModuleList(
            DecoderLevel(c, config.decoder_channels, config.crp_stages, config.crp_pool_size,
                         deepest=(k == config.num_levels - 1))
            for k, c in enumerate(config.encoder_channels))
        self.head = conv1x1(config.decoder_channels, config.num_classes)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    bound = 1.0 / math.sqrt(fan_in)
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.uniform_(-bound, bound, generator=gen)

    @property
    def divisor(self) -> int:
        return 2 ** self.config.num_levels

    def pad(self, x):
        """Zero-pad symmetrically to a multiple of 2**K; returns the padded map and crop box."""
        h, w = x.shape[-2:]
        ph = (-h) % self.divisor
        pw = (-w) % self.divisor
        top, left = ph // 2, pw // 2
        if ph or pw:
            x = F.pad(x, (left, pw - left, top, ph - top))
        return x, (top, top + h, left, left + w)

    def encode(self, x) -> list[torch.Tensor]:
        """Feature pyramid, shallowest first; ``x`` must already be padded."""
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        _check_channels(x, self.config.input_channels, "encoder")
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"encoder input {h}x{w} is not divisible by {self.divisor}")
        feats = []
        x = (x - INPUT_MEAN) * INPUT_SCALE
        for level in self.encoder:
            x = level(x)
            feats.append(x)
        return feats

    def decode(self, feats):
        out = None
        for k in reversed(range(self.config.num_levels)):
            out = self.decoder[k](feats[k], out)
        return self.head(out)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        padded, (r0, r1, c0, c1) = self.pad(x)
        logits = self.decode(self.encode(padded))
        logits = F.interpolate(logits, size=padded.shape[-2:], mode="bilinear",
                               align_corners=False)
        logits = logits[..., r0:r1, c0:c1]
        return logits[0] if squeeze else logits


def build_model(config: NetworkConfig) -> SegmentationNet:
    return SegmentationNet(config)


def count_parameters(config_or_model) -> int:
    model = config_or_model if isinstance(config_or_model, nn.Module) else build_model(config_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@torch.no_grad()
def predict(model: SegmentationNet, channels) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference on one (3, N1, N2) array; returns (label map, softmax probabilities)."""
    model.eval()
    x = torch.tensor(channels, dtype=next(model.parameters()).dtype)
    probs = torch.softmax(model(x), dim=0)
    return probs.argmax(dim=0), probs
