"""Hybrid-fusion networks: modality encoders/decoders, mixed fusion blocks,
layer-wise fusion network, skip-connected generator and conditional
discriminator.

Every variant used in the ablation study is the same :class:`HiNet`
container with different fusion blocks switched in; see ``VARIANT_LAYOUT``.
Tensors are NCHW.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, StructureError

FUSION_VARIANTS = ("hybrid", "early_fusion", "late_fusion", "concate_d1", "concate_d2", "concate_d3")

# variant -> (number of encoders, fusion-network block kind, generator block kind)
VARIANT_LAYOUT = {
    "hybrid": (2, "mfb", "mfb"),
    "concate_d1": (2, "concat", "concat"),
    "concate_d2": (2, "mfb", "concat"),
    "concate_d3": (2, "concat", "mfb"),
    "late_fusion": (2, None, "concat"),
    "early_fusion": (1, None, "single"),
}


@dataclass
class ModelConfig:
    input_size: tuple = (128, 128)
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128])
    decoder_channels: list = field(default_factory=lambda: [64, 32, 32])
    mfb_filters: list = field(default_factory=lambda: [(32, 64), (64, 128), (128, 128)])
    generator_mfb_filters: list = field(default_factory=lambda: [(128, 128), (128, 64), (64, 32)])
    generator_head_channels: list = field(default_factory=lambda: [256, 128])
    generator_tail_channels: list = field(default_factory=lambda: [32, 1])
    discriminator_channels: list = field(default_factory=lambda: [32, 64, 128, 256, 1])
    leaky_slope: float = 0.2
    fusion_variant: str = "hybrid"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.mfb_filters = [tuple(f) for f in self.mfb_filters]
        self.generator_mfb_filters = [tuple(f) for f in self.generator_mfb_filters]
        self.validate()

    @property
    def n_stages(self):
        return len(self.encoder_channels)

    def validate(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")
        for name in ("encoder_channels", "decoder_channels", "mfb_filters", "generator_mfb_filters",
                     "generator_head_channels", "generator_tail_channels", "discriminator_channels"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be nonempty")
        n = self.n_stages
        if len(self.mfb_filters) != n or len(self.generator_mfb_filters) != n or len(self.decoder_channels) != n:
            raise ConfigError("fusion, generator and decoder stage counts must equal the encoder stage count")
        if n < 2:
            raise ConfigError("at least two encoder stages are required")
        if self.mfb_filters[-1][1] != self.encoder_channels[-1]:
            raise ConfigError("last fusion block must emit as many channels as the encoder latent")
        if self.generator_tail_channels[-1] != 1 or self.discriminator_channels[-1] != 1:
            raise ConfigError("generator and discriminator must end in one channel")
        if len(self.discriminator_channels) < 2:
            raise ConfigError("discriminator needs at least two convolutions")
        step = 2 ** max(n, len(self.discriminator_channels) - 1)
        if any(s % step for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be divisible by {step}")

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["mfb_filters"] = [list(f) for f in self.mfb_filters]
        d["generator_mfb_filters"] = [list(f) for f in self.generator_mfb_filters]
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(extra)}")
        return cls(**d)


class FeaturePyramid(NamedTuple):
    pre_pool: list      # activation before pooling, per stage
    pooled: list        # S_k: activation after 2x2 max-pool, per stage

    @property
    def latent(self):
        return self.pooled[-1]


class FusionState(NamedTuple):
    fused: list         # F_1..F_n

    @property
    def latent(self):
        return self.fused[-1]


class ConvBlock(nn.Sequential):
    """3x3 conv -> batch norm -> activation."""

    def __init__(self, cin, cout, act, stride=1, slope=0.2, eps=1e-5, momentum=0.1):
        act_layer = nn.LeakyReLU(slope) if act == "leaky" else nn.ReLU()
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(cout, eps=eps, momentum=momentum),
            act_layer,
        )


def _bn(cfg):
    return {"eps": cfg.bn_eps, "momentum": cfg.bn_momentum}


def _check_image(x, cfg, channels, what):
    if x.dim() != 4 or x.shape[1] != channels or tuple(x.shape[-2:]) != cfg.input_size:
        raise DimensionError(
            f"{what}: expected (N, {channels}, {cfg.input_size[0]}, {cfg.input_size[1]}), got {tuple(x.shape)}")


class Encoder(nn.Module):
    def __init__(self, cfg, in_channels=1):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        chans = [in_channels, *cfg.encoder_channels]
        self.stages = nn.ModuleList(
            ConvBlock(a, b, "leaky", slope=cfg.leaky_slope, **_bn(cfg)) for a, b in zip(chans, chans[1:]))

    def forward(self, x):
        _check_image(x, self.cfg, self.in_channels, "encoder input")
        pre, pooled = [], []
        for stage in self.stages:
            x = stage(x)
            pre.append(x)
            x = F.max_pool2d(x, 2)
            pooled.append(x)
        return FeaturePyramid(pre, pooled)


class Decoder(nn.Module):
    def __init__(self, cfg, out_channels=1):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.encoder_channels[-1], *cfg.decoder_channels]
        self.stages = nn.ModuleList(ConvBlock(a, b, "relu", **_bn(cfg)) for a, b in zip(chans, chans[1:]))
        self.out = nn.Conv2d(chans[-1], out_channels, 3, padding=1)

    def forward(self, h):
        cfg = self.cfg
        side = [s // 2 ** cfg.n_stages for s in cfg.input_size]
        if h.dim() != 4 or h.shape[1] != cfg.encoder_channels[-1] or list(h.shape[-2:]) != side:
            raise DimensionError(f"decoder input: expected latent (N, {cfg.encoder_channels[-1]}, "
                                 f"{side[0]}, {side[1]}), got {tuple(h.shape)}")
        for stage in self.stages:
            h = stage(F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.tanh(self.out(h))


class FusionBlock(nn.Module):
    """Two-conv fusion unit.

    ``kind="mfb"`` is the mixed fusion block: the element-wise sum,
    product and max of the two streams are stacked before Conv1.
    ``kind="concat"`` stacks the raw streams instead and ``kind="single"``
    takes one stream.  Conv1's output is concatenated with the previous
    block's output (when given) and passed through Conv2.
    """

    def __init__(self, kind, channels, prev_channels, filters, bn):
        super().__init__()
        if kind not in ("mfb", "concat", "single"):
            raise ConfigError(f"unknown fusion block kind {kind!r}")
        self.kind = kind
        width = {"mfb": 3, "concat": 2, "single": 1}[kind]
        c1, c2 = filters
        self.conv1 = ConvBlock(width * channels, c1, "relu", **bn)
        self.conv2 = ConvBlock(c1 + prev_channels, c2, "relu", **bn)
        self.prev_channels = prev_channels

    def combine(self, s1, s2):
        if self.kind == "single":
            return s1
        if s2 is None or s1.shape != s2.shape:
            raise DimensionError(f"fusion inputs differ: {tuple(s1.shape)} vs "
                                 f"{None if s2 is None else tuple(s2.shape)}")
        if self.kind == "concat":
            return torch.cat([s1, s2], dim=1)
        return torch.cat([s1 + s2, s1 * s2, torch.maximum(s1, s2)], dim=1)

    def forward(self, s1, s2=None, prev=None):
        out = self.conv1(self.combine(s1, s2))
        if prev is not None:
            if prev.shape[-2:] != out.shape[-2:] or prev.shape[1] != self.prev_channels:
                raise DimensionError(f"previous fusion output {tuple(prev.shape)} does not fit {tuple(out.shape)}")
            out = torch.cat([out, prev], dim=1)
        elif self.prev_channels:
            raise StructureError("this block expects a previous fusion output")
        return self.conv2(out)


class FusionNetwork(nn.Module):
    """Chain of fusion blocks over the pooled encoder features."""

    def __init__(self, cfg, kind):
        super().__init__()
        bn = _bn(cfg)
        blocks, prev = [], 0
        for chans, filters in zip(cfg.encoder_channels, cfg.mfb_filters):
            blocks.append(FusionBlock(kind, chans, prev, filters, bn))
            prev = filters[1]
        # the attribute name keeps the block kind visible in parameter names
        setattr(self, kind, nn.ModuleList(blocks))
        self.kind = kind

    @property
    def blocks(self):
        return getattr(self, self.kind)

    def forward(self, p1, p2):
        if len(p1.pooled) != len(self.blocks) or len(p2.pooled) != len(self.blocks):
            raise StructureError(f"pyramid depths {len(p1.pooled)}/{len(p2.pooled)} do not match "
                                 f"{len(self.blocks)} fusion blocks")
        fused, prev = [], None
        for block, s1, s2 in zip(self.blocks, p1.pooled, p2.pooled):
            if prev is not None:
                prev = F.max_pool2d(prev, 2)
            prev = block(s1, s2, prev)
            fused.append(prev)
        return FusionState(fused)


class Generator(nn.Module):
    """Maps the fused latent back to an image.

    Two head convs, then one fusion block per stage walking back up the
    encoder: block 0 fuses the encoders' latents with the head output at
    the bottom resolution, later blocks fuse the pre-pool encoder
    activations with the x2-upsampled previous block output.  A final
    upsample and two convs produce the image.
    """

    def __init__(self, cfg, kind):
        super().__init__()
        bn = _bn(cfg)
        chans = [cfg.encoder_channels[-1], *cfg.generator_head_channels]
        self.head = nn.Sequential(*(ConvBlock(a, b, "relu", **bn) for a, b in zip(chans, chans[1:])))
        skip_chans = [cfg.encoder_channels[-1], *reversed(cfg.encoder_channels[1:])]
        blocks, prev = [], chans[-1]
        for c, filters in zip(skip_chans, cfg.generator_mfb_filters):
            blocks.append(FusionBlock(kind, c, prev, filters, bn))
            prev = filters[1]
        setattr(self, kind, nn.ModuleList(blocks))
        self.kind = kind
        tail = [prev, *cfg.generator_tail_channels]
        self.tail = nn.Sequential(*(ConvBlock(a, b, "relu", **bn) for a, b in zip(tail[:-2], tail[1:-1])))
        self.out = nn.Conv2d(tail[-2], tail[-1], 3, padding=1)

    @property
    def blocks(self):
        return getattr(self, self.kind)

    @staticmethod
    def skips(pyramid):
        # bottom-up: latent, then pre-pool activations of the deeper stages
        return [pyramid.pooled[-1], *reversed(pyramid.pre_pool[1:])]

    def forward(self, latent, pyramids):
        z = self.head(latent)
        streams = [self.skips(p) for p in pyramids]
        for k, block in enumerate(self.blocks):
            if k:
                z = F.interpolate(z, scale_factor=2, mode="nearest")
            s = [stream[k] for stream in streams]
            z = block(s[0], s[1] if len(s) > 1 else None, z)
        z = self.tail(F.interpolate(z, scale_factor=2, mode="nearest"))
        return torch.tanh(self.out(z))


class Discriminator(nn.Module):
    """Conditional discriminator scoring (x1, x2, target) as a patch map."""

    def __init__(self, cfg, in_channels=3):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        chans = [in_channels, *cfg.discriminator_channels]
        layers = [ConvBlock(a, b, "leaky", stride=2, slope=cfg.leaky_slope, **_bn(cfg))
                  for a, b in zip(chans[:-2], chans[1:-1])]
        self.features = nn.Sequential(*layers)
        self.out = nn.Conv2d(chans[-2], chans[-1], 3, stride=1, padding=1)

    def forward(self, x1, x2, target):
        for name, t in (("x1", x1), ("x2", x2), ("target", target)):
            _check_image(t, self.cfg, 1, f"discriminator {name}")
        return torch.sigmoid(self.out(self.features(torch.cat([x1, x2, target], dim=1))))


class HiNetOutput(NamedTuple):
    synthesized: torch.Tensor
    reconstructions: list       # one tensor per source modality
    pyramids: list
    fusion: FusionState


class HiNet(nn.Module):
    """Container for all learnable parts of one fusion variant."""

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n_enc, fusion_kind, gen_kind = VARIANT_LAYOUT[cfg.fusion_variant]
        if n_enc == 2:
            self.encoder1, self.encoder2 = Encoder(cfg), Encoder(cfg)
            self.decoder1, self.decoder2 = Decoder(cfg), Decoder(cfg)
        else:
            self.encoder = Encoder(cfg, in_channels=2)
            self.decoder = Decoder(cfg, out_channels=2)
        if fusion_kind is not None:
            self.fusion = FusionNetwork(cfg, fusion_kind)
        elif cfg.fusion_variant == "late_fusion":
            c = cfg.encoder_channels[-1]
            self.latent_fusion = ConvBlock(2 * c, c, "relu", **_bn(cfg))
        self.generator = Generator(cfg, gen_kind)
        self.discriminator = Discriminator(cfg)

    @property
    def n_encoders(self):
        return VARIANT_LAYOUT[self.cfg.fusion_variant][0]

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("discriminator.")]

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())

    def encode(self, x1, x2):
        if self.n_encoders == 1:
            _check_image(x1, self.cfg, 1, "x1")
            _check_image(x2, self.cfg, 1, "x2")
            return [self.encoder(torch.cat([x1, x2], dim=1))]
        return [self.encoder1(x1), self.encoder2(x2)]

    def fuse(self, pyramids):
        if hasattr(self, "fusion"):
            return self.fusion(*pyramids)
        if hasattr(self, "latent_fusion"):
            return FusionState([self.latent_fusion(torch.cat([p.latent for p in pyramids], dim=1))])
        return FusionState([pyramids[0].latent])

    def reconstruct(self, pyramids):
        if self.n_encoders == 1:
            rec = self.decoder(pyramids[0].latent)
            return [rec[:, :1], rec[:, 1:]]
        return [self.decoder1(pyramids[0].latent), self.decoder2(pyramids[1].latent)]

    def forward(self, x1, x2, with_reconstruction=True):
        pyramids = self.encode(x1, x2)
        state = self.fuse(pyramids)
        y_hat = self.generator(state.latent, pyramids)
        recs = self.reconstruct(pyramids) if with_reconstruction else []
        return HiNetOutput(y_hat, recs, pyramids, state)

    def synthesize(self, x1, x2):
        return self(x1, x2, with_reconstruction=False).synthesized


# --------------------------------------------------------------------------- functional surface

def init_params(config, seed=0):
    """Build a model for ``config`` with N(0, 0.02) conv weights, zero
    biases and unit/zero batch-norm affine terms, deterministic in ``seed``."""
    model = HiNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return model


def encoder_forward(x, model, which=1):
    """Feature pyramid of source ``which`` (1 or 2); early fusion has one
    encoder taking both sources stacked, so pass a 2-channel ``x``."""
    if model.n_encoders == 1:
        return model.encoder(x)
    return (model.encoder1 if which == 1 else model.encoder2)(x)


def decoder_forward(h, model, which=1):
    if model.n_encoders == 1:
        return model.decoder(h)
    return (model.decoder1 if which == 1 else model.decoder2)(h)


def mfb_forward(s1, s2, prev, block):
    return block(s1, s2, prev)


def fusion_forward(p1, p2, model):
    return model.fuse([p1, p2])


def generator_forward(x1, x2, model):
    return model.synthesize(x1, x2)


def discriminator_forward(x1, x2, target, model, reduce=False):
    scores = model.discriminator(x1, x2, target)
    return scores.mean(dim=(1, 2, 3)) if reduce else scores
