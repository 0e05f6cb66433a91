"""
GFRRN: a Mona-tuned Swin encoder and a dual-stream CNN encoder, fused per
scale, decoded coarse to fine by levels of G-AFLB + dual-domain interaction
blocks, with a gated residual estimator for the non-reflection remainder.
"""
import enum
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from loguru import logger
from torch import nn

from gfrrn.adapters import MonaSwinEncoder, ParamStore, TuningMode, trainable_parameter_filter
from gfrrn.attention import (AgentAttention, AttentionConfig, DynamicAgentAttention,
                             LayerwiseDynamicAgentAttention, WindowAttention, window_partition,
                             window_reverse)
from gfrrn.frequency import GAFLB, MaskKind
from gfrrn.utils import ConfigurationError, InvalidArgumentError, config_hash, to_image, to_tensor


class AttentionKind(str, enum.Enum):
    DAA = "daa"
    AGENT = "agent"
    WMSA = "wmsa"


@dataclass
class ModelConfig:
    channels: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window: int = 8
    patch_size: int = 2
    decoder_levels: int = 2
    ddib_per_level: int = 2
    num_agents: int = 4
    sigma_bounds: tuple = (0.5, 8.0)
    tuning_mode: str = TuningMode.MONA.value
    attention_kind: str = AttentionKind.DAA.value
    mask_kind: str = MaskKind.GAUSSIAN.value
    mona_reduction: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        self.sigma_bounds = tuple(float(s) for s in self.sigma_bounds)
        try:
            self.tuning_mode = TuningMode(self.tuning_mode).value
            self.attention_kind = AttentionKind(self.attention_kind).value
            self.mask_kind = MaskKind(self.mask_kind).value
        except ValueError as e:
            raise ConfigurationError(f"Please provide a valid model config: {e}")
        if len(self.depths) != len(self.heads):
            raise ConfigurationError("Please provide one head count per encoder stage.")
        if self.decoder_levels != len(self.depths):
            raise ConfigurationError(
                f"Please provide one decoder level per encoder stage ({len(self.depths)}), got {self.decoder_levels}."
            )
        if self.ddib_per_level < 1:
            raise ConfigurationError("Please provide at least one DDIB per decoder level.")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Please remove unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Please provide an existing config file: {path}")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data.get("model", data))

    def to_dict(self):
        data = asdict(self)
        for key in ("depths", "heads", "sigma_bounds"):
            data[key] = list(data[key])
        return data

    def hash(self):
        return config_hash(self.to_dict())

    def stage_channels(self):
        return [self.channels * 2 ** i for i in range(len(self.depths))]

    @property
    def size_multiple(self):
        return self.patch_size * 2 ** (len(self.depths) - 1)

    @property
    def min_input_size(self):
        return self.window * self.size_multiple


@dataclass
class StreamPair:
    f_t: torch.Tensor
    f_r: torch.Tensor

    def __post_init__(self):
        if self.f_t.shape != self.f_r.shape:
            raise InvalidArgumentError(
                f"Please provide equal stream shapes, got {tuple(self.f_t.shape)} and {tuple(self.f_r.shape)}."
            )

    @property
    def shape(self):
        return self.f_t.shape


@dataclass
class GFRRNOutput:
    t_hat: torch.Tensor
    r_hat: torch.Tensor
    n_hat: torch.Tensor
    extras: dict = field(default_factory=dict)

    def reconstruction(self):
        return self.t_hat + self.r_hat + self.n_hat

    def to_images(self):
        return to_image(self.t_hat), to_image(self.r_hat), to_image(self.n_hat)


class LayerNorm2d(nn.Module):
    """Channel LayerNorm on (B, C, H, W) maps."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        y = (x - mu) / (var + self.eps).sqrt()
        return self.weight.view(1, -1, 1, 1) * y + self.bias.view(1, -1, 1, 1)


class SimpleGate(nn.Module):
    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        return x1 * x2


class DualStreamFFN(nn.Module):
    """
    DSLP stand-in: per-stream LayerNorm2d -> 1x1 expand -> 3x3 depthwise, then
    each stream's value half is gated by the other stream's gate half.
    """

    def __init__(self, channels):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, channels * 2, kernel_size=1)
        self.dwconv = nn.Conv2d(channels * 2, channels * 2, kernel_size=3, padding=1, groups=channels * 2)
        self.project_out = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, f_t, f_r):
        t1, t2 = self.dwconv(self.expand(self.norm(f_t))).chunk(2, dim=1)
        r1, r2 = self.dwconv(self.expand(self.norm(f_r))).chunk(2, dim=1)
        return self.project_out(t1 * r2), self.project_out(r1 * t2)


def build_attention_pair(kind, cfg):
    """(self-attention over L tokens, cross-stream attention over 2L tokens)."""
    kind = AttentionKind(kind)
    if kind is AttentionKind.DAA:
        return DynamicAgentAttention(cfg), LayerwiseDynamicAgentAttention(cfg)
    if kind is AttentionKind.AGENT:
        return AgentAttention(cfg), LayerwiseDynamicAgentAttention(cfg, use_wie=False)
    L = cfg.tokens_per_window
    return (
        WindowAttention(cfg.channels, cfg.heads, cfg.window),
        WindowAttention(cfg.channels, cfg.heads, cfg.window, tokens=2 * L, position_bias=False),
    )


class DualDomainInteractionBlock(nn.Module):
    """
    DDIB. Self attention runs on both streams' windows stacked along the
    window axis; cross attention on each window's two streams concatenated
    along the token axis. F + SA + CA, then the dual-stream FFN residual.
    """

    def __init__(self, cfg, attention_kind=AttentionKind.DAA):
        super().__init__()
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.channels)
        self.self_attn, self.cross_attn = build_attention_pair(attention_kind, cfg)
        self.ffn = DualStreamFFN(cfg.channels)

    def attention(self, pair):
        t = self.norm1(pair.f_t.permute(0, 2, 3, 1))
        r = self.norm1(pair.f_r.permute(0, 2, 3, 1))
        t_win = window_partition(t, self.cfg.window)
        r_win = window_partition(r, self.cfg.window)
        sa_t, sa_r = self.self_attn(torch.cat([t_win.tokens, r_win.tokens], dim=0)).chunk(2, dim=0)
        ca_t, ca_r = self.cross_attn(torch.cat([t_win.tokens, r_win.tokens], dim=1)).chunk(2, dim=1)
        out_t = window_reverse(t_win, sa_t + ca_t).permute(0, 3, 1, 2)
        out_r = window_reverse(r_win, sa_r + ca_r).permute(0, 3, 1, 2)
        return out_t, out_r

    def forward(self, pair):
        attn_t, attn_r = self.attention(pair)
        f_t = pair.f_t + attn_t
        f_r = pair.f_r + attn_r
        ffn_t, ffn_r = self.ffn(f_t, f_r)
        return StreamPair(f_t + ffn_t, f_r + ffn_r)


class DecoderLevel(nn.Module):
    """G-AFLB on each stream with the shared (resampled) image, then K DDIBs."""

    def __init__(self, cfg, blocks=2, sigma_bounds=(0.5, 8.0), mask_kind=MaskKind.GAUSSIAN,
                 attention_kind=AttentionKind.DAA):
        super().__init__()
        if blocks < 1:
            raise ConfigurationError("Please provide at least one DDIB per decoder level.")
        self.cfg = cfg
        self.gaflb = GAFLB(cfg.channels, num_heads=cfg.heads, sigma_bounds=sigma_bounds, mask_kind=mask_kind)
        self.blocks = nn.ModuleList([DualDomainInteractionBlock(cfg, attention_kind) for _ in range(blocks)])

    def forward(self, pair, image):
        if pair.f_t.shape[1] != self.cfg.channels:
            raise InvalidArgumentError(f"Please provide {self.cfg.channels}-channel streams, got {pair.f_t.shape[1]}.")
        if image.shape[-2:] != pair.shape[-2:]:
            image = F.interpolate(image, size=pair.shape[-2:], mode="bilinear", align_corners=False)
        pair = StreamPair(self.gaflb(pair.f_t, image), self.gaflb(pair.f_r, image))
        for block in self.blocks:
            pair = block(pair)
        return pair


class DualStreamEncoder(nn.Module):
    """
    Shared full-resolution stem, then per scale a shared strided trunk with
    a transmission and a reflection head, matching the Swin encoder's scales.
    """

    def __init__(self, stage_channels, stem_channels=32, patch_size=2):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, stem_channels, kernel_size=3, padding=1), nn.GELU())
        self.stem_t = nn.Conv2d(stem_channels, stem_channels, kernel_size=3, padding=1)
        self.stem_r = nn.Conv2d(stem_channels, stem_channels, kernel_size=3, padding=1)
        self.trunks = nn.ModuleList()
        self.heads_t = nn.ModuleList()
        self.heads_r = nn.ModuleList()
        prev = stem_channels
        for i, ch in enumerate(stage_channels):
            down = nn.Conv2d(prev, ch, kernel_size=patch_size, stride=patch_size) if i == 0 else \
                nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1)
            self.trunks.append(nn.Sequential(down, nn.GELU()))
            self.heads_t.append(nn.Conv2d(ch, ch, kernel_size=3, padding=1))
            self.heads_r.append(nn.Conv2d(ch, ch, kernel_size=3, padding=1))
            prev = ch

    def forward(self, image):
        x = self.stem(image)
        stem_pair = StreamPair(self.stem_t(x), self.stem_r(x))
        pyramid = []
        for trunk, head_t, head_r in zip(self.trunks, self.heads_t, self.heads_r):
            x = trunk(x)
            pyramid.append(StreamPair(head_t(x), head_r(x)))
        return stem_pair, pyramid


class ResidualEstimator(nn.Module):
    """cat(T, R, I) -> 1x1 -> one NAF-style gated block -> 3-channel signed residual."""

    def __init__(self, channels=16):
        super().__init__()
        self.intro = nn.Conv2d(9, channels, kernel_size=1)
        self.norm = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, channels * 2, kernel_size=1)
        self.dwconv = nn.Conv2d(channels * 2, channels * 2, kernel_size=3, padding=1, groups=channels * 2)
        self.gate = SimpleGate()
        self.project = nn.Conv2d(channels, channels, kernel_size=1)
        self.ending = nn.Conv2d(channels, 3, kernel_size=3, padding=1)

    def forward(self, t_hat, r_hat, image):
        if not (t_hat.shape == r_hat.shape == image.shape):
            raise InvalidArgumentError(
                f"Please provide aligned T, R and I: {tuple(t_hat.shape)}, {tuple(r_hat.shape)}, {tuple(image.shape)}."
            )
        x = self.intro(torch.cat([t_hat, r_hat, image], dim=1))
        x = x + self.project(self.gate(self.dwconv(self.expand(self.norm(x)))))
        return self.ending(x)


class GFRRN(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        chans = cfg.stage_channels()
        mode = TuningMode(cfg.tuning_mode)
        self.encoder1 = MonaSwinEncoder(
            cfg.channels, cfg.depths, cfg.heads, cfg.window, cfg.patch_size,
            mlp_ratio=cfg.mlp_ratio, mona=mode is not TuningMode.FROZEN, mona_reduction=cfg.mona_reduction,
        )
        self.encoder2 = DualStreamEncoder(chans, stem_channels=cfg.channels, patch_size=cfg.patch_size)
        self.fuse_t = nn.ModuleList([nn.Conv2d(2 * ch, ch, kernel_size=1) for ch in chans])
        self.fuse_r = nn.ModuleList([nn.Conv2d(2 * ch, ch, kernel_size=1) for ch in chans])
        self.levels = nn.ModuleList([
            DecoderLevel(
                AttentionConfig(ch, heads, cfg.window, cfg.num_agents), cfg.ddib_per_level,
                cfg.sigma_bounds, cfg.mask_kind, cfg.attention_kind,
            )
            for ch, heads in zip(chans, cfg.heads)
        ])
        # projects level i+1's output onto level i's channels after 2x upsampling
        self.up_proj = nn.ModuleList([nn.Conv2d(chans[i + 1], chans[i], kernel_size=1) for i in range(len(chans) - 1)])
        self.head_t = nn.Conv2d(chans[0] + cfg.channels, 3, kernel_size=3, padding=1)
        self.head_r = nn.Conv2d(chans[0] + cfg.channels, 3, kernel_size=3, padding=1)
        self.residual = ResidualEstimator(max(cfg.channels // 2, 4))

    def configure_tuning(self):
        """ParamStore with flags for the configured mode, pushed onto requires_grad."""
        store = ParamStore.from_module(self)
        store = trainable_parameter_filter(store, self.config.tuning_mode).apply()
        logger.info(
            "Tuning mode {}: {} trainable / {} total parameters",
            self.config.tuning_mode, store.count(trainable=True), store.count(),
        )
        return store

    def pad_input(self, image):
        h, w = image.shape[-2:]
        if min(h, w) < self.config.min_input_size:
            raise InvalidArgumentError(
                f"Please provide an image of at least {self.config.min_input_size}px per side, got {h}x{w}."
            )
        m = self.config.size_multiple
        pad_b, pad_r = (m - h % m) % m, (m - w % m) % m
        if pad_b or pad_r:
            image = F.pad(image, (0, pad_r, 0, pad_b), mode="reflect")
        return image

    def encode(self, image):
        features = self.encoder1(image)
        stem_pair, pyramid = self.encoder2(image)
        fused = [
            StreamPair(
                self.fuse_t[i](torch.cat([pair.f_t, feat], dim=1)),
                self.fuse_r[i](torch.cat([pair.f_r, feat], dim=1)),
            )
            for i, (pair, feat) in enumerate(zip(pyramid, features))
        ]
        return stem_pair, fused

    def decode(self, fused, image):
        pair = None
        for i in reversed(range(len(self.levels))):
            current = fused[i]
            if pair is not None:
                up_t = F.interpolate(pair.f_t, size=current.shape[-2:], mode="bilinear", align_corners=False)
                up_r = F.interpolate(pair.f_r, size=current.shape[-2:], mode="bilinear", align_corners=False)
                current = StreamPair(current.f_t + self.up_proj[i](up_t), current.f_r + self.up_proj[i](up_r))
            pair = self.levels[i](current, image)
        return pair

    def forward(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise InvalidArgumentError(f"Please provide a (B, 3, H, W) image, got {tuple(image.shape)}.")
        h, w = image.shape[-2:]
        padded = self.pad_input(image)
        stem_pair, fused = self.encode(padded)
        pair = self.decode(fused, padded)
        size = padded.shape[-2:]
        f_t = F.interpolate(pair.f_t, size=size, mode="bilinear", align_corners=False)
        f_r = F.interpolate(pair.f_r, size=size, mode="bilinear", align_corners=False)
        t_hat = torch.sigmoid(self.head_t(torch.cat([f_t, stem_pair.f_t], dim=1)))[..., :h, :w]
        r_hat = torch.sigmoid(self.head_r(torch.cat([f_r, stem_pair.f_r], dim=1)))[..., :h, :w]
        n_hat = self.residual(t_hat, r_hat, image)
        return GFRRNOutput(t_hat, r_hat, n_hat)

    @torch.no_grad()
    def restore(self, image):
        """H×W×3 numpy image -> (T̂, R̂, N̂) numpy images."""
        param = next(self.parameters())
        out = self(to_tensor(np.asarray(image), dtype=param.dtype, device=param.device))
        return out.to_images()


def zero_init_residual_branches(model):
    """Zero every decoder residual-branch output projection; returns the zeroed module names."""
    zeroed = []
    for name, module in model.named_modules():
        if isinstance(module, DualDomainInteractionBlock):
            for branch, proj in (("self_attn.proj", module.self_attn.proj),
                                 ("cross_attn.proj", module.cross_attn.proj),
                                 ("ffn.project_out", module.ffn.project_out)):
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
                zeroed.append(f"{name}.{branch}")
    return zeroed
