import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from timm.layers import to_2tuple, trunc_normal_
from torch import nn

from gfrrn.utils import InvalidArgumentError


@dataclass
class TokenWindows:
    tokens: torch.Tensor  # (B * N_w, L, C)
    window_dims: tuple
    origin_dims: tuple
    padded_dims: tuple
    batch: int = 1
    unbatched: bool = False

    @property
    def num_windows(self):
        return self.tokens.shape[0]


@dataclass
class AttentionConfig:
    channels: int
    heads: int
    window: tuple = (8, 8)
    num_agents: int = 4

    def __post_init__(self):
        self.window = to_2tuple(self.window)
        if self.channels % self.heads:
            raise InvalidArgumentError(f"Please provide channels ({self.channels}) divisible by heads ({self.heads}).")
        if self.num_agents < 1 or self.num_agents > self.tokens_per_window:
            raise InvalidArgumentError(
                f"Please provide an agent count between 1 and {self.tokens_per_window}, got {self.num_agents}."
            )
        agent_grid(self.num_agents)

    @property
    def tokens_per_window(self):
        return self.window[0] * self.window[1]

    @property
    def head_dim(self):
        return self.channels // self.heads


def agent_grid(num_agents):
    side = math.isqrt(num_agents)
    if side * side != num_agents:
        raise InvalidArgumentError(f"Please provide a square agent count (1, 4, 9, ...), got {num_agents}.")
    return side, side


def window_count(h, w, window):
    wh, ww = to_2tuple(window)
    return math.ceil(h / wh) * math.ceil(w / ww)


def pad_to_window(x, window_dims):
    """Reflect-pad a (B, H, W, C) map on the bottom/right up to window multiples."""
    wh, ww = to_2tuple(window_dims)
    h, w = x.shape[1:3]
    pad_b = (wh - h % wh) % wh
    pad_r = (ww - w % ww) % ww
    if not (pad_b or pad_r):
        return x
    return F.pad(x.permute(0, 3, 1, 2), (0, pad_r, 0, pad_b), mode="reflect").permute(0, 2, 3, 1)


def window_partition(x, window_dims):
    """
    (B, H, W, C) or (H, W, C) map -> TokenWindows, reflect-padding up to
    multiples of the window. Windows are ordered row-major per image.
    """
    wh, ww = to_2tuple(window_dims)
    if wh <= 0 or ww <= 0:
        raise InvalidArgumentError(f"Please provide positive window dims, got {(wh, ww)}.")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    b, h, w, _ = x.shape
    if wh > h or ww > w:
        raise InvalidArgumentError(f"Please provide window dims {(wh, ww)} no larger than the map {(h, w)}.")
    x = pad_to_window(x, (wh, ww))
    hp, wp = x.shape[1:3]
    tokens = rearrange(x, 'b (nh wh) (nw ww) c -> (b nh nw) (wh ww) c', wh=wh, ww=ww)
    return TokenWindows(tokens, (wh, ww), (h, w), (hp, wp), batch=b, unbatched=unbatched)


def window_reverse(windows, tokens=None):
    """Inverse of window_partition (padding cropped). ``tokens`` overrides ``windows.tokens``."""
    tokens = windows.tokens if tokens is None else tokens
    wh, ww = windows.window_dims
    hp, wp = windows.padded_dims
    h, w = windows.origin_dims
    x = rearrange(tokens, '(b nh nw) (wh ww) c -> b (nh wh) (nw ww) c', nh=hp // wh, nw=wp // ww, wh=wh, ww=ww)
    x = x[:, :h, :w]
    return x[0] if windows.unbatched else x


def remap_window_scores(scores, windows):
    """(N_w, 1) per-window weights -> (B, 1, H, W) map over the original grid."""
    per_token = scores.reshape(-1, 1, 1).expand(-1, windows.tokens.shape[1], 1)
    grid = window_reverse(windows, per_token)
    if windows.unbatched:
        grid = grid.unsqueeze(0)
    return grid.permute(0, 3, 1, 2)


def shifted_window_mask(padded_dims, window, shift, device=None):
    """Swin attention mask (N_w, L, L) for a cyclic shift; 0 inside a region, -100 across."""
    hp, wp = padded_dims
    wh, ww = to_2tuple(window)
    sh, sw = to_2tuple(shift)
    img_mask = torch.zeros((1, hp, wp, 1), device=device)
    h_slices = (slice(0, -wh), slice(-wh, -sh), slice(-sh, None))
    w_slices = (slice(0, -ww), slice(-ww, -sw), slice(-sw, None))
    cnt = 0
    for hs in h_slices:
        for ws in w_slices:
            img_mask[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, (wh, ww)).tokens.squeeze(-1)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)


def generate_agents(q, window_dims, grid):
    """AgentGenerate: adaptive average pooling of a window's query grid to ``grid`` tokens."""
    wh, ww = window_dims
    q = rearrange(q, 'n (h w) c -> n c h w', h=wh, w=ww)
    return rearrange(F.adaptive_avg_pool2d(q, grid), 'n c h w -> n (h w) c')


class WindowImportanceEstimator(nn.Module):
    """
    One weight per window from its queries: pool -> linear -> GELU -> linear
    -> 2 * sigmoid. The last layer starts at zero so every score starts at 1.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, q, window_dims):
        wh, ww = window_dims
        q = rearrange(q, 'n (h w) c -> n c h w', h=wh, w=ww)
        z = self.fc2(self.act(self.fc1(self.pool(q).flatten(1))))
        return 2.0 * torch.sigmoid(z)


class DynamicAgentAttention(nn.Module):
    """
    Agent attention whose agents are reweighted per window by the WIE.

    Input (N, L, C) holds windows of both streams stacked along the window
    axis. With ``use_wie=False`` every score is 1 (plain agent attention).
    """

    def __init__(self, cfg, use_wie=True):
        super().__init__()
        self.cfg = cfg
        self.use_wie = use_wie
        self.grid = agent_grid(cfg.num_agents)
        self.scale = cfg.head_dim ** -0.5
        n_a, L, h = cfg.num_agents, cfg.tokens_per_window, cfg.heads
        self.qkv = nn.Linear(cfg.channels, cfg.channels * 3)
        self.wie = WindowImportanceEstimator(cfg.channels) if use_wie else None
        self.agg_bias = nn.Parameter(torch.zeros(h, n_a, L))
        self.broadcast_bias = nn.Parameter(torch.zeros(h, L, n_a))
        self.dwc = nn.Conv2d(cfg.channels, cfg.channels, kernel_size=3, padding=1, groups=cfg.channels)
        self.proj = nn.Linear(cfg.channels, cfg.channels)

    def _check(self, x, tokens):
        if x.dim() != 3 or x.shape[-1] != self.cfg.channels:
            raise InvalidArgumentError(
                f"Please provide (N, L, {self.cfg.channels}) tokens, got {tuple(x.shape)}."
            )
        if x.shape[1] != tokens:
            raise InvalidArgumentError(f"Please provide {tokens} tokens per window, got {x.shape[1]}.")

    def window_scores(self, q):
        if self.wie is None:
            return q.new_ones(q.shape[0], 1)
        return self.wie(q, self.cfg.window)

    def agent_tokens(self, q):
        """(A_w, score): pooled agents scaled by their window's importance."""
        score = self.window_scores(q)
        agents = generate_agents(q, self.cfg.window, self.grid)
        return agents * score.unsqueeze(-1), score

    def depthwise(self, v):
        wh, ww = self.cfg.window
        v = rearrange(v, 'n (h w) c -> n c h w', h=wh, w=ww)
        return rearrange(self.dwc(v), 'n c h w -> n (h w) c')

    def attend(self, q, k, v, agents, agg_bias, broadcast_bias):
        heads = self.cfg.heads
        q, k, v, a = (rearrange(t, 'n l (h d) -> n h l d', h=heads) for t in (q, k, v, agents))
        agg = ((a @ k.transpose(-2, -1)) * self.scale + agg_bias).softmax(dim=-1)
        v_agents = agg @ v
        broadcast = ((q @ a.transpose(-2, -1)) * self.scale + broadcast_bias).softmax(dim=-1)
        out = rearrange(broadcast @ v_agents, 'n h l d -> n l (h d)')
        return out, agg, broadcast

    def forward_with_attention(self, x):
        self._check(x, self.cfg.tokens_per_window)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        agents, score = self.agent_tokens(q)
        out, agg, broadcast = self.attend(q, k, v, agents, self.agg_bias, self.broadcast_bias)
        return self.proj(out + self.depthwise(v)), agg, broadcast, score

    def forward(self, x):
        return self.forward_with_attention(x)[0]


class AgentAttention(DynamicAgentAttention):
    def __init__(self, cfg):
        super().__init__(cfg, use_wie=False)


class LayerwiseDynamicAgentAttention(DynamicAgentAttention):
    """
    Cross-stream DAA. Input (N_w, 2L, C) holds each window's transmission
    tokens followed by its reflection tokens. Agents are pooled per stream and
    concatenated; the two streams' WIE scores are averaged per window.
    """

    def __init__(self, cfg, use_wie=True):
        super().__init__(cfg, use_wie=use_wie)
        n_a, L, h = cfg.num_agents, cfg.tokens_per_window, cfg.heads
        self.agg_bias = nn.Parameter(torch.zeros(h, 2 * n_a, 2 * L))
        self.broadcast_bias = nn.Parameter(torch.zeros(h, 2 * L, 2 * n_a))

    @staticmethod
    def separate(t):
        if t.shape[1] % 2:
            raise InvalidArgumentError(f"Please provide an even token count to split two streams, got {t.shape[1]}.")
        return t.chunk(2, dim=1)

    def agent_tokens(self, q):
        q_t, q_r = self.separate(q)
        agents = torch.cat([
            generate_agents(q_t, self.cfg.window, self.grid),
            generate_agents(q_r, self.cfg.window, self.grid),
        ], dim=1)
        score = (self.window_scores(q_t) + self.window_scores(q_r)) / 2.0
        return agents * score.unsqueeze(-1), score

    def forward_with_attention(self, x):
        if x.dim() == 3 and x.shape[1] % 2:
            raise InvalidArgumentError(f"Please provide an even token count to split two streams, got {x.shape[1]}.")
        self._check(x, 2 * self.cfg.tokens_per_window)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        agents, score = self.agent_tokens(q)
        out, agg, broadcast = self.attend(q, k, v, agents, self.agg_bias, self.broadcast_bias)
        v_t, v_r = self.separate(v)
        enhanced = torch.cat([self.depthwise(v_t), self.depthwise(v_r)], dim=1)
        return self.proj(out + enhanced), agg, broadcast, score


class WindowAttention(nn.Module):
    """Window based multi-head self-attention (W-MSA) with optional relative position bias."""

    def __init__(self, channels, heads, window, tokens=None, position_bias=True):
        super().__init__()
        if channels % heads:
            raise InvalidArgumentError(f"Please provide channels ({channels}) divisible by heads ({heads}).")
        self.channels = channels
        self.heads = heads
        self.window = to_2tuple(window)
        self.tokens = tokens or self.window[0] * self.window[1]
        self.scale = (channels // heads) ** -0.5
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)
        if position_bias:
            wh, ww = self.window
            self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), heads))
            coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
            rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
            rel[:, :, 0] += wh - 1
            rel[:, :, 1] += ww - 1
            rel[:, :, 0] *= 2 * ww - 1
            self.register_buffer("relative_position_index", rel.sum(-1), persistent=False)
            trunc_normal_(self.relative_position_bias_table, std=0.02)
        else:
            self.relative_position_bias_table = None

    def position_bias(self):
        if self.relative_position_bias_table is None:
            return 0.0
        L = self.window[0] * self.window[1]
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)].view(L, L, -1)
        return bias.permute(2, 0, 1).unsqueeze(0)

    def forward_with_attention(self, x, mask=None):
        if x.dim() != 3 or x.shape[-1] != self.channels or x.shape[1] != self.tokens:
            raise InvalidArgumentError(
                f"Please provide (N, {self.tokens}, {self.channels}) tokens, got {tuple(x.shape)}."
            )
        n, L, _ = x.shape
        q, k, v = (rearrange(t, 'n l (h d) -> n h l d', h=self.heads) for t in self.qkv(x).chunk(3, dim=-1))
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias()
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(n // nw, nw, self.heads, L, L) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.heads, L, L)
        attn = attn.softmax(dim=-1)
        return self.proj(rearrange(attn @ v, 'n h l d -> n l (h d)')), attn

    def forward(self, x, mask=None):
        return self.forward_with_attention(x, mask)[0]
