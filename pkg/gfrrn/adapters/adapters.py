"""
Mona adapters, the Mona-Swin encoder and the trainability contract.

Backbone weights (patch embedding, attention, MLPs, merges) belong to the
``backbone`` group, every Mona layer to ``mona``, and anything outside the
encoder to ``task``. Which groups train is a pure function of the tuning mode.
"""
import enum
import hashlib
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from timm.layers import to_2tuple
from torch import nn

from gfrrn.attention import WindowAttention, pad_to_window, shifted_window_mask, window_partition, window_reverse
from gfrrn.utils import ConfigurationError, InvalidArgumentError, gfrrn_warning

BACKBONE_PREFIX = "encoder1."


class TuningMode(str, enum.Enum):
    FROZEN = "frozen"
    FFT = "fft"
    MONA = "mona"


class ParamGroup(str, enum.Enum):
    BACKBONE = "backbone"
    MONA = "mona"
    TASK = "task"


def token_grid(tokens, hw_shape=None):
    if hw_shape is not None:
        h, w = hw_shape
        if h * w != tokens:
            raise InvalidArgumentError(f"Please provide hw_shape matching {tokens} tokens, got {hw_shape}.")
        return h, w
    side = math.isqrt(tokens)
    if side * side != tokens:
        raise InvalidArgumentError(
            f"Please provide hw_shape for a non-square token count ({tokens})."
        )
    return side, side


class MonaLayer(nn.Module):
    """
    Multi-cognitive visual adapter.

    Scaled layer norm -> down-projection -> GELU -> sum of 3x3, 5x5 and 7x7
    depthwise convolutions -> pointwise 1x1 -> up-projection, added to the input.
    The up-projection starts at zero.
    """

    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.norm = nn.LayerNorm(channels)
        self.gamma = nn.Parameter(torch.full((channels,), 1e-6))
        self.gammax = nn.Parameter(torch.ones(channels))
        self.down = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.conv3 = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1, groups=hidden)
        self.conv5 = nn.Conv2d(hidden, hidden, kernel_size=5, padding=2, groups=hidden)
        self.conv7 = nn.Conv2d(hidden, hidden, kernel_size=7, padding=3, groups=hidden)
        self.pointwise = nn.Conv2d(hidden, hidden, kernel_size=1)
        self.up = nn.Linear(hidden, channels)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x, hw_shape=None):
        b, n, _ = x.shape
        h, w = token_grid(n, hw_shape)
        z = self.norm(x) * self.gamma + x * self.gammax
        z = self.act(self.down(z))
        z = z.transpose(1, 2).reshape(b, -1, h, w)
        z = self.pointwise(self.conv3(z) + self.conv5(z) + self.conv7(z))
        z = z.flatten(2).transpose(1, 2)
        return x + self.up(z)


class Mlp(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MonaSwinBlock(nn.Module):
    """
    Swin block with Mona layers after the attention and MLP residuals:
    x -> W-MSA (+x) -> Mona1 -> MLP (+x) -> Mona2.
    ``mona=False`` builds the plain block with no adapter parameters at all.
    """

    def __init__(self, channels, heads, window=8, shift=False, mlp_ratio=4.0, mona=True, mona_reduction=8):
        super().__init__()
        self.window = to_2tuple(window)
        self.shift = (self.window[0] // 2, self.window[1] // 2) if shift else (0, 0)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, heads, self.window)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = Mlp(channels, int(channels * mlp_ratio))
        self.mona1 = MonaLayer(channels, mona_reduction) if mona else None
        self.mona2 = MonaLayer(channels, mona_reduction) if mona else None

    def windowed_attention(self, x, hw_shape):
        b, n, c = x.shape
        h, w = token_grid(n, hw_shape)
        if self.window[0] > h or self.window[1] > w:
            raise InvalidArgumentError(f"Please provide a token grid of at least {self.window}, got {(h, w)}.")
        x = pad_to_window(x.view(b, h, w, c), self.window)
        hp, wp = x.shape[1:3]
        # one window covers the map: nothing to shift across
        shifted = any(self.shift) and (hp, wp) != self.window
        mask = None
        if shifted:
            x = torch.roll(x, shifts=(-self.shift[0], -self.shift[1]), dims=(1, 2))
            mask = shifted_window_mask((hp, wp), self.window, self.shift, device=x.device).to(x.dtype)
        windows = window_partition(x, self.window)
        x = window_reverse(windows, self.attn(windows.tokens, mask=mask))
        if shifted:
            x = torch.roll(x, shifts=self.shift, dims=(1, 2))
        return x[:, :h, :w].reshape(b, h * w, c)

    def forward(self, x, hw_shape=None):
        x = x + self.windowed_attention(self.norm1(x), hw_shape)
        if self.mona1 is not None:
            x = self.mona1(x, hw_shape)
        x = x + self.mlp(self.norm2(x))
        if self.mona2 is not None:
            x = self.mona2(x, hw_shape)
        return x


class PatchEmbed(nn.Module):
    def __init__(self, channels, patch_size=2, in_channels=3):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        x = self.proj(x)
        hw_shape = tuple(x.shape[-2:])
        return self.norm(x.flatten(2).transpose(1, 2)), hw_shape


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat -> LayerNorm(4C) -> Linear(4C, 2C)."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(4 * channels)
        self.reduction = nn.Linear(4 * channels, 2 * channels, bias=False)

    def forward(self, x, hw_shape):
        b, _, c = x.shape
        h, w = hw_shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"Please provide an even token grid to merge, got {hw_shape}.")
        x = x.view(b, h, w, c)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        x = x.view(b, -1, 4 * c)
        return self.reduction(self.norm(x)), (h // 2, w // 2)


class MonaSwinEncoder(nn.Module):
    """
    Miniature hierarchical Swin encoder. Stage i works at C * 2**i channels and
    1 / (patch_size * 2**i) resolution; odd blocks use shifted windows.
    Returns one (B, C_i, H_i, W_i) map per stage.
    """

    def __init__(self, channels=32, depths=(2, 2), heads=(2, 4), window=8, patch_size=2,
                 mlp_ratio=4.0, mona=True, mona_reduction=8):
        super().__init__()
        if len(depths) != len(heads):
            raise ConfigurationError(f"Please provide one head count per stage: depths={depths}, heads={heads}.")
        self.patch_embed = PatchEmbed(channels, patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.stage_channels = []
        dim = channels
        for i, (depth, head) in enumerate(zip(depths, heads)):
            self.stages.append(nn.ModuleList([
                MonaSwinBlock(dim, head, window, shift=bool(j % 2), mlp_ratio=mlp_ratio,
                              mona=mona, mona_reduction=mona_reduction)
                for j in range(depth)
            ]))
            self.stage_channels.append(dim)
            if i < len(depths) - 1:
                self.merges.append(PatchMerging(dim))
                dim *= 2

    def forward(self, image):
        x, hw_shape = self.patch_embed(image)
        features = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x, hw_shape)
            b, _, c = x.shape
            features.append(x.transpose(1, 2).reshape(b, c, *hw_shape))
            if i < len(self.merges):
                x, hw_shape = self.merges[i](x, hw_shape)
        return features


@dataclass
class ParamEntry:
    tensor: torch.Tensor
    trainable: bool
    group: ParamGroup


def default_group_tagger(name, backbone_prefix=BACKBONE_PREFIX):
    if not name.startswith(backbone_prefix):
        return ParamGroup.TASK
    return ParamGroup.MONA if ".mona" in name else ParamGroup.BACKBONE


class ParamStore:
    """
    Named parameters with a trainable flag and a group tag each. Reads are
    lock-free; ``update`` and ``apply`` take the store lock.
    """

    def __init__(self, entries=None):
        self.entries = dict(entries or {})
        self._lock = threading.Lock()

    @classmethod
    def from_module(cls, module, tagger=None, backbone_prefix=BACKBONE_PREFIX):
        entries = {}
        for name, param in module.named_parameters():
            group = tagger(name) if tagger else default_group_tagger(name, backbone_prefix)
            if group is None:
                raise ConfigurationError(f"Please tag every parameter with a group; {name} has none.")
            try:
                group = ParamGroup(group)
            except ValueError:
                raise ConfigurationError(f"Please tag {name} with backbone, mona or task, got {group!r}.")
            entries[name] = ParamEntry(param, param.requires_grad, group)
        return cls(entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name):
        return self.entries[name]

    def items(self):
        return self.entries.items()

    def names(self, group=None, trainable=None):
        return [
            name for name, entry in self.entries.items()
            if (group is None or entry.group is ParamGroup(group))
            and (trainable is None or entry.trainable == trainable)
        ]

    def count(self, group=None, trainable=None):
        return sum(self.entries[name].tensor.numel() for name in self.names(group, trainable))

    def trainable_parameters(self):
        return [entry.tensor for entry in self.entries.values() if entry.trainable]

    def snapshot(self, group=None):
        return {name: self.entries[name].tensor.detach().cpu().numpy().copy() for name in self.names(group)}

    def update(self, name, value):
        with self._lock:
            with torch.no_grad():
                self.entries[name].tensor.copy_(torch.as_tensor(value, dtype=self.entries[name].tensor.dtype))

    def apply(self):
        """Push the trainable flags onto the underlying tensors' requires_grad."""
        with self._lock:
            for entry in self.entries.values():
                entry.tensor.requires_grad_(entry.trainable)
        return self


def trainable_parameter_filter(store, mode):
    """Copy of ``store`` with trainable flags set for ``mode``."""
    mode = TuningMode(mode)
    if mode is TuningMode.FROZEN and store.names(group=ParamGroup.MONA):
        raise ConfigurationError("Frozen tuning builds the encoder without Mona layers; found Mona parameters.")
    flags = {
        TuningMode.FFT: {ParamGroup.BACKBONE: True, ParamGroup.MONA: True},
        TuningMode.MONA: {ParamGroup.BACKBONE: False, ParamGroup.MONA: True},
        TuningMode.FROZEN: {ParamGroup.BACKBONE: False, ParamGroup.MONA: False},
    }[mode]
    entries = {}
    for name, entry in store.items():
        if not isinstance(entry.group, ParamGroup):
            raise ConfigurationError(f"Please tag every parameter with a group; {name} has {entry.group!r}.")
        trainable = True if entry.group is ParamGroup.TASK else flags[entry.group]
        entries[name] = ParamEntry(entry.tensor, trainable, entry.group)
    return ParamStore(entries)


def backbone_hash(store):
    """SHA-256 over the backbone tensors (sorted by name, little-endian float32)."""
    if isinstance(store, nn.Module):
        store = ParamStore.from_module(store)
    digest = hashlib.sha256()
    for name in sorted(store.names(group=ParamGroup.BACKBONE)):
        digest.update(name.encode())
        digest.update(store[name].tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def load_backbone_weights(encoder, path):
    """
    Load externally converted backbone weights from an ``.npz`` keyed by the
    encoder's own parameter names. Mona parameters are never read from it.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Please provide an existing backbone weight archive: {path}")
    params = dict(encoder.named_parameters())
    loaded = 0
    with np.load(path) as archive:
        for key in archive.files:
            if ".mona" in key or key.startswith("mona"):
                continue
            if key not in params:
                gfrrn_warning("loading backbone weights", f"unknown parameter {key}, skipped")
                continue
            value = archive[key]
            if tuple(value.shape) != tuple(params[key].shape):
                gfrrn_warning(
                    "loading backbone weights",
                    f"shape mismatch for {key}: {value.shape} vs {tuple(params[key].shape)}, skipped",
                )
                continue
            with torch.no_grad():
                params[key].copy_(torch.from_numpy(value.astype(np.float32)))
            loaded += 1
    logger.info("Loaded {} backbone tensors from {}", loaded, path)
    return loaded
