"""
Frequency-domain masks, impulse-response analysis and the Gaussian adaptive
frequency learning block (G-AFLB).

Mask grids are in angular frequency (radians / sample) on the centred grid
[-pi, pi). Multiplying a spectrum by a mask is a convolution with the mask's
impulse response, so the sign structure of that response decides whether a
band split rings at edges.
"""
import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from timm.layers import trunc_normal_
from torch import nn

from gfrrn.utils import GFRRNError, InvalidArgumentError

IMAG_TOLERANCE = 1e-9


class MaskKind(str, enum.Enum):
    RECTANGULAR = "rectangular"
    GAUSSIAN = "gaussian"


@dataclass
class FrequencyMask:
    kind: MaskKind
    params: tuple  # (w_cx, w_cy) cutoffs or (sigma_x, sigma_y)
    grid: np.ndarray

    @property
    def shape(self):
        return self.grid.shape


def centered_frequencies(n):
    return 2.0 * np.pi * np.fft.fftshift(np.fft.fftfreq(n))


def _check_positive_pair(params, what):
    params = tuple(float(p) for p in params)
    if len(params) != 2 or not all(np.isfinite(p) and p > 0 for p in params):
        raise InvalidArgumentError(f"Please provide two positive {what}, got {params}.")
    return params


def build_mask(kind, shape, params):
    kind = MaskKind(kind)
    h, w = shape
    if h < 2 or w < 2:
        raise InvalidArgumentError(f"Please provide a mask shape of at least 2x2, got {shape}.")
    wy = centered_frequencies(h)[:, None]
    wx = centered_frequencies(w)[None, :]
    if kind is MaskKind.RECTANGULAR:
        cx, cy = _check_positive_pair(params, "cutoffs")
        grid = ((np.abs(wx) <= cx) & (np.abs(wy) <= cy)).astype(np.float64)
        return FrequencyMask(kind, (cx, cy), grid)
    sx, sy = _check_positive_pair(params, "sigmas")
    grid = np.exp(-0.5 * (wx ** 2 / sx ** 2 + wy ** 2 / sy ** 2))
    return FrequencyMask(kind, (sx, sy), grid)


def impulse_response(mask):
    """Centred inverse DFT of a mask; the peak of a low-pass lands at (H//2, W//2)."""
    h = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(mask.grid)))
    imag = float(np.abs(h.imag).max())
    if imag >= IMAG_TOLERANCE:
        raise InvalidArgumentError(
            f"Please provide a mask symmetric under frequency negation (imaginary part {imag:.3e})."
        )
    return h.real


def ringing_metric(mask):
    """|min h| / max h over the impulse response h."""
    h = impulse_response(mask)
    peak = h.max()
    if not peak > 0:
        raise GFRRNError("Impulse response is degenerate (no positive peak); cannot measure ringing.")
    return float(abs(h.min()) / peak)


def filter_report(kind, shape, params):
    mask = build_mask(kind, shape, params)
    h = impulse_response(mask)
    return {
        "kind": mask.kind.value,
        "param_x": mask.params[0],
        "param_y": mask.params[1],
        "ringing": ringing_metric(mask),
        "h_min": float(h.min()),
        "h_max": float(h.max()),
    }


def frequency_grid(h, w, device=None, dtype=torch.float32):
    """Angular frequencies in FFT (unshifted) order, shaped for broadcasting."""
    wy = 2.0 * torch.pi * torch.fft.fftfreq(h, device=device, dtype=dtype)
    wx = 2.0 * torch.pi * torch.fft.fftfreq(w, device=device, dtype=dtype)
    return wy.view(1, 1, h, 1), wx.view(1, 1, 1, w)


def spectral_mask(kind, h, w, params, dtype, device):
    """(B, 1, H, W) mask from per-sample (x, y) parameters of shape (B, 2)."""
    wy, wx = frequency_grid(h, w, device=device, dtype=dtype)
    px = params[:, 0].view(-1, 1, 1, 1)
    py = params[:, 1].view(-1, 1, 1, 1)
    if MaskKind(kind) is MaskKind.RECTANGULAR:
        return ((wx.abs() <= px) & (wy.abs() <= py)).to(dtype)
    return torch.exp(-0.5 * (wx ** 2 / px ** 2 + wy ** 2 / py ** 2))


def fmim_split(x, sigma, kind=MaskKind.GAUSSIAN):
    """
    Split x into complementary (low, high) bands with a frequency mask.

    x is either a (B, C, H, W) tensor with sigma of shape (B, 2) or a pair, or an
    H×W×C numpy image with a sigma pair. high = x - low exactly.
    """
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].double()
        low, high = fmim_split(t, sigma, kind)
        return low[0].permute(1, 2, 0).numpy(), high[0].permute(1, 2, 0).numpy()
    if x.dim() != 4:
        raise InvalidArgumentError(f"Please provide a (B, C, H, W) tensor, got shape {tuple(x.shape)}.")
    b, _, h, w = x.shape
    if h < 2 or w < 2:
        raise InvalidArgumentError(f"Please provide spatial dims of at least 2, got {h}x{w}.")
    sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    if sigma.dim() == 1:
        sigma = sigma.expand(b, 2)
    if not bool(torch.all(sigma > 0)):
        raise InvalidArgumentError("Please provide positive sigmas for the frequency split.")
    mask = spectral_mask(kind, h, w, sigma, x.dtype, x.device)
    low = torch.fft.ifft2(torch.fft.fft2(x) * mask).real
    return low, x - low


class BandCrossAttention(nn.Module):
    """Channel-wise (transposed) attention: queries from features, keys/values from a band."""

    def __init__(self, channels, num_heads=1):
        super().__init__()
        if channels % num_heads:
            raise InvalidArgumentError(f"Please provide channels ({channels}) divisible by heads ({num_heads}).")
        self.num_heads = num_heads
        self.temperature = nn.Parameter(torch.ones(num_heads, 1, 1))
        self.q = nn.Conv2d(channels, channels, kernel_size=1)
        self.kv = nn.Conv2d(channels, channels * 2, kernel_size=1)
        self.project_out = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, band, x):
        _, _, h, w = x.shape
        q = rearrange(self.q(x), 'b (head c) h w -> b head c (h w)', head=self.num_heads)
        k, v = self.kv(band).chunk(2, dim=1)
        k = rearrange(k, 'b (head c) h w -> b head c (h w)', head=self.num_heads)
        v = rearrange(v, 'b (head c) h w -> b head c (h w)', head=self.num_heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)
        out = rearrange(attn @ v, 'b head c (h w) -> b (head c) h w', head=self.num_heads, h=h, w=w)
        return self.project_out(out)


class GAFLB(nn.Module):
    """
    Gaussian adaptive frequency learning block.

    A small head predicts a per-image spatial blur width s in ``sigma_bounds``
    from the degraded image; the projected image is split with a Gaussian (or,
    for the hard-mask ablation, rectangular) mask of frequency width 1/s; each
    band modulates the features through cross attention and the two results
    are fused back residually. The fusion starts at zero, so a fresh block is
    the identity.
    """

    def __init__(self, channels, num_heads=1, sigma_bounds=(0.5, 8.0), mask_kind=MaskKind.GAUSSIAN, sigma_hidden=8):
        super().__init__()
        lo, hi = sigma_bounds
        if not 0 < lo < hi:
            raise InvalidArgumentError(f"Please provide sigma bounds with 0 < min < max, got {sigma_bounds}.")
        self.sigma_bounds = (float(lo), float(hi))
        self.mask_kind = MaskKind(mask_kind)
        self.enhance = nn.Sequential(
            nn.Conv2d(3, channels, kernel_size=1),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )
        self.sigma_head = nn.Sequential(
            nn.Conv2d(3, sigma_hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(sigma_hidden, 2),
        )
        self.cross_low = BandCrossAttention(channels, num_heads)
        self.cross_high = BandCrossAttention(channels, num_heads)
        self.fuse = nn.Conv2d(channels * 2, channels, kernel_size=1)
        nn.init.zeros_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)
        trunc_normal_(self.sigma_head[-1].weight, std=0.02)

    def predict_sigma(self, image):
        """Spatial blur widths (B, 2) = (s_x, s_y), always inside the bounds."""
        lo, hi = self.sigma_bounds
        s = lo + (hi - lo) * torch.sigmoid(self.sigma_head(image))
        return s.clamp(lo, hi)

    def bands(self, image):
        frequency_sigma = 1.0 / self.predict_sigma(image)
        return fmim_split(self.enhance(image), frequency_sigma, self.mask_kind)

    def forward(self, x, image):
        if x.shape[-2:] != image.shape[-2:]:
            raise InvalidArgumentError(
                f"Please provide an image resampled to the feature resolution {tuple(x.shape[-2:])}, "
                f"got {tuple(image.shape[-2:])}."
            )
        low, high = self.bands(image)
        x_low = self.cross_low(low, x)
        x_high = self.cross_high(high, x)
        return x + self.fuse(torch.cat([x_low, x_high], dim=1))
