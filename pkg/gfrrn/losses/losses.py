"""
Training objectives: content, exclusion, perceptual and reconstruction terms
and their weighted total. All terms reduce by mean.
"""
from dataclasses import asdict, dataclass, fields
from typing import ClassVar

import numpy as np
import torch
import torch.nn.functional as F

from gfrrn.utils import ConfigurationError, InvalidArgumentError

PERCEPTUAL_TAPS = 5
EXCLUSION_LEVELS = 3


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.6
    lambda1: float = 0.01
    lambda2: float = 0.2
    omega: tuple = (1.0,) * PERCEPTUAL_TAPS
    eps: float = 1e-6

    def __post_init__(self):
        self.omega = tuple(float(o) for o in self.omega)
        if len(self.omega) != PERCEPTUAL_TAPS:
            raise ConfigurationError(f"Please provide {PERCEPTUAL_TAPS} perceptual weights, got {len(self.omega)}.")
        values = (self.alpha, self.beta, self.lambda1, self.lambda2, *self.omega)
        if any(v < 0 for v in values) or self.eps <= 0:
            raise ConfigurationError("Please provide non-negative loss weights and a positive eps.")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Please remove unknown loss weight keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        data = asdict(self)
        data["omega"] = list(data["omega"])
        return data


@dataclass
class LossReport:
    content: torch.Tensor
    exclusion: torch.Tensor
    perceptual: torch.Tensor
    reconstruction: torch.Tensor
    total: torch.Tensor

    TERMS: ClassVar[tuple] = ("content", "exclusion", "perceptual", "reconstruction", "total")

    def as_dict(self):
        return {name: float(getattr(self, name)) for name in self.TERMS}

    def is_finite(self):
        return all(np.isfinite(v) for v in self.as_dict().values())


def _as_tensor(x, like):
    if isinstance(x, torch.Tensor):
        return x.to(dtype=like.dtype, device=like.device)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x.transpose(2, 0, 1)[None]
    return torch.as_tensor(np.ascontiguousarray(x), dtype=like.dtype, device=like.device)


def _check_aligned(*tensors):
    shapes = [tuple(t.shape) for t in tensors]
    if any(s != shapes[0] for s in shapes):
        raise InvalidArgumentError(f"Please provide aligned tensors, got shapes {shapes}.")


def _forward_diff(x):
    dh = torch.zeros_like(x)
    dw = torch.zeros_like(x)
    dh[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    dw[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return dh, dw


def grad_op(x):
    """Forward differences along H and W; the last row / column is zero."""
    if x.dim() < 2 or x.shape[-2] < 2 or x.shape[-1] < 2:
        raise InvalidArgumentError(f"Please provide spatial dims of at least 2x2, got {tuple(x.shape)}.")
    return _forward_diff(x)


def _gradient_l1(a, b):
    a_h, a_w = grad_op(a)
    b_h, b_w = grad_op(b)
    return (a_h - b_h).abs().mean() + (a_w - b_w).abs().mean()


def content_loss(t_hat, r_hat, n_hat, labels, weights=None):
    w = weights or LossWeights()
    T = _as_tensor(labels.transmission, t_hat)
    R = _as_tensor(labels.reflection_label, t_hat)
    N = _as_tensor(labels.residual_label, t_hat)
    _check_aligned(t_hat, r_hat, n_hat, T, R, N)
    mse = F.mse_loss(t_hat, T) + F.mse_loss(r_hat, R) + w.alpha * F.mse_loss(n_hat, N)
    grads = _gradient_l1(t_hat, T) + _gradient_l1(r_hat, R) + w.alpha * _gradient_l1(n_hat, N)
    return mse + w.beta * grads


def _exclusion_direction(g_t, g_r, eps):
    mu_t = g_t.abs().mean()
    mu_r = g_r.abs().mean()
    xi1 = torch.sqrt(mu_r.clamp_min(eps) / (mu_t + eps))
    xi2 = torch.sqrt(mu_t.clamp_min(eps) / (mu_r + eps))
    return (torch.tanh(xi1 * g_t.abs()) * torch.tanh(xi2 * g_r.abs())).pow(2).mean()


def exclusion_loss(t_hat, r_hat, eps=1e-6, levels=EXCLUSION_LEVELS):
    """
    Gradient-exclusion penalty averaged over ``levels`` bilinear 2**n
    downsamplings, each level summing the H and W direction terms.
    """
    _check_aligned(t_hat, r_hat)
    if t_hat.dim() != 4 or min(t_hat.shape[-2:]) < 4:
        raise InvalidArgumentError(f"Please provide (B, C, H, W) inputs with H, W >= 4, got {tuple(t_hat.shape)}.")
    total = t_hat.new_zeros(())
    for n in range(levels):
        t, r = t_hat, r_hat
        if n:
            t = F.interpolate(t_hat, scale_factor=0.5 ** n, mode="bilinear", align_corners=False)
            r = F.interpolate(r_hat, scale_factor=0.5 ** n, mode="bilinear", align_corners=False)
        t_h, t_w = _forward_diff(t)
        r_h, r_w = _forward_diff(r)
        total = total + _exclusion_direction(t_h, r_h, eps) + _exclusion_direction(t_w, r_w, eps)
    return total / levels


def perceptual_loss(t_hat, T, extractor, omega=None):
    T = _as_tensor(T, t_hat)
    _check_aligned(t_hat, T)
    omega = tuple(omega) if omega is not None else (1.0,) * PERCEPTUAL_TAPS
    feats_hat = list(extractor(t_hat))
    feats = list(extractor(T))
    if len(feats_hat) != PERCEPTUAL_TAPS or len(feats) != PERCEPTUAL_TAPS:
        raise InvalidArgumentError(
            f"Please provide an extractor exposing {PERCEPTUAL_TAPS} feature taps, got {len(feats_hat)}."
        )
    if len(omega) != PERCEPTUAL_TAPS:
        raise InvalidArgumentError(f"Please provide {PERCEPTUAL_TAPS} perceptual weights, got {len(omega)}.")
    return sum(w * (a - b).abs().mean() for w, a, b in zip(omega, feats_hat, feats))


def reconstruction_loss(image, t_hat, r_hat, n_hat):
    image = _as_tensor(image, t_hat)
    _check_aligned(image, t_hat, r_hat, n_hat)
    return (image - t_hat - r_hat - n_hat).abs().mean()


def total_loss(content, exclusion, perceptual, reconstruction, weights=None):
    w = weights or LossWeights()
    terms = [torch.as_tensor(t, dtype=torch.float64) if not isinstance(t, torch.Tensor) else t
             for t in (content, exclusion, perceptual, reconstruction)]
    content, exclusion, perceptual, reconstruction = terms
    total = content + exclusion + w.lambda1 * perceptual + w.lambda2 * reconstruction
    return LossReport(content, exclusion, perceptual, reconstruction, total)


def compute_losses(output, labels, image, extractor, weights=None):
    """All four terms for one forward pass, combined into a LossReport."""
    w = weights or LossWeights()
    return total_loss(
        content_loss(output.t_hat, output.r_hat, output.n_hat, labels, w),
        exclusion_loss(output.t_hat, output.r_hat, eps=w.eps),
        perceptual_loss(output.t_hat, labels.transmission, extractor, w.omega),
        reconstruction_loss(image, output.t_hat, output.r_hat, output.n_hat),
        w,
    )
