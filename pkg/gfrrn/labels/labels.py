"""Synthetic mixtures and unified reflection labels."""
import enum
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from gfrrn.utils import ConfigurationError, InvalidArgumentError, check_same_shape, gfrrn_warning

LABEL_SIGMA_AT_384 = 2.0
SIGNED_PNG_SCALE = 32767.5


class LabelMode(str, enum.Enum):
    UNIFIED = "unified"  # (I - T)_low
    DIFFERENCE = "difference"  # I - T
    REFLECTION = "reflection"  # true R where known


@dataclass
class LabelTriplet:
    transmission: np.ndarray
    reflection_label: np.ndarray
    residual_label: np.ndarray

    def reconstruct(self):
        return self.transmission + self.reflection_label + self.residual_label


@dataclass
class SynthesisConfig:
    sigma_range: tuple = (0.2, 4.0)
    weight_range: tuple = (0.4, 1.0)

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ConfigurationError("Please provide a positive, ordered reflection blur range.")
        lo, hi = self.weight_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigurationError("Please provide a reflection weight range inside [0, 1].")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Please remove unknown synthesis config keys: {sorted(unknown)}")
        return cls(**{key: tuple(value) for key, value in data.items()})

    def to_dict(self):
        return {"sigma_range": list(self.sigma_range), "weight_range": list(self.weight_range)}


@dataclass
class SynthesisParams:
    reflection_blur_sigma: float
    reflection_weight: float
    rng_seed: int = 0

    def __post_init__(self):
        if not self.reflection_blur_sigma > 0:
            raise InvalidArgumentError("Please provide a positive reflection blur sigma.")
        if not 0.0 <= self.reflection_weight <= 1.0:
            raise InvalidArgumentError("Please provide a reflection weight between 0 and 1.")

    def to_dict(self):
        return asdict(self)


def label_sigma_for(size):
    """Default label low-pass sigma, scaled from 2.0 px at 384 px."""
    return LABEL_SIGMA_AT_384 * float(size) / 384.0


def gaussian_kernel_1d(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def lowpass_2d(img, sigma):
    """
    Separable normalised Gaussian blur over the two leading (spatial) axes.

    Kernel radius is ceil(3 * sigma); borders use half-sample symmetric
    reflection, which keeps both the DC gain and the global sum.
    """
    if not np.isfinite(sigma) or sigma <= 0:
        raise InvalidArgumentError(f"Please provide a positive sigma, got {sigma}.")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2:
        raise InvalidArgumentError("Please provide an array with at least two spatial axes.")
    if not np.all(np.isfinite(img)):
        raise InvalidArgumentError("Please provide a finite image.")
    kernel = gaussian_kernel_1d(sigma)
    out = ndimage.convolve1d(img, kernel, axis=0, mode="reflect")
    return ndimage.convolve1d(out, kernel, axis=1, mode="reflect")


def generate_unified_labels(I, T, sigma=None):
    I = np.asarray(I, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    check_same_shape(I, T, names=["I", "T"])
    if sigma is None:
        sigma = label_sigma_for(min(I.shape[:2]))
    diff = I - T
    reflection = lowpass_2d(diff, sigma)
    return LabelTriplet(transmission=T, reflection_label=reflection, residual_label=diff - reflection)


def make_labels(I, T, mode=LabelMode.UNIFIED, sigma=None, R=None):
    """
    Labels under a chosen reflection-label convention. The residual label
    always absorbs the remainder, so T + R_label + N = I in every mode.
    """
    mode = LabelMode(mode)
    if mode is LabelMode.UNIFIED:
        return generate_unified_labels(I, T, sigma)
    I = np.asarray(I, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    check_same_shape(I, T, names=["I", "T"])
    diff = I - T
    if mode is LabelMode.REFLECTION and R is not None:
        reflection = np.asarray(R, dtype=np.float64)
        check_same_shape(I, reflection, names=["I", "R"])
    else:
        # real pairs carry no R; prior work supervises them with I - T
        reflection = diff
    return LabelTriplet(transmission=T, reflection_label=reflection, residual_label=diff - reflection)


def sample_synthesis_params(seed, config=None):
    config = config or SynthesisConfig()
    rng = np.random.default_rng(seed)
    sigma = float(rng.uniform(*config.sigma_range))
    weight = float(rng.uniform(*config.weight_range))
    return SynthesisParams(reflection_blur_sigma=sigma, reflection_weight=weight, rng_seed=int(seed))


def reflection_layer(R, params):
    """The additive reflection component w * blur(R, sigma_r)."""
    return params.reflection_weight * lowpass_2d(R, params.reflection_blur_sigma)


def synthesize_mixture(T, R, params, label_sigma=None, mode=LabelMode.UNIFIED):
    T = np.asarray(T, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    check_same_shape(T, R, names=["T", "R"])
    reflection = reflection_layer(R, params)
    I = np.clip(T + reflection, 0.0, 1.0)
    return I, make_labels(I, T, mode=mode, sigma=label_sigma, R=reflection)


def encode_signed(arr):
    """Signed values in [-1, 1] -> uint16 via round((n + 1) * 32767.5)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        gfrrn_warning("encoding a signed label", f"values span [{arr.min():.4f}, {arr.max():.4f}], clipped to [-1, 1]")
        arr = np.clip(arr, -1.0, 1.0)
    return np.round((arr + 1.0) * SIGNED_PNG_SCALE).astype(np.uint16)


def decode_signed(encoded):
    return np.asarray(encoded, dtype=np.float64) / SIGNED_PNG_SCALE - 1.0
