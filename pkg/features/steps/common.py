from contextlib import contextmanager
from io import StringIO
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from scipy import ndimage

from gfrrn.labels import DatasetManifest, write_manifest, write_pair

WARNING_STR = "GFRRN had the following error:"


@contextmanager
def captured_log(level="WARNING"):
    buffer = StringIO()
    sink = logger.add(buffer, level=level, format="{message}")
    try:
        yield buffer
    finally:
        logger.remove(sink)


def smooth_image(rng, h, w, sigma=2.0):
    """Random RGB image in [0.1, 0.9] with some spatial structure."""
    img = ndimage.gaussian_filter(rng.random((h, w, 3)), sigma=(sigma, sigma, 0))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return 0.1 + 0.8 * img


def write_pairs(root, count, size, seed=0, identical=False):
    """``count`` pair directories plus manifest.csv; returns the manifest path."""
    rng = np.random.default_rng(seed)
    records = []
    for k in range(count):
        T = smooth_image(rng, size, size)
        I = T.copy() if identical else np.clip(T + 0.3 * smooth_image(rng, size, size, sigma=4.0), 0, 1)
        records.append(write_pair(root, f"{k:04d}", I, T))
    return write_manifest(Path(root) / "manifest.csv", DatasetManifest(records))


def double_tensor(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def randomize_(module, std=0.1, seed=0):
    """Overwrite every parameter with small random values (breaks zero inits)."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float64).to(p.dtype) * std)
    return module
