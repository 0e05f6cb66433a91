import hashlib
import json
import os
import random
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from PIL import Image

GFRRN_DEVICE = os.environ.setdefault("GFRRN_DEVICE", "cpu")


class GFRRNError(Exception):
    pass


class InvalidArgumentError(GFRRNError, ValueError):
    pass


class ConfigurationError(GFRRNError):
    pass


class TrainingError(GFRRNError):
    def __init__(self, message, step=None, terms=None):
        super().__init__(message)
        self.step = step
        self.terms = terms or {}


def gfrrn_warning(action, error):
    logger.warning(f"While {action} GFRRN had the following error: {error}")


def config_hash(config):
    """
    SHA-256 of the canonical (sorted-key, compact) JSON form of a config dict.
    """
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def get_device(device=None):
    return torch.device(device or GFRRN_DEVICE)


@contextmanager
def atomic_path(path):
    """
    Yield a temporary sibling path; on success it replaces ``path`` in one rename.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def check_same_shape(*arrays, names=None):
    shapes = [tuple(a.shape) for a in arrays]
    if any(s != shapes[0] for s in shapes):
        names = names or [f"arg{i}" for i in range(len(arrays))]
        described = ", ".join(f"{n}={s}" for n, s in zip(names, shapes))
        raise InvalidArgumentError(f"Please provide arrays of identical shape ({described}).")


def load_image(path):
    """
    Read an 8-bit RGB image as an H×W×3 float64 array in [0, 1].
    """
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Please provide an existing image file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def to_tensor(img, dtype=torch.float32, device=None):
    """H×W×C numpy image -> (1, C, H, W) tensor."""
    t = torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)))
    return t.unsqueeze(0).to(dtype=dtype, device=get_device(device))


def to_image(tensor):
    """(1, C, H, W) or (C, H, W) tensor -> H×W×C float64 numpy image."""
    t = tensor.detach().cpu().double()
    if t.dim() == 4:
        t = t[0]
    return t.permute(1, 2, 0).numpy()
