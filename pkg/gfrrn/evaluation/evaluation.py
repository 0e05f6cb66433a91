"""PSNR/SSIM metrics, the paired-dataset evaluation harness, report writers and window importance maps."""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from loguru import logger
from skimage.metrics import mean_squared_error, structural_similarity
from tqdm import tqdm

from gfrrn.adapters import ParamGroup
from gfrrn.attention import remap_window_scores, window_partition
from gfrrn.evaluation.plots import plot_window_scores
from gfrrn.frequency import MaskKind, filter_report
from gfrrn.labels import DatasetManifest, load_dataset
from gfrrn.training import model_from_checkpoint, read_checkpoint
from gfrrn.utils import (ConfigurationError, InvalidArgumentError, atomic_path, check_same_shape, load_image,
                         to_tensor)

PSNR_CAP = 99.0
SSIM_MIN_SIZE = 11
IDENTITY = "identity"
REPORT_COLUMNS = ["pair_id", "psnr", "ssim"]
DEFAULT_SIGMAS = (0.1, 0.2, 0.3, 0.4, (0.15, 0.35))
DEFAULT_CUTOFFS = (np.pi / 8, np.pi / 4, np.pi / 2, 3 * np.pi / 4, 0.9 * np.pi)


def psnr(a, b):
    """10 log10(1 / MSE) over every channel, data range 1, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=["a", "b"])
    mse = mean_squared_error(a, b)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b):
    """Gaussian-window (11x11, sigma 1.5) SSIM, averaged over the RGB channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=["a", "b"])
    if min(a.shape[:2]) < SSIM_MIN_SIZE:
        raise InvalidArgumentError(f"Please provide images of at least {SSIM_MIN_SIZE}px per side, got {a.shape[:2]}.")
    return float(structural_similarity(
        a, b, data_range=1.0, channel_axis=-1 if a.ndim == 3 else None,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


@dataclass
class MetricsReport:
    rows: pd.DataFrame
    checkpoint: str = IDENTITY
    config_hash: str = None

    def __len__(self):
        return len(self.rows)

    @property
    def mean_psnr(self):
        return float(self.rows["psnr"].mean())

    @property
    def mean_ssim(self):
        return float(self.rows["ssim"].mean())

    def summary(self):
        return {
            "count": len(self),
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
            "checkpoint": str(self.checkpoint),
            "config_hash": self.config_hash,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with atomic_path(out_dir / "report.csv") as tmp:
            self.rows.to_csv(tmp, index=False)
        with atomic_path(out_dir / "summary.json") as tmp:
            tmp.write_text(json.dumps(self.summary(), indent=2))
        return out_dir / "report.csv", out_dir / "summary.json"


def identity_restorer(image):
    return image


def load_restorer(checkpoint=IDENTITY, expected_hash=None):
    """(restorer, config hash). ``"identity"`` gives T̂ := I."""
    if checkpoint is None or str(checkpoint) == IDENTITY:
        return identity_restorer, None
    model, ckpt = model_from_checkpoint(checkpoint)
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        raise ConfigurationError(
            f"Checkpoint config hash {ckpt.config_hash[:12]} does not match the given config {expected_hash[:12]}."
        )

    def restore(image):
        return np.clip(model.restore(image)[0], 0.0, 1.0)

    return restore, ckpt.config_hash


def evaluate_dataset(manifest, checkpoint=IDENTITY, out_dir=None, expected_hash=None, show_progress=True):
    """Per-pair PSNR/SSIM of the restored T̂ against T; optionally writes report.csv + summary.json."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_dataset(manifest)
    manifest.validate()
    restorer, hash_ = load_restorer(checkpoint, expected_hash)
    rows = []
    for record in tqdm(manifest, desc="eval", disable=not show_progress):
        I, T = record.load()
        t_hat = restorer(I)
        rows.append({"pair_id": record.pair_id, "psnr": psnr(t_hat, T), "ssim": ssim(t_hat, T)})
    report = MetricsReport(pd.DataFrame(rows, columns=REPORT_COLUMNS), str(checkpoint), hash_)
    logger.info("Evaluated {} pairs: PSNR {:.3f} dB, SSIM {:.4f}", len(report), report.mean_psnr, report.mean_ssim)
    if out_dir is not None:
        report.write(out_dir)
    return report


def analyze_filters(size=128, sigmas=DEFAULT_SIGMAS, cutoffs=DEFAULT_CUTOFFS):
    """Ringing table for Gaussian masks at ``sigmas`` and rectangular masks at ``cutoffs``."""
    rows = []
    for kind, settings in ((MaskKind.GAUSSIAN, sigmas), (MaskKind.RECTANGULAR, cutoffs)):
        for setting in settings:
            params = setting if isinstance(setting, tuple) else (setting, setting)
            rows.append(filter_report(kind, (size, size), params))
    return pd.DataFrame(rows)


def weights_summary(checkpoint):
    """Per-group parameter counts of a checkpoint, split by trainable flag."""
    ckpt = read_checkpoint(checkpoint)
    groups, trainable = ckpt.header["groups"], ckpt.header["trainable"]
    counts = {g.value: {"trainable": 0, "frozen": 0} for g in ParamGroup}
    for name, array in ckpt.params.items():
        slot = "trainable" if trainable.get(name) else "frozen"
        counts[groups[name]][slot] += int(array.size)
    return {
        "checkpoint": str(checkpoint),
        "config_hash": ckpt.config_hash,
        "tuning_mode": ckpt.header["model_config"]["tuning_mode"],
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "groups": counts,
    }


@dataclass
class WindowScoreMap:
    """One decoder level's WIE scores spread over the input grid, (1, 1, H, W) per stream."""
    level: int
    transmission: np.ndarray
    reflection: np.ndarray

    @property
    def combined(self):
        return (self.transmission + self.reflection) / 2.0


def window_score_maps(model, image):
    """
    Run ``image`` (H×W×3) through ``model`` and collect the window importance
    scores of the first self-attention block of every decoder level.
    """
    if any(getattr(level.blocks[0].self_attn, "wie", None) is None for level in model.levels):
        raise ConfigurationError("Please provide a checkpoint built with window importance estimators (attention daa).")
    captured = {i: {} for i in range(len(model.levels))}
    handles = []
    for i, level in enumerate(model.levels):
        block = level.blocks[0]

        def keep_shape(module, args, slot=captured[i]):
            slot["shape"] = args[0].f_t.shape

        def keep_scores(module, args, output, slot=captured[i]):
            slot["scores"] = output.detach()

        handles.append(block.register_forward_pre_hook(keep_shape))
        handles.append(block.self_attn.wie.register_forward_hook(keep_scores))
    param = next(model.parameters())
    x = to_tensor(np.asarray(image), dtype=param.dtype, device=param.device)
    h, w = x.shape[-2:]
    try:
        with torch.no_grad():
            padded = model.pad_input(x).shape[-2:]
            model(x)
    finally:
        for handle in handles:
            handle.remove()
    maps = []
    for i, slot in captured.items():
        b, _, fh, fw = slot["shape"]
        windows = window_partition(torch.zeros(b, fh, fw, 1), model.levels[i].cfg.window)
        streams = []
        for scores in slot["scores"].cpu().chunk(2, dim=0):
            grid = F.interpolate(remap_window_scores(scores, windows), size=tuple(padded), mode="nearest")
            streams.append(grid[..., :h, :w].double().numpy())
        maps.append(WindowScoreMap(i, *streams))
    return maps


def write_window_scores(maps, out_dir):
    """``wie_level{i}.png`` heat-maps plus ``wie_level{i}.csv`` raw values of the stream-averaged scores."""
    out_dir = Path(out_dir)
    paths = []
    for m in maps:
        grid = m.combined[0, 0]
        png = plot_window_scores(grid, out_dir / f"wie_level{m.level}.png", title=f"level {m.level} window importance")
        with atomic_path(out_dir / f"wie_level{m.level}.csv") as tmp:
            pd.DataFrame(grid).to_csv(tmp, index=False, header=False)
        paths += [png, out_dir / f"wie_level{m.level}.csv"]
    logger.info("Wrote window importance maps for {} decoder levels to {}", len(maps), out_dir)
    return paths


def inspect_weights(checkpoint, image, out_dir):
    """Window importance heat-maps of ``image`` under ``checkpoint``, plus the per-group summary."""
    model, _ = model_from_checkpoint(checkpoint)
    image = load_image(image) if isinstance(image, (str, Path)) else image
    paths = write_window_scores(window_score_maps(model, image), out_dir)
    summary = weights_summary(checkpoint)
    summary["files"] = [str(p) for p in paths]
    return summary
