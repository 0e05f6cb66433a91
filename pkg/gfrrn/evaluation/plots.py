from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from gfrrn.frequency import MaskKind, build_mask, impulse_response  # noqa: E402

SURFACE_FILES = {
    (MaskKind.GAUSSIAN, "mask"): "gaussian_mask.png",
    (MaskKind.GAUSSIAN, "impulse"): "gaussian_impulse.png",
    (MaskKind.RECTANGULAR, "mask"): "rectangular_mask.png",
    (MaskKind.RECTANGULAR, "impulse"): "rectangular_impulse.png",
}


def _surface(path, grid, title):
    h, w = grid.shape
    yy, xx = np.mgrid[0:h, 0:w]
    fig = plt.figure(figsize=(5, 4))
    ax = fig.add_subplot(projection="3d")
    ax.plot_surface(xx, yy, grid, cmap="viridis", linewidth=0, antialiased=False)
    ax.set_title(title)
    fig.savefig(path, dpi=80)
    plt.close(fig)


def plot_filter_surfaces(out_dir, size=128, sigma=0.3, cutoff=np.pi / 4):
    """3D surfaces of both masks and their impulse responses; returns the four PNG paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind, param in ((MaskKind.GAUSSIAN, sigma), (MaskKind.RECTANGULAR, cutoff)):
        mask = build_mask(kind, (size, size), (param, param))
        for what, grid in (("mask", mask.grid), ("impulse", impulse_response(mask))):
            path = out_dir / SURFACE_FILES[(kind, what)]
            _surface(path, grid, f"{kind.value} {what}")
            paths.append(path)
    return paths


def plot_window_scores(score_map, path, title="window importance"):
    """Heatmap of a (H, W) or (1, 1, H, W) window-score map."""
    score_map = np.asarray(score_map).squeeze()
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(score_map, cmap="magma", vmin=0.0, vmax=2.0)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.axis("off")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)
