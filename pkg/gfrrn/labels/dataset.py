"""Pair directories, manifests and label caches on disk."""
from dataclasses import dataclass, field
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import pandas as pd
from loguru import logger
from PIL import Image
from tqdm import tqdm

from gfrrn.labels.labels import (LabelTriplet, decode_signed, encode_signed, sample_synthesis_params,
                                 synthesize_mixture)
from gfrrn.utils import InvalidArgumentError, load_image, save_image

MANIFEST_COLUMNS = ["pair_id", "input", "transmission"]
LABEL_FILES = ("T.png", "R_low.png", "N.png")


@dataclass
class PairRecord:
    pair_id: str
    input_path: Path
    transmission_path: Path

    def load(self):
        I = load_image(self.input_path)
        T = load_image(self.transmission_path)
        if I.shape != T.shape:
            raise InvalidArgumentError(
                f"Please provide equal-sized I and T for pair {self.pair_id}: {I.shape} vs {T.shape}."
            )
        return I, T


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self):
        for record in self.records:
            for path in (record.input_path, record.transmission_path):
                if not Path(path).exists():
                    raise InvalidArgumentError(f"Please provide a manifest whose files exist: {path}")
        return self


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Please provide an existing manifest file: {path}")
    frame = pd.read_csv(path, header=None, names=MANIFEST_COLUMNS, dtype=str, skipinitialspace=True)
    base = path.parent
    records = [
        PairRecord(str(row.pair_id), base / row.input, base / row.transmission)
        for row in frame.itertuples(index=False)
    ]
    return DatasetManifest(records).validate()


def write_manifest(path, manifest):
    path = Path(path)
    base = path.parent
    rows = [
        (r.pair_id, Path(r.input_path).relative_to(base).as_posix(), Path(r.transmission_path).relative_to(base).as_posix())
        for r in manifest
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, header=False, index=False)
    return path


def scan_pair_directory(root):
    """Manifest for ``<root>/<pair_id>/I.png`` + ``T.png`` layouts."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgumentError(f"Please provide an existing data directory: {root}")
    records = [
        PairRecord(d.name, d / "I.png", d / "T.png")
        for d in sorted(root.iterdir())
        if d.is_dir() and (d / "I.png").exists() and (d / "T.png").exists()
    ]
    if not records:
        raise InvalidArgumentError(f"Please provide a data directory with <pair_id>/I.png and T.png entries: {root}")
    return DatasetManifest(records)


def load_dataset(data_root):
    """A manifest file, a directory holding ``manifest.csv``, or a bare pair directory."""
    data_root = Path(data_root)
    if data_root.is_file():
        return read_manifest(data_root)
    if (data_root / "manifest.csv").exists():
        return read_manifest(data_root / "manifest.csv")
    return scan_pair_directory(data_root)


def write_pair(root, pair_id, I, T):
    pair_dir = Path(root) / pair_id
    save_image(pair_dir / "I.png", I)
    save_image(pair_dir / "T.png", T)
    return PairRecord(pair_id, pair_dir / "I.png", pair_dir / "T.png")


def write_signed_png(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, encode_signed(arr))


def read_signed_png(path):
    return decode_signed(iio.imread(path))


def write_label_cache(out_dir, labels):
    """T as 8-bit PNG; the signed reflection and residual labels as 16-bit offset PNGs."""
    out_dir = Path(out_dir)
    t_name, r_name, n_name = LABEL_FILES
    save_image(out_dir / t_name, labels.transmission)
    write_signed_png(out_dir / r_name, labels.reflection_label)
    write_signed_png(out_dir / n_name, labels.residual_label)
    return [out_dir / name for name in LABEL_FILES]


def read_label_cache(out_dir):
    out_dir = Path(out_dir)
    t_name, r_name, n_name = LABEL_FILES
    return LabelTriplet(
        transmission=load_image(out_dir / t_name),
        reflection_label=read_signed_png(out_dir / r_name),
        residual_label=read_signed_png(out_dir / n_name),
    )


def list_images(folder):
    folder = Path(folder)
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in exts)


def center_crop_resize(img, size):
    """Centre square crop then resize to ``size`` (Pillow bicubic)."""
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = np.clip(img[top:top + side, left:left + side], 0, 1)
    pil = Image.fromarray(np.round(crop * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    return np.asarray(pil, dtype=np.float64) / 255.0


def synthesize_dataset(source_dir, out_dir, count, size=64, seed=0, config=None, label_sigma=None):
    """
    Build ``count`` synthetic pairs from a folder of photos. Pair k uses photo
    k as transmission and a different photo as reflection; parameters come
    from seed (seed, k). Writes pair directories, ``manifest.csv`` and
    ``synthesis.csv``.
    """
    sources = list_images(source_dir)
    if len(sources) < 2:
        raise InvalidArgumentError(f"Please provide at least two source images in {source_dir}.")
    if count < 1:
        raise InvalidArgumentError("Please provide a positive pair count.")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records, rows = [], []
    for k in tqdm(range(count), desc="synth"):
        t_index = k % len(sources)
        r_index = (t_index + 1 + int(rng.integers(len(sources) - 1))) % len(sources)
        T = center_crop_resize(load_image(sources[t_index]), size)
        R = center_crop_resize(load_image(sources[r_index]), size)
        params = sample_synthesis_params(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), config)
        I, _ = synthesize_mixture(T, R, params, label_sigma)
        pair_id = f"{k:04d}"
        records.append(write_pair(out_dir, pair_id, I, T))
        rows.append({"pair_id": pair_id, "transmission_source": sources[t_index].name,
                     "reflection_source": sources[r_index].name, **params.to_dict()})
    manifest = DatasetManifest(records)
    write_manifest(out_dir / "manifest.csv", manifest)
    pd.DataFrame(rows).to_csv(out_dir / "synthesis.csv", index=False)
    logger.info("Wrote {} synthetic pairs to {}", count, out_dir)
    return manifest
