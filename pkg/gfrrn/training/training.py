"""
Optimisation loop, npz checkpoints, the prefetching sample queue and the
finite-difference gradient checker.
"""
import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import yaml
from loguru import logger
from torchvision.models import VGG19_Weights
from tqdm import tqdm

from gfrrn.adapters import ParamGroup, ParamStore, TuningMode
from gfrrn.labels import (LabelMode, LabelTriplet, SynthesisConfig, center_crop_resize,
                          label_sigma_for, make_labels, sample_synthesis_params,
                          synthesize_mixture)
from gfrrn.losses import LossWeights, VGGExtractor, compute_losses
from gfrrn.network import GFRRN, ModelConfig
from gfrrn.utils import (ConfigurationError, GFRRNError, InvalidArgumentError, TrainingError,
                         atomic_path, get_device, gfrrn_warning, seed_everything, to_tensor)

CHECKPOINT_VERSION = 1
HEADER_KEY = "__header__"
METRIC_COLUMNS = ["epoch", "step", "content", "exclusion", "perceptual", "reconstruction", "total"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 60
    image_size: int = 384
    tuning_mode: str = TuningMode.MONA.value
    seed: int = 0
    label_mode: str = LabelMode.UNIFIED.value
    label_sigma: float = None
    synthetic_fraction: float = 0.5
    max_steps: int = None
    checkpoint_every: int = 1
    prefetch: int = 2
    vgg_weights: str = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"Please provide a positive learning rate, got {self.learning_rate}.")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("Please provide epochs, batch_size and checkpoint_every of at least 1.")
        if not 0.0 <= self.synthetic_fraction <= 1.0:
            raise ConfigurationError("Please provide a synthetic_fraction inside [0, 1].")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("Please provide a positive max_steps.")
        try:
            self.tuning_mode = TuningMode(self.tuning_mode).value
            self.label_mode = LabelMode(self.label_mode).value
            if self.vgg_weights is not None:
                VGG19_Weights.verify(self.vgg_weights)
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Please provide a valid train config: {e}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Please remove unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    @property
    def sigma(self):
        return self.label_sigma if self.label_sigma is not None else label_sigma_for(self.image_size)


@dataclass
class RunConfig:
    """The four config sections of a YAML run file: model, train, loss, synthesis."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {"model", "train", "loss", "synthesis"}
        if unknown:
            raise ConfigurationError(f"Please remove unknown config sections: {sorted(unknown)}")
        model = dict(data.get("model") or {})
        train = dict(data.get("train") or {})
        mode = train.get("tuning_mode") or model.get("tuning_mode") or TuningMode.MONA.value
        model["tuning_mode"] = train["tuning_mode"] = mode
        return cls(
            model=ModelConfig.from_dict(model),
            train=TrainConfig.from_dict(train),
            loss=LossWeights.from_dict(data.get("loss")),
            synthesis=SynthesisConfig.from_dict(data.get("synthesis")),
        )

    @classmethod
    def from_yaml(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Please provide an existing config file: {path}")
        with open(path) as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigurationError(f"Please provide a valid YAML config: {e}")
        return cls.from_dict(data)

    def with_mode(self, mode):
        """Same run with ``mode`` set on both the model and the train section."""
        mode = TuningMode(mode).value
        model = ModelConfig.from_dict({**self.model.to_dict(), "tuning_mode": mode})
        train = TrainConfig.from_dict({**self.train.to_dict(), "tuning_mode": mode})
        return RunConfig(model, train, self.loss, self.synthesis)

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "synthesis": self.synthesis.to_dict(),
        }


@dataclass
class Sample:
    pair_id: str
    image: np.ndarray
    labels: LabelTriplet
    synthetic: bool = False
    params: dict = None


def sample_seed(seed, epoch, index):
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def load_training_pairs(manifest, image_size):
    """(pair_id, I, T) triples, centre-cropped and resized to ``image_size``."""
    pairs = []
    for record in manifest:
        I, T = record.load()
        pairs.append((record.pair_id, center_crop_resize(I, image_size), center_crop_resize(T, image_size)))
    if not pairs:
        raise InvalidArgumentError("Please provide a dataset with at least one pair.")
    return pairs


def epoch_samples(pairs, epoch, train_cfg, synthesis_cfg):
    """
    The epoch's samples in a fixed order. Each slot is either the real pair or
    a fresh synthetic mixture of its T with another pair's T as reflection,
    decided and parameterised by a seed derived from (seed, epoch, index).
    """
    n = len(pairs)
    for index, (pair_id, I, T) in enumerate(pairs):
        seed = sample_seed(train_cfg.seed, epoch, index)
        rng = np.random.default_rng(seed)
        if rng.random() < train_cfg.synthetic_fraction:
            other = pairs[(index + 1 + epoch) % n][2] if n > 1 else T[:, ::-1]
            params = sample_synthesis_params(seed, synthesis_cfg)
            image, labels = synthesize_mixture(T, other, params, train_cfg.sigma, train_cfg.label_mode)
            yield Sample(pair_id, image, labels, synthetic=True, params=params.to_dict())
        else:
            labels = make_labels(I, T, train_cfg.label_mode, train_cfg.sigma)
            yield Sample(pair_id, I, labels)


def collate(samples, dtype=torch.float32, device=None):
    def stack(arrays):
        return torch.cat([to_tensor(a, dtype=dtype, device=device) for a in arrays], dim=0)

    image = stack([s.image for s in samples])
    labels = LabelTriplet(
        transmission=stack([s.labels.transmission for s in samples]),
        reflection_label=stack([s.labels.reflection_label for s in samples]),
        residual_label=stack([s.labels.residual_label for s in samples]),
    )
    return image, labels


def batched(iterable, size):
    batch = []
    for item in iterable:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


class PrefetchQueue:
    """
    Bounded FIFO fed by one producer thread. Items come out in production
    order; a producer exception is re-raised in the consumer.
    """

    _DONE = object()

    def __init__(self, producer, maxsize=2):
        if maxsize < 1:
            raise InvalidArgumentError("Please provide a queue size of at least 1.")
        self._queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._error = None
        self._thread = threading.Thread(target=self._run, args=(producer,), daemon=True)
        self._thread.start()

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, producer):
        try:
            for item in producer:
                if not self._put(item):
                    return
        except Exception as e:
            self._error = e
        finally:
            self._put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                break
            yield item
        if self._error is not None:
            raise self._error

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def build_optimizer(store, learning_rate):
    """Adam over the trainable entries only (frozen tensors never get state)."""
    params = store.trainable_parameters()
    if not params:
        raise ConfigurationError("Please configure at least one trainable parameter.")
    return torch.optim.Adam(params, lr=learning_rate)


def train_step(model, optimizer, batch, extractor, weights=None, step=0):
    image, labels = batch
    optimizer.zero_grad(set_to_none=True)
    output = model(image)
    report = compute_losses(output, labels, image, extractor, weights)
    if not report.is_finite():
        terms = report.as_dict()
        raise TrainingError(f"Non-finite loss at step {step}: {terms}", step=step, terms=terms)
    report.total.backward()
    optimizer.step()
    return report


def _name_map(model):
    return {id(p): name for name, p in model.named_parameters()}


def save_checkpoint(path, model, optimizer=None, store=None, epoch=0, step=0, run_config=None):
    """
    Atomic ``.npz`` checkpoint: ``param/<name>`` and
    ``optim/<name>/exp_avg|exp_avg_sq`` as little-endian float32 plus a
    ``__header__`` JSON record.
    """
    store = store or ParamStore.from_module(model)
    arrays = {
        f"param/{name}": p.detach().cpu().numpy().astype("<f4")
        for name, p in model.named_parameters()
    }
    adam_steps = {}
    if optimizer is not None:
        names = _name_map(model)
        for p, state in optimizer.state.items():
            name = names[id(p)]
            arrays[f"optim/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy().astype("<f4")
            arrays[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
            adam_steps[name] = int(float(state["step"]))
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": model.config.hash(),
        "model_config": model.config.to_dict(),
        "run_config": run_config.to_dict() if run_config is not None else None,
        "groups": {name: entry.group.value for name, entry in store.items()},
        "trainable": {name: bool(entry.trainable) for name, entry in store.items()},
        "epoch": int(epoch),
        "step": int(step),
        "adam_steps": adam_steps,
    }
    arrays[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    with atomic_path(path) as tmp:
        np.savez(tmp, **arrays)
    logger.debug("Wrote checkpoint {} (epoch {}, step {})", path, epoch, step)
    return Path(path)


@dataclass
class Checkpoint:
    path: Path
    header: dict
    params: dict
    optim: dict

    @property
    def epoch(self):
        return self.header["epoch"]

    @property
    def step(self):
        return self.header["step"]

    @property
    def config_hash(self):
        return self.header["config_hash"]


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Please provide an existing checkpoint: {path}")
    with np.load(path) as archive:
        if HEADER_KEY not in archive.files:
            raise ConfigurationError(f"Please provide a GFRRN checkpoint (no header record): {path}")
        header = json.loads(str(archive[HEADER_KEY]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"Unsupported checkpoint format version {header.get('format_version')}.")
        params, optim = {}, {}
        for key in archive.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = archive[key]
            elif key.startswith("optim/"):
                name, slot = key[len("optim/"):].rsplit("/", 1)
                optim.setdefault(name, {})[slot] = archive[key]
    return Checkpoint(path, header, params, optim)


def load_checkpoint(path, model=None, optimizer=None, expected_hash=None):
    """Read a checkpoint and, when given, restore ``model`` and ``optimizer`` in place."""
    ckpt = read_checkpoint(path)
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        raise ConfigurationError(
            f"Checkpoint config hash {ckpt.config_hash[:12]} does not match the model config {expected_hash[:12]}."
        )
    if model is not None:
        if model.config.hash() != ckpt.config_hash:
            raise ConfigurationError("Please provide a model built from the checkpoint's config.")
        named = dict(model.named_parameters())
        missing = set(named) - set(ckpt.params)
        if missing:
            raise ConfigurationError(f"Checkpoint lacks parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in named.items():
                p.copy_(torch.from_numpy(ckpt.params[name].astype(np.float32)).to(p.dtype))
    if optimizer is not None and model is not None:
        named = dict(model.named_parameters())
        for name, slots in ckpt.optim.items():
            p = named[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.header["adam_steps"][name])),
                "exp_avg": torch.from_numpy(slots["exp_avg"].astype(np.float32)).to(p),
                "exp_avg_sq": torch.from_numpy(slots["exp_avg_sq"].astype(np.float32)).to(p),
            }
    return ckpt


def model_from_checkpoint(path, device=None):
    ckpt = read_checkpoint(path)
    model = GFRRN(ModelConfig.from_dict(ckpt.header["model_config"])).to(get_device(device))
    load_checkpoint(path, model)
    model.eval()
    return model, ckpt


@dataclass
class FitResult:
    checkpoints: list
    metrics: pd.DataFrame
    trajectory: pd.DataFrame
    store: ParamStore
    model: GFRRN = None


def _append_csv(path, rows, columns):
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, mode="a", header=not Path(path).exists(), index=False)


def fit(manifest, run_config=None, out_dir="runs", extractor=None, resume=None, show_progress=True):
    """
    Train a GFRRN on ``manifest``. Writes ``metrics.csv`` (one row per epoch),
    ``trajectory.csv`` (one row per step), ``checkpoint_epoch{N:03d}.npz`` and
    ``checkpoint_last.npz`` under ``out_dir``.
    """
    run = run_config or RunConfig()
    cfg = run.train
    if run.model.tuning_mode != cfg.tuning_mode:
        run = run.with_mode(cfg.tuning_mode)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    device = get_device()
    model = GFRRN(run.model).to(device)
    store = model.configure_tuning()
    logger.info(
        "Trainable parameters ({} mode): {} (backbone {}, mona {}, task {})",
        cfg.tuning_mode, store.count(trainable=True),
        store.count(ParamGroup.BACKBONE, True), store.count(ParamGroup.MONA, True), store.count(ParamGroup.TASK, True),
    )
    optimizer = build_optimizer(store, cfg.learning_rate)
    extractor = (extractor or VGGExtractor(weights=cfg.vgg_weights)).to(device)

    start_epoch, step = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume, model, optimizer, expected_hash=run.model.hash())
        start_epoch, step = ckpt.epoch, ckpt.step
        logger.info("Resumed from {} at epoch {}, step {}", resume, start_epoch, step)

    pairs = load_training_pairs(manifest, cfg.image_size)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    checkpoints = []
    metrics_rows, trajectory_rows = [], []
    stopped = False
    for epoch in range(start_epoch, cfg.epochs):
        skip = step - epoch * steps_per_epoch
        batches = batched(epoch_samples(pairs, epoch, cfg, run.synthesis), cfg.batch_size)
        epoch_rows = []
        with PrefetchQueue(batches, maxsize=cfg.prefetch) as prefetch:
            progress = tqdm(prefetch, total=steps_per_epoch, desc=f"epoch {epoch + 1}/{cfg.epochs}",
                            disable=not show_progress)
            for index, samples in enumerate(progress):
                if index < skip:
                    continue
                batch = collate(samples, device=device)
                report = train_step(model, optimizer, batch, extractor, run.loss, step)
                step += 1
                row = {"epoch": epoch + 1, "step": step, **report.as_dict()}
                epoch_rows.append(row)
                progress.set_postfix(loss=f"{row['total']:.4f}")
                logger.debug("step {} {}", step, report.as_dict())
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stopped = True
                    break
        trajectory_rows.extend(epoch_rows)
        _append_csv(out_dir / "trajectory.csv", epoch_rows, METRIC_COLUMNS)
        if stopped and index + 1 < steps_per_epoch:
            save_checkpoint(out_dir / "checkpoint_last.npz", model, optimizer, store, epoch, step, run)
            break
        if epoch_rows:
            means = pd.DataFrame(epoch_rows)[METRIC_COLUMNS[2:]].mean().to_dict()
            metrics_row = {"epoch": epoch + 1, "step": step, **means}
            metrics_rows.append(metrics_row)
            _append_csv(out_dir / "metrics.csv", [metrics_row], METRIC_COLUMNS)
            logger.info("Epoch {} done at step {}: total {:.5f}", epoch + 1, step, means["total"])
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs or stopped:
            path = save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:03d}.npz", model, optimizer, store,
                                   epoch + 1, step, run)
            checkpoints.append(path)
        save_checkpoint(out_dir / "checkpoint_last.npz", model, optimizer, store, epoch + 1, step, run)
        if stopped:
            break

    return FitResult(
        checkpoints=checkpoints,
        metrics=pd.DataFrame(metrics_rows, columns=METRIC_COLUMNS),
        trajectory=pd.DataFrame(trajectory_rows, columns=METRIC_COLUMNS),
        store=store,
        model=model,
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries_checked: int
    worst: tuple = None  # (tensor index, flat index, analytic, numeric)

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def projection_loss(output, seed=0):
    """Scalar sum(output * fixed random weights) for checking gradients of any tensor-valued op."""
    generator = torch.Generator().manual_seed(seed)
    weights = torch.randn(output.shape, generator=generator, dtype=torch.float64).to(output)
    return (output * weights).sum()


def gradient_check(fn, tensors, h=1e-5, max_entries=20, seed=0):
    """
    Central finite differences of the scalar ``fn()`` against autograd, over
    up to ``max_entries`` sampled entries per tensor. Relative error is
    |a - n| / max(|a|, |n|, 1e-6). Use double precision.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != torch.float64:
            gfrrn_warning("checking gradients", f"tensor of dtype {t.dtype} is not double precision")
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst, max_err, checked = None, 0.0, 0
    with torch.no_grad():
        for ti, (t, grad) in enumerate(zip(tensors, analytic)):
            flat = t.view(-1)
            grad = torch.zeros_like(t).view(-1) if grad is None else grad.reshape(-1)
            count = flat.numel()
            indices = rng.choice(count, size=min(max_entries, count), replace=False) if count > max_entries \
                else np.arange(count)
            for i in indices:
                original = flat[i].item()
                flat[i] = original + h
                plus = float(fn())
                flat[i] = original - h
                minus = float(fn())
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                a = float(grad[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                checked += 1
                if err >= max_err:
                    max_err, worst = err, (ti, int(i), a, numeric)
    if not checked:
        raise GFRRNError("Please provide at least one tensor entry to check.")
    return GradCheckReport(max_err, checked, worst)
