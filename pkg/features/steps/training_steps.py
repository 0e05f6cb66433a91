import json
import re
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import torch
from behave import *
from common import captured_log, double_tensor, smooth_image

from gfrrn.adapters import ParamGroup, backbone_hash
from gfrrn.evaluation import psnr
from gfrrn.labels import SynthesisConfig, load_dataset, sample_synthesis_params, synthesize_mixture
from gfrrn.losses import LossWeights, RandomConvExtractor
from gfrrn.network import GFRRN, ModelConfig
from gfrrn.training import (PrefetchQueue, RunConfig, Sample, TrainConfig, build_optimizer, collate, epoch_samples,
                            fit, gradient_check, load_checkpoint, load_training_pairs,
                            model_from_checkpoint, projection_loss, read_checkpoint, train_step)
from gfrrn.utils import ConfigurationError, TrainingError, seed_everything, to_image

TINY_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "tiny.yaml"


def desk_run(**train):
    """Default model, 32 px crops, one epoch, no progress bars."""
    settings = {"image_size": 32, "epochs": 1, "seed": 0}
    settings.update(train)
    return RunConfig(train=TrainConfig(**settings))


def fit_quietly(context, run, name, resume=None):
    return fit(load_dataset(context.data_root), run, out_dir=Path(context.tmp) / name,
               extractor=RandomConvExtractor(seed=0), resume=resume, show_progress=False)


def synthetic_batch(size, seed=0):
    rng = np.random.default_rng(seed)
    T = smooth_image(rng, size, size)
    R = smooth_image(rng, size, size, sigma=4.0)
    I, labels = synthesize_mixture(T, R, sample_synthesis_params(seed), label_sigma=1.0)
    return I, labels


@when('the tiny run config is loaded')
def step_impl(context):
    context.run = RunConfig.from_yaml(TINY_CONFIG)


@when('the tiny run config is loaded with {mode} tuning')
def step_impl(context, mode):
    context.run = RunConfig.from_yaml(TINY_CONFIG).with_mode(mode)


@then('the train section uses {size:d} pixel crops and a learning rate of {lr:g}')
def step_impl(context, size, lr):
    assert context.run.train.image_size == size
    assert context.run.train.learning_rate == lr


@then('both the model and the train section use {mode} tuning')
def step_impl(context, mode):
    assert context.run.model.tuning_mode == mode
    assert context.run.train.tuning_mode == mode


@when('a run config is read from {text}')
def step_impl(context, text):
    try:
        RunConfig.from_dict(json.loads(text))
        context.error = None
    except Exception as e:
        context.error = e


@when('a run config file holds unparseable YAML')
def step_impl(context):
    path = Path(context.tmp) / "broken.yaml"
    path.write_text("model: [channels: 32\n  train: {")
    try:
        RunConfig.from_yaml(path)
        context.error = None
    except Exception as e:
        context.error = e


def _draw(context, epoch, fraction):
    cfg = TrainConfig(image_size=32, synthetic_fraction=fraction, seed=3)
    pairs = load_training_pairs(load_dataset(context.data_root), 32)
    return list(epoch_samples(pairs, epoch, cfg, SynthesisConfig()))


@when('the epoch {epoch:d} samples are drawn twice with half of them synthetic')
def step_impl(context, epoch):
    context.draws = [_draw(context, epoch, 0.5), _draw(context, epoch, 0.5)]
    context.epoch_pair = (_draw(context, epoch, 1.0), _draw(context, epoch + 1, 1.0))


def _same_samples(a, b):
    return all(
        x.pair_id == y.pair_id and x.synthetic == y.synthetic and np.array_equal(x.image, y.image)
        for x, y in zip(a, b)
    )


@then('both draws are identical')
def step_impl(context):
    first, second = context.draws
    assert len(first) == len(second) == 4
    assert _same_samples(first, second)


@then('with every sample synthetic the epoch 1 draw differs from the epoch 0 draw')
def step_impl(context):
    assert not _same_samples(*context.epoch_pair)


@when('the epoch {epoch:d} samples are drawn with synthetic fraction {fraction:g}')
def step_impl(context, epoch, fraction):
    context.samples = _draw(context, epoch, fraction)


@then('{count:d} of the {total:d} samples are synthetic')
def step_impl(context, count, total):
    assert len(context.samples) == total
    assert sum(s.synthetic for s in context.samples) == count


@then('every sample reconstructs its image from its labels')
def step_impl(context):
    for sample in context.samples:
        assert np.max(np.abs(sample.labels.reconstruct() - sample.image)) < 1e-10


@when('{count:d} items pass through a prefetch queue of size {size:d}')
def step_impl(context, count, size):
    with PrefetchQueue(iter(range(count)), maxsize=size) as prefetch:
        context.received = list(prefetch)
    context.count = count


@then('they arrive in production order')
def step_impl(context):
    assert context.received == list(range(context.count))


@when('a producer fails after {count:d} items in a prefetch queue')
def step_impl(context, count):
    def producer():
        yield from range(count)
        raise RuntimeError("synthesis failed")

    context.received = []
    context.error = None
    with PrefetchQueue(producer(), maxsize=2) as prefetch:
        try:
            for item in prefetch:
                context.received.append(item)
        except RuntimeError as e:
            context.error = e


@then('the consumer sees {count:d} items and then the failure')
def step_impl(context, count):
    assert context.received == list(range(count))
    assert str(context.error) == "synthesis failed"


@given('a random linear layer in double precision')
def step_impl(context):
    context.linear = torch.nn.Linear(6, 4).double()


@when('the linear layer gradients are checked by central differences')
def step_impl(context):
    linear = context.linear
    x = double_tensor(np.random.default_rng(0), 3, 6).requires_grad_()
    context.report = gradient_check(lambda: projection_loss(linear(x)), [x, linear.weight, linear.bias])


def _tiny_model():
    model = GFRRN(ModelConfig())
    store = model.configure_tuning()
    return model, store, build_optimizer(store, 1e-4)


@given('a tiny mona model and one training batch')
def step_impl(context):
    I, labels = synthetic_batch(32, seed=1)
    context.sample = (I, labels)
    context.extractor = RandomConvExtractor(seed=0)
    context.model, context.store, context.optimizer = _tiny_model()


def _batch(context):
    I, labels = context.sample
    return collate([Sample("p0", I, labels)])


@when('two fresh models take one step on that batch')
def step_impl(context):
    reports = []
    for _ in range(2):
        seed_everything(0)
        model, _, optimizer = _tiny_model()
        reports.append(train_step(model, optimizer, _batch(context), context.extractor).as_dict())
    context.reports = reports


@then('their loss reports are identical')
def step_impl(context):
    first, second = context.reports
    assert first == second


@when('it trains for {steps:d} steps on that batch')
def step_impl(context, steps):
    context.hash_before = backbone_hash(context.store)
    context.mona_before = context.store.snapshot(ParamGroup.MONA)
    batch = _batch(context)
    for step in range(steps):
        train_step(context.model, context.optimizer, batch, context.extractor, step=step)


@then('the backbone hash is unchanged by training')
def step_impl(context):
    assert backbone_hash(context.store) == context.hash_before


@then('the mona parameters have moved')
def step_impl(context):
    after = context.store.snapshot(ParamGroup.MONA)
    assert any(not np.array_equal(after[name], before) for name, before in context.mona_before.items())


@then('no optimizer state exists for backbone parameters')
def step_impl(context):
    backbone = {id(context.store[name].tensor) for name in context.store.names(ParamGroup.BACKBONE)}
    assert backbone
    assert not any(id(p) in backbone for p in context.optimizer.state)
    assert not any(id(p) in backbone for group in context.optimizer.param_groups for p in group["params"])


@when('the batch image is poisoned with NaN at step {step:d}')
def step_impl(context, step):
    image, labels = _batch(context)
    image[..., 3, 5] = float("nan")
    try:
        train_step(context.model, context.optimizer, (image, labels), context.extractor, step=step)
        context.error = None
    except Exception as e:
        context.error = e


@then('a training error names step {step:d} and every loss term')
def step_impl(context, step):
    assert isinstance(context.error, TrainingError), repr(context.error)
    assert context.error.step == step
    assert set(context.error.terms) == {"content", "exclusion", "perceptual", "reconstruction", "total"}
    assert f"step {step}" in str(context.error)


@when('the model is fitted for {epochs:d} epoch')
def step_impl(context, epochs):
    with captured_log(level="INFO") as log:
        context.result = fit_quietly(context, desk_run(epochs=epochs), "run")
    context.log = log.getvalue()
    context.out_dir = Path(context.tmp) / "run"


@then('{checkpoints:d} checkpoint and {rows:d} metrics row are produced')
def step_impl(context, checkpoints, rows):
    assert len(context.result.checkpoints) == checkpoints
    assert len(context.result.metrics) == rows


@then('metrics.csv, trajectory.csv and checkpoint_last.npz are written')
def step_impl(context):
    for name in ("metrics.csv", "trajectory.csv", "checkpoint_last.npz"):
        assert (context.out_dir / name).exists(), name
    assert not list(context.out_dir.glob(".*"))


@then('the trajectory has {steps:d} steps')
def step_impl(context, steps):
    assert context.result.trajectory["step"].tolist() == list(range(1, steps + 1))


@then('the logged trainable count matches the tuning filter')
def step_impl(context):
    match = re.search(r"Trainable parameters \(mona mode\): (\d+)", context.log)
    assert match, context.log
    assert int(match.group(1)) == context.result.store.count(trainable=True)


@then('the last checkpoint rebuilds a model with identical outputs')
def step_impl(context):
    model, _ = model_from_checkpoint(context.out_dir / "checkpoint_last.npz")
    trained = context.result.model.eval()
    image = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a, b = trained(image), model(image)
    assert torch.equal(a.t_hat, b.t_hat) and torch.equal(a.r_hat, b.r_hat) and torch.equal(a.n_hat, b.n_hat)


@then('the checkpoint header records groups, trainable flags and the config hash')
def step_impl(context):
    ckpt = read_checkpoint(context.out_dir / "checkpoint_last.npz")
    store = context.result.store
    assert ckpt.config_hash == ModelConfig().hash()
    assert ckpt.header["groups"] == {name: entry.group.value for name, entry in store.items()}
    assert ckpt.header["trainable"] == {name: entry.trainable for name, entry in store.items()}
    assert ckpt.epoch == 1 and ckpt.step == 4
    for name, value in ckpt.params.items():
        assert value.dtype == np.dtype("<f4"), name


@then('loading the last checkpoint against another config is a configuration error')
def step_impl(context):
    try:
        load_checkpoint(context.out_dir / "checkpoint_last.npz", expected_hash=ModelConfig(channels=16).hash())
        raise AssertionError("checkpoint loaded against a different config")
    except ConfigurationError:
        pass


@when('two identical runs of {epochs:d} epoch are fitted')
def step_impl(context, epochs):
    context.runs = [fit_quietly(context, desk_run(epochs=epochs), name) for name in ("a", "b")]


@then('their loss trajectories agree within {tol:g}')
def step_impl(context, tol):
    a, b = (r.trajectory["total"].to_numpy() for r in context.runs)
    assert len(a) == len(b) > 0
    np.testing.assert_allclose(a, b, rtol=0, atol=tol)


@when('a {epochs:d} epoch run is fitted without interruption')
def step_impl(context, epochs):
    context.epochs = epochs
    context.full = fit_quietly(context, desk_run(epochs=epochs), "full")


@when('a second run stops after {stop:d} steps and is resumed')
def step_impl(context, stop):
    fit_quietly(context, desk_run(epochs=context.epochs, max_steps=stop), "first")
    checkpoint = Path(context.tmp) / "first" / "checkpoint_last.npz"
    context.stop = stop
    context.resumed = fit_quietly(context, desk_run(epochs=context.epochs), "resumed", resume=checkpoint)


@then('the resumed steps match the uninterrupted run within {tol:g}')
def step_impl(context, tol):
    full = context.full.trajectory.set_index("step")
    resumed = context.resumed.trajectory.set_index("step")
    assert resumed.index.tolist() == list(range(context.stop + 1, len(full) + 1))
    np.testing.assert_allclose(resumed["total"].to_numpy(), full.loc[resumed.index, "total"].to_numpy(),
                               rtol=0, atol=tol)


@given('a tiny fully fine-tuned model and a {size:d}x{size2:d} synthetic batch')
def step_impl(context, size, size2):
    I, labels = synthetic_batch(size, seed=5)
    context.sample = (I, labels)
    context.batch = collate([Sample("p0", I, labels)])
    context.model = GFRRN(ModelConfig(tuning_mode="fft"))
    context.store = context.model.configure_tuning()
    context.extractor = RandomConvExtractor(seed=0)


@when('it trains for {steps:d} steps at learning rate {lr:g}')
def step_impl(context, steps, lr):
    optimizer = build_optimizer(context.store, lr)
    context.totals = [
        float(train_step(context.model, optimizer, context.batch, context.extractor, LossWeights(), step).total)
        for step in range(steps)
    ]
    with torch.no_grad():
        context.output = context.model.eval()(context.batch[0])


@then('the total loss after {steps:d} steps is below half of the first')
def step_impl(context, steps):
    assert context.totals[steps - 1] < 0.5 * context.totals[0], (context.totals[0], context.totals[steps - 1])


@then('the transmission estimate reaches {db:g} dB')
def step_impl(context, db):
    I, labels = context.sample
    value = psnr(np.clip(to_image(context.output.t_hat), 0, 1), labels.transmission)
    assert value >= db, value


@then('the reconstruction residual per pixel is below {limit:g}')
def step_impl(context, limit):
    image = context.batch[0]
    residual = (image - context.output.reconstruction()).abs().mean()
    assert float(residual) < limit, float(residual)


@when('{steps:d} steps are fitted with each label mode on synthetic pairs')
def step_impl(context, steps):
    context.ablation = {
        mode: fit_quietly(context, desk_run(epochs=2, label_mode=mode, synthetic_fraction=1.0, max_steps=steps),
                          f"labels-{mode}")
        for mode in ("unified", "difference", "reflection")
    }
    context.steps = steps


@then('every label mode finishes with finite losses')
def step_impl(context):
    for mode, result in context.ablation.items():
        assert len(result.trajectory) == context.steps, mode
        assert np.isfinite(result.trajectory["total"]).all(), mode


@then('the three loss trajectories are distinguishable')
def step_impl(context):
    totals = {mode: r.trajectory["total"].to_numpy() for mode, r in context.ablation.items()}
    modes = list(totals)
    for i, a in enumerate(modes):
        for b in modes[i + 1:]:
            assert not np.allclose(totals[a], totals[b]), (a, b)


@when('a run config is read with pretrained {weights} perceptual weights')
def step_impl(context, weights):
    context.run = RunConfig.from_dict({"train": {"vgg_weights": weights}})


@then('the train section asks for {weights} perceptual weights')
def step_impl(context, weights):
    assert context.run.train.vgg_weights == weights


@when('{steps:d} step is fitted with {weights} perceptual weights')
def step_impl(context, steps, weights):
    context.vgg = MagicMock(return_value=RandomConvExtractor(seed=0))
    with patch("gfrrn.training.training.VGGExtractor", context.vgg):
        fit(load_dataset(context.data_root), desk_run(max_steps=steps, vgg_weights=weights),
            out_dir=Path(context.tmp) / "pretrained", show_progress=False)


@then('the perceptual extractor was built with {weights} weights')
def step_impl(context, weights):
    context.vgg.assert_called_once_with(weights=weights)
