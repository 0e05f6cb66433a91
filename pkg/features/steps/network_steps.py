import json

import numpy as np
import torch
from behave import *
from common import double_tensor, randomize_, smooth_image

from gfrrn.adapters import MonaSwinEncoder, ParamGroup
from gfrrn.attention import AttentionConfig
from gfrrn.labels import generate_unified_labels
from gfrrn.losses import RandomConvExtractor, compute_losses
from gfrrn.network import GFRRN, DecoderLevel, ModelConfig, ResidualEstimator, StreamPair, zero_init_residual_branches
from gfrrn.training import gradient_check, projection_loss
from gfrrn.utils import to_tensor


def _shape(text):
    return tuple(int(v) for v in text.split("x"))


@given('a default GFRRN model')
def step_impl(context):
    context.model = GFRRN(ModelConfig()).eval()


@when('it restores a {shape} image')
def step_impl(context, shape):
    try:
        with torch.no_grad():
            context.output = context.model(torch.rand(*_shape(shape)))
        context.error = None
    except Exception as e:
        context.error = e


@then('the transmission, reflection and residual estimates are {shape}')
def step_impl(context, shape):
    out = context.output
    assert [tuple(t.shape) for t in (out.t_hat, out.r_hat, out.n_hat)] == [_shape(shape)] * 3


@then('the transmission and reflection estimates lie in [0, 1]')
def step_impl(context):
    for t in (context.output.t_hat, context.output.r_hat):
        assert float(t.min()) >= 0.0 and float(t.max()) <= 1.0


@when('it restores the same {shape} image twice')
def step_impl(context, shape):
    image = torch.rand(*_shape(shape))
    with torch.no_grad():
        context.outputs = [context.model(image), context.model(image)]


@then('both restorations are identical')
def step_impl(context):
    first, second = context.outputs
    for a, b in zip((first.t_hat, first.r_hat, first.n_hat), (second.t_hat, second.r_hat, second.n_hat)):
        assert torch.equal(a, b)


@when('a {h:d}x{w:d} numpy image is restored')
def step_impl(context, h, w):
    context.restored = context.model.restore(np.random.default_rng(0).random((h, w, 3)))


@then('three {shape} numpy images come back')
def step_impl(context, shape):
    assert len(context.restored) == 3
    for img in context.restored:
        assert isinstance(img, np.ndarray) and img.shape == _shape(shape)


@when('its tuning is configured')
def step_impl(context):
    context.store = context.model.configure_tuning()


@then('no backbone parameter is trainable')
def step_impl(context):
    assert context.store.count(group=ParamGroup.BACKBONE, trainable=True) == 0
    assert not any(p.requires_grad for n, p in context.model.named_parameters()
                   if context.store[n].group is ParamGroup.BACKBONE)


@then('every mona and task parameter is trainable')
def step_impl(context):
    for group in (ParamGroup.MONA, ParamGroup.TASK):
        assert context.store.count(group=group) > 0
        assert context.store.count(group=group, trainable=False) == 0


@then('mona parameters are under {percent:d} percent of the pre-trained encoder')
def step_impl(context, percent):
    mona = context.store.count(group=ParamGroup.MONA)
    encoder = mona + context.store.count(group=ParamGroup.BACKBONE)
    assert mona / encoder < percent / 100.0, mona / encoder


@given('a frozen GFRRN model and a Mona GFRRN model sharing weights')
def step_impl(context):
    mona = GFRRN(ModelConfig(tuning_mode="mona")).eval()
    frozen = GFRRN(ModelConfig(tuning_mode="frozen")).eval()
    missing = frozen.load_state_dict(mona.state_dict(), strict=False).missing_keys
    assert not missing, missing
    context.models = [frozen, mona]


@when('both restore the same {shape} image')
def step_impl(context, shape):
    image = torch.rand(*_shape(shape))
    with torch.no_grad():
        context.outputs = [model(image) for model in context.models]


@given('a Mona-Swin encoder and a plain encoder sharing weights')
def step_impl(context):
    mona = MonaSwinEncoder(16, (2, 2), (2, 4)).double().eval()
    plain = MonaSwinEncoder(16, (2, 2), (2, 4), mona=False).double().eval()
    plain.load_state_dict(mona.state_dict(), strict=False)
    context.encoders = [plain, mona]


@when('both encoders see the same {shape} image')
def step_impl(context, shape):
    image = torch.rand(*_shape(shape), dtype=torch.float64)
    with torch.no_grad():
        context.stage_maps = [encoder(image) for encoder in context.encoders]


@then('every stage map matches within {tol:g}')
def step_impl(context, tol):
    plain, mona = context.stage_maps
    assert len(plain) == len(mona)
    for a, b in zip(plain, mona):
        assert float((a - b).abs().max()) <= tol


@when('the dual-stream encoder sees a {shape} image')
def step_impl(context, shape):
    with torch.no_grad():
        _, context.pyramid = context.model.encoder2(torch.rand(*_shape(shape)))
        _, context.zero_pyramid = context.model.encoder2(torch.zeros(*_shape(shape)))


@then('the stream pairs have shapes {first} and {second}')
def step_impl(context, first, second):
    assert [tuple(pair.shape) for pair in context.pyramid] == [_shape(first), _shape(second)]
    assert all(pair.f_t.shape == pair.f_r.shape for pair in context.pyramid)


@then('a zero image gives finite stream features')
def step_impl(context):
    for pair in context.zero_pyramid:
        assert bool(torch.isfinite(pair.f_t).all()) and bool(torch.isfinite(pair.f_r).all())


@then('the dual-stream encoder backpropagates finite gradients from a random {shape} image')
def step_impl(context, shape):
    encoder = context.model.encoder2
    encoder.zero_grad(set_to_none=True)
    image = (torch.rand(*_shape(shape)) * 4 - 2).requires_grad_()
    stem, pyramid = encoder(image)
    outputs = [stem.f_t, stem.f_r] + [f for pair in pyramid for f in (pair.f_t, pair.f_r)]
    sum(projection_loss(out, seed=i) for i, out in enumerate(outputs)).backward()
    assert bool(torch.isfinite(image.grad).all())
    for name, param in encoder.named_parameters():
        assert param.grad is not None, name
        assert bool(torch.isfinite(param.grad).all()), name


def _stream_pair(channels, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return StreamPair(double_tensor(rng, 1, channels, size, size), double_tensor(rng, 1, channels, size, size))


@given('a decoder level with {channels:d} channels, {heads:d} heads and {kind} attention')
def step_impl(context, channels, heads, kind):
    cfg = AttentionConfig(channels, heads, window=8, num_agents=4)
    context.level = randomize_(DecoderLevel(cfg, blocks=2, attention_kind=kind).double(), std=0.2, seed=2)
    context.channels = channels


@given('a single-block decoder level with {channels:d} channels and {heads:d} heads')
def step_impl(context, channels, heads):
    cfg = AttentionConfig(channels, heads, window=8, num_agents=4)
    context.level = randomize_(DecoderLevel(cfg, blocks=1).double(), std=0.2, seed=3)
    context.channels = channels


@given('the G-AFLB fusion is randomized')
def step_impl(context):
    randomize_(context.level.gaflb.fuse, std=0.2, seed=5)


@when('every residual branch projection is zeroed')
def step_impl(context):
    context.zeroed = zero_init_residual_branches(context.level)
    pair = _stream_pair(context.channels)
    image = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    resized = torch.nn.functional.interpolate(image, size=(16, 16), mode="bilinear", align_corners=False)
    with torch.no_grad():
        context.level_out = context.level(pair, image)
        context.expected = (context.level.gaflb(pair.f_t, resized), context.level.gaflb(pair.f_r, resized))


@then('the level output equals the G-AFLB output on both streams')
def step_impl(context):
    assert len(context.zeroed) == 3 * len(context.level.blocks)
    assert torch.equal(context.level_out.f_t, context.expected[0])
    assert torch.equal(context.level_out.f_r, context.expected[1])


@when('the level is compared with its manually composed parts')
def step_impl(context):
    level = context.level
    pair = _stream_pair(context.channels, seed=1)
    image = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        context.level_out = level(pair, image)
        gated = StreamPair(level.gaflb(pair.f_t, image), level.gaflb(pair.f_r, image))
        context.composed = level.blocks[0](gated)


@then('the composed and level outputs are identical')
def step_impl(context):
    assert torch.equal(context.level_out.f_t, context.composed.f_t)
    assert torch.equal(context.level_out.f_r, context.composed.f_r)


@when('the level receives {channels:d}-channel streams')
def step_impl(context, channels):
    try:
        context.level(_stream_pair(channels), torch.rand(1, 3, 16, 16, dtype=torch.float64))
        context.error = None
    except Exception as e:
        context.error = e


@given('a residual estimator with {channels:d} channels')
def step_impl(context, channels):
    context.estimator = randomize_(ResidualEstimator(channels).double(), std=0.3, seed=7)


@when('all of its parameters are zeroed')
def step_impl(context):
    with torch.no_grad():
        for p in context.estimator.parameters():
            p.zero_()
        t = torch.rand(2, 3, 12, 20, dtype=torch.float64)
        context.n_hat = context.estimator(t, torch.rand_like(t), torch.rand_like(t))


@then('it estimates a zero residual of the input size')
def step_impl(context):
    assert tuple(context.n_hat.shape) == (2, 3, 12, 20)
    assert not context.n_hat.any()


@when('it receives a {h1:d}x{w1:d} transmission and a {h2:d}x{w2:d} reflection')
def step_impl(context, h1, w1, h2, w2):
    t = torch.rand(1, 3, h1, w1, dtype=torch.float64)
    try:
        context.estimator(t, torch.rand(1, 3, h2, w2, dtype=torch.float64), t)
        context.error = None
    except Exception as e:
        context.error = e


@when('the residual estimator gradients are checked by central differences')
def step_impl(context):
    est = context.estimator
    rng = np.random.default_rng(4)
    t, r, image = (torch.from_numpy(rng.random((1, 3, 8, 8))) for _ in range(3))
    tensors = [est.intro.weight, est.norm.weight, est.expand.weight, est.dwconv.weight, est.project.weight,
               est.ending.weight]
    context.report = gradient_check(lambda: projection_loss(est(t, r, image)), tensors, h=1e-6)


@when('a model config is built from {config}')
def step_impl(context, config):
    try:
        ModelConfig.from_dict(json.loads(config))
        context.error = None
    except Exception as e:
        context.error = e


@given('a small fully fine-tuned GFRRN in double precision')
def step_impl(context):
    model = GFRRN(ModelConfig(channels=8, heads=(2, 2), tuning_mode="fft")).double()
    randomize_(model, std=0.1, seed=11)
    model.configure_tuning()
    context.model = model


@when('the total loss gradients are checked on {entries:d} parameter entries of a {h:d}x{w:d} pair')
def step_impl(context, entries, h, w):
    model = context.model
    rng = np.random.default_rng(12)
    T = smooth_image(rng, h, w)
    I = np.clip(T + 0.3 * smooth_image(rng, h, w, sigma=4.0), 0, 1)
    labels = generate_unified_labels(I, T)
    image = to_tensor(I, dtype=torch.float64)
    extractor = RandomConvExtractor(seed=1)
    names = ["encoder1.patch_embed.proj.weight", "encoder1.stages.0.0.mona1.up.weight",
             "encoder2.stem.0.weight", "levels.0.gaflb.fuse.weight",
             "levels.1.blocks.0.self_attn.qkv.weight", "residual.ending.weight"]
    params = dict(model.named_parameters())
    tensors = [params[name] for name in names]

    def loss():
        return compute_losses(model(image), labels, image, extractor).total

    context.report = gradient_check(loss, tensors, h=1e-6, max_entries=entries // len(tensors))
    model.zero_grad()
    loss().backward()


@then('every trainable parameter has a finite gradient')
def step_impl(context):
    for name, p in context.model.named_parameters():
        if p.requires_grad:
            assert p.grad is not None, name
            assert bool(torch.isfinite(p.grad).all()), name
