from pathlib import Path

import numpy as np
import torch
from behave import *
from common import captured_log, double_tensor, randomize_, WARNING_STR

from gfrrn.adapters import (MonaLayer, MonaSwinEncoder, ParamGroup, ParamStore, TuningMode, backbone_hash,
                            load_backbone_weights, trainable_parameter_filter)
from gfrrn.training import gradient_check, projection_loss
from gfrrn.utils import ConfigurationError

YES_NO = {"yes": True, "no": False}


def encoder_store(encoder):
    return ParamStore.from_module(encoder, backbone_prefix="")


@given('a Mona layer for {channels:d} channels')
def step_impl(context, channels):
    context.mona = MonaLayer(channels)
    context.channels = channels


@given('a Mona layer for {channels:d} channels in double precision with randomized weights')
def step_impl(context, channels):
    context.mona = randomize_(MonaLayer(channels, reduction=2).double(), std=0.3, seed=4)
    context.channels = channels


@when('it is applied to a {h:d}x{w:d} token grid')
def step_impl(context, h, w):
    context.tokens = torch.randn(2, h * w, context.channels)
    with torch.no_grad():
        context.out = context.mona(context.tokens, (h, w))


@then('the Mona output equals its input')
def step_impl(context):
    assert torch.equal(context.out, context.tokens)


@when('it is applied to {count:d} tokens without a grid shape')
def step_impl(context, count):
    try:
        context.mona(torch.randn(1, count, context.channels))
        context.error = None
    except Exception as e:
        context.error = e


@when('the Mona gradients are checked by central differences on a {h:d}x{w:d} grid')
def step_impl(context, h, w):
    mona = context.mona
    x = double_tensor(np.random.default_rng(1), 1, h * w, context.channels).requires_grad_()
    tensors = [x, mona.gamma, mona.down.weight, mona.conv5.weight, mona.pointwise.weight, mona.up.weight]
    context.report = gradient_check(lambda: projection_loss(mona(x, (h, w))), tensors, h=1e-6)


def _ints(text):
    return tuple(int(v) for v in text.split(","))


@given('a Mona-Swin encoder with {channels:d} channels, depths {depths} and heads {heads}')
def step_impl(context, channels, depths, heads):
    context.encoder = MonaSwinEncoder(channels, _ints(depths), _ints(heads), window=8, patch_size=2)


@given('a plain Swin encoder with {channels:d} channels, depths {depths} and heads {heads}')
def step_impl(context, channels, depths, heads):
    context.encoder = MonaSwinEncoder(channels, _ints(depths), _ints(heads), window=8, patch_size=2, mona=False)


@when('it encodes a {shape} image')
def step_impl(context, shape):
    with torch.no_grad():
        context.features = context.encoder(torch.rand(*_shape(shape)))


def _shape(text):
    return tuple(int(v) for v in text.split("x"))


@then('the stage maps have shapes {first} and {second}')
def step_impl(context, first, second):
    assert [tuple(f.shape) for f in context.features] == [_shape(first), _shape(second)]


@then('the encoder store has no mona parameters')
def step_impl(context):
    store = encoder_store(context.encoder)
    assert not store.names(group=ParamGroup.MONA)
    assert store.names(group=ParamGroup.BACKBONE)


@when('the encoder parameters are filtered for {mode} tuning')
def step_impl(context, mode):
    try:
        context.store = trainable_parameter_filter(encoder_store(context.encoder), TuningMode(mode))
        context.error = None
    except Exception as e:
        context.error = e


@then('{group} parameters are trainable: {answer}')
def step_impl(context, group, answer):
    assert context.error is None, context.error
    names = context.store.names(group=ParamGroup(group))
    assert names
    assert all(context.store[name].trainable == YES_NO[answer] for name in names)


@then('applying the flags leaves no encoder parameter requiring gradients')
def step_impl(context):
    context.store.apply()
    assert not any(p.requires_grad for p in context.encoder.parameters())


@then('a configuration error is raised')
def step_impl(context):
    assert isinstance(context.error, ConfigurationError), repr(context.error)


@when('the encoder store is built with a tagger returning {tag}')
def step_impl(context, tag):
    value = None if tag == "none" else tag
    try:
        ParamStore.from_module(context.encoder, tagger=lambda name: value)
        context.error = None
    except Exception as e:
        context.error = e


@when('a {group} tensor is updated through the store')
def step_impl(context, group):
    store = encoder_store(context.encoder)
    context.hash_before = backbone_hash(store)
    name = store.names(group=ParamGroup(group))[0]
    store.update(name, store[name].tensor.detach() + 0.5)
    context.hash_after = backbone_hash(store)


@then('the backbone hash is unchanged')
def step_impl(context):
    assert context.hash_after == context.hash_before


@then('the backbone hash changes')
def step_impl(context):
    assert context.hash_after != context.hash_before


@given('a weight archive with one matching, one unknown, one misshapen and one mona entry')
def step_impl(context):
    params = dict(context.encoder.named_parameters())
    context.target = "patch_embed.proj.weight"
    context.mona_name = next(name for name in params if ".mona" in name)
    context.mona_before = params[context.mona_name].detach().clone()
    context.loaded_value = np.full(tuple(params[context.target].shape), 0.25, dtype=np.float32)
    context.archive = Path(context.tmp) / "backbone.npz"
    np.savez(
        context.archive,
        **{
            context.target: context.loaded_value,
            "head.weight": np.zeros((3, 3), dtype=np.float32),
            "patch_embed.norm.weight": np.zeros(5, dtype=np.float32),
            context.mona_name: np.full(tuple(params[context.mona_name].shape), 7.0, dtype=np.float32),
        },
    )


@when('the archive is loaded into the encoder')
def step_impl(context):
    with captured_log() as log:
        context.loaded = load_backbone_weights(context.encoder, context.archive)
    context.log = log.getvalue()


@then('{count:d} tensor is loaded and {warnings:d} GFRRN warnings are logged')
def step_impl(context, count, warnings):
    assert context.loaded == count
    assert context.log.count(WARNING_STR) == warnings, context.log
    loaded = dict(context.encoder.named_parameters())[context.target]
    np.testing.assert_array_equal(loaded.detach().numpy(), context.loaded_value)


@then('the mona entry is ignored')
def step_impl(context):
    assert torch.equal(dict(context.encoder.named_parameters())[context.mona_name], context.mona_before)


@when('a missing archive is loaded into the encoder')
def step_impl(context):
    try:
        load_backbone_weights(context.encoder, Path(context.tmp) / "missing.npz")
        context.error = None
    except Exception as e:
        context.error = e
