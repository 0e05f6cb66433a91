from pathlib import Path

import numpy as np
from behave import *
from common import captured_log, smooth_image, write_pairs, WARNING_STR

from gfrrn.labels import (LabelMode, SynthesisParams, encode_signed, gaussian_kernel_1d,
                          generate_unified_labels, load_dataset, lowpass_2d, make_labels,
                          read_label_cache, sample_synthesis_params, synthesize_mixture,
                          write_label_cache)
from gfrrn.labels.labels import SIGNED_PNG_SCALE
from gfrrn.utils import InvalidArgumentError


@given('{count:d} random image pairs of size {size:d}')
def step_impl(context, count, size):
    rng = np.random.default_rng(0)
    context.pairs = [(rng.random((size, size, 3)), rng.random((size, size, 3))) for _ in range(count)]


@given('a random image of size {size:d} used as both input and transmission')
def step_impl(context, size):
    img = np.random.default_rng(1).random((size, size, 3))
    context.pairs = [(img, img.copy())]


@given('a transmission offset from the input by the constant {offset:g}')
def step_impl(context, offset):
    T = np.random.default_rng(2).random((40, 40, 3)) * 0.5
    context.pairs = [(T + offset, T)]


@when('unified labels are generated with sigma {sigma:g}')
def step_impl(context, sigma):
    context.triplets = [(I, generate_unified_labels(I, T, sigma)) for I, T in context.pairs]
    context.labels = context.triplets[-1][1]


@then('every triplet reconstructs its input within {tol:g}')
def step_impl(context, tol):
    for I, labels in context.triplets:
        assert np.max(np.abs(labels.reconstruct() - I)) < tol


@then('the reflection and residual labels are exactly zero')
def step_impl(context):
    _, labels = context.triplets[0]
    assert not labels.reflection_label.any()
    assert not labels.residual_label.any()


@then('the reflection label equals {value:g} everywhere within {tol:g}')
def step_impl(context, value, tol):
    _, labels = context.triplets[0]
    np.testing.assert_allclose(labels.reflection_label, value, atol=tol)


@then('the residual label is zero within {tol:g}')
def step_impl(context, tol):
    labels = context.labels
    assert np.max(np.abs(labels.residual_label)) <= tol


@when('labels are generated for a 32x32 input and a 32x30 transmission')
def step_impl(context):
    try:
        generate_unified_labels(np.zeros((32, 32, 3)), np.zeros((32, 30, 3)), 2.0)
        context.error = None
    except Exception as e:
        context.error = e


@when('the low-pass is applied with sigma {sigma}')
def step_impl(context, sigma):
    try:
        lowpass_2d(np.zeros((16, 16, 3)), float(sigma))
        context.error = None
    except Exception as e:
        context.error = e


@then('an invalid argument error is raised')
def step_impl(context):
    assert isinstance(context.error, InvalidArgumentError), repr(context.error)


@given('a synthetic mixture built with seed {seed:d} at size {size:d}')
def step_impl(context, seed, size):
    rng = np.random.default_rng(seed)
    context.T = smooth_image(rng, size, size)
    context.R = smooth_image(rng, size, size, sigma=4.0)
    context.params = sample_synthesis_params(seed)
    context.I, context.labels = synthesize_mixture(context.T, context.R, context.params, label_sigma=2.0)


@when('labels are made in {mode} mode')
def step_impl(context, mode):
    reflection = context.params.reflection_weight * lowpass_2d(context.R, context.params.reflection_blur_sigma)
    context.labels = make_labels(context.I, context.T, LabelMode(mode), sigma=2.0, R=reflection)


@then('the labels reconstruct the mixture within {tol:g}')
def step_impl(context, tol):
    assert np.max(np.abs(context.labels.reconstruct() - context.I)) < tol


@when('synthesis parameters are drawn 100 times from seeds 0 to 99')
def step_impl(context):
    context.drawn = [sample_synthesis_params(seed) for seed in range(100)]


@then('every blur sigma lies in [0.2, 4.0] and every weight in [0.4, 1.0]')
def step_impl(context):
    for params in context.drawn:
        assert 0.2 <= params.reflection_blur_sigma <= 4.0
        assert 0.4 <= params.reflection_weight <= 1.0


@then('drawing again with the same seeds gives the same parameters')
def step_impl(context):
    assert [sample_synthesis_params(seed) for seed in range(100)] == context.drawn


@then('the mixture lies in [0, 1]')
def step_impl(context):
    assert context.I.min() >= 0.0 and context.I.max() <= 1.0


@when('the unified labels are cached to disk')
def step_impl(context):
    context.cache_paths = write_label_cache(Path(context.tmp) / "labels", context.labels)


@then('the files T.png, R_low.png and N.png exist')
def step_impl(context):
    assert [p.name for p in context.cache_paths] == ["T.png", "R_low.png", "N.png"]
    assert all(p.exists() for p in context.cache_paths)


@then('the cached signed labels match within one 16-bit step')
def step_impl(context):
    cached = read_label_cache(Path(context.tmp) / "labels")
    step = 1.0 / SIGNED_PNG_SCALE
    np.testing.assert_allclose(cached.reflection_label, context.labels.reflection_label, atol=step)
    np.testing.assert_allclose(cached.residual_label, context.labels.residual_label, atol=step)


@when('the signed codec encodes values from -1.5 to 1.5')
def step_impl(context):
    with captured_log() as log:
        context.encoded = encode_signed(np.linspace(-1.5, 1.5, 31))
    context.log = log.getvalue()


@then('a GFRRN warning is logged')
def step_impl(context):
    assert WARNING_STR in context.log, context.log


@then('the encoded extremes are 0 and 65535')
def step_impl(context):
    assert context.encoded.min() == 0 and context.encoded.max() == 65535


@given('a dataset of {count:d} pairs at size {size:d}')
def step_impl(context, count, size):
    context.data_root = Path(context.tmp) / "data"
    context.manifest_path = write_pairs(context.data_root, count, size)


@when('the dataset is loaded from its directory')
def step_impl(context):
    context.manifest = load_dataset(context.data_root)


@then('the manifest lists {count:d} pairs with existing files')
def step_impl(context, count):
    assert len(context.manifest) == count
    for record in context.manifest:
        assert Path(record.input_path).exists() and Path(record.transmission_path).exists()


@given('an impulse difference at the centre of a {size:d}x{size2:d} grid')
def step_impl(context, size, size2):
    T = np.zeros((size, size2))
    I = T.copy()
    I[size // 2, size2 // 2] = 1.0
    context.pairs = [(I, T)]


@then('the reflection label is the normalised Gaussian kernel of sigma {sigma:g} around the centre')
def step_impl(context, sigma):
    kernel = gaussian_kernel_1d(sigma)
    radius = len(kernel) // 2
    h, w = context.labels.reflection_label.shape
    expected = np.zeros((h, w))
    expected[h // 2 - radius:h // 2 + radius + 1, w // 2 - radius:w // 2 + radius + 1] = np.outer(kernel, kernel)
    assert np.max(np.abs(context.labels.reflection_label - expected)) < 1e-15
    assert abs(context.labels.reflection_label.sum() - 1.0) < 1e-12
    assert np.unravel_index(np.argmax(context.labels.reflection_label), (h, w)) == (h // 2, w // 2)


@given('a vertical step edge between input and transmission on a {size:d}x{size2:d} grid')
def step_impl(context, size, size2):
    T = np.zeros((size, size2))
    I = T.copy()
    I[:, size2 // 2:] = 1.0
    context.pairs = [(I, T)]


@then('the reflection label rises monotonically across the edge without overshoot')
def step_impl(context):
    reflection = context.labels.reflection_label
    assert (np.diff(reflection, axis=1) >= -1e-15).all()
    assert reflection.min() >= -1e-15 and reflection.max() <= 1.0 + 1e-15
    assert np.allclose(reflection, reflection[:1])


@then('the residual label sums to zero within {tol:g}')
def step_impl(context, tol):
    assert abs(context.labels.residual_label.sum()) < tol, context.labels.residual_label.sum()


@given('a dim transmission mixed with a reflection of weight {weight:g}')
def step_impl(context, weight):
    rng = np.random.default_rng(21)
    context.T = 0.3 * smooth_image(rng, 32, 32)
    context.R = smooth_image(rng, 32, 32, sigma=4.0)
    context.params = SynthesisParams(reflection_blur_sigma=1.5, reflection_weight=weight)
    context.I, context.labels = synthesize_mixture(context.T, context.R, context.params, label_sigma=2.0)


@then('the mixture equals its transmission and both signed labels are zero')
def step_impl(context):
    assert np.array_equal(context.I, context.T)
    assert not context.labels.reflection_label.any()
    assert not context.labels.residual_label.any()


@then('the mixture minus its transmission is the weighted blurred reflection within {tol:g}')
def step_impl(context, tol):
    expected = context.params.reflection_weight * lowpass_2d(context.R, context.params.reflection_blur_sigma)
    assert context.I.max() < 1.0
    assert np.max(np.abs((context.I - context.T) - expected)) < tol


@then('building the mixture again from seed {seed:d} gives bitwise identical arrays')
def step_impl(context, seed):
    rng = np.random.default_rng(seed)
    T = smooth_image(rng, *context.T.shape[:2])
    R = smooth_image(rng, *context.T.shape[:2], sigma=4.0)
    I, labels = synthesize_mixture(T, R, sample_synthesis_params(seed), label_sigma=2.0)
    assert np.array_equal(I, context.I)
    for again, first in zip(
        (labels.transmission, labels.reflection_label, labels.residual_label),
        (context.labels.transmission, context.labels.reflection_label, context.labels.residual_label),
    ):
        assert np.array_equal(again, first)
