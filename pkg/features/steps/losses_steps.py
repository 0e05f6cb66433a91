import math

import numpy as np
import torch
import torch.nn.functional as F
from behave import *
from common import smooth_image

from gfrrn.labels import LabelTriplet, generate_unified_labels
from gfrrn.losses import (IdentityExtractor, LossWeights, RandomConvExtractor, VGGExtractor, compute_losses,
                          content_loss, exclusion_loss, grad_op, perceptual_loss, reconstruction_loss, total_loss)
from gfrrn.network import GFRRNOutput
from gfrrn.training import gradient_check
from gfrrn.utils import to_tensor


def _explicit_diffs(x):
    """Forward differences written as loops over a (H, W) array; zero in the last row / column."""
    h, w = x.shape
    dh = np.zeros_like(x)
    dw = np.zeros_like(x)
    for i in range(h - 1):
        for j in range(w):
            dh[i, j] = x[i + 1, j] - x[i, j]
    for i in range(h):
        for j in range(w - 1):
            dw[i, j] = x[i, j + 1] - x[i, j]
    return dh, dw


@when('the gradient operator is applied to a constant {h:d}x{w:d} image')
def step_impl(context, h, w):
    context.grads = grad_op(torch.full((1, 3, h, w), 0.4, dtype=torch.float64))


@then('both gradient maps are zero')
def step_impl(context):
    assert not any(g.any() for g in context.grads)


@when('the gradient operator is applied to the ramp j/{n:d} over an {h:d}x{w:d} image')
def step_impl(context, n, h, w):
    ramp = torch.arange(w, dtype=torch.float64).div(n).expand(1, 1, h, w)
    context.grads = grad_op(ramp)


@then('the width gradient is {value:g} away from the last column')
def step_impl(context, value):
    _, dw = context.grads
    torch.testing.assert_close(dw[..., :-1], torch.full_like(dw[..., :-1], value))
    assert not dw[..., -1].any()


@then('the height gradient is zero')
def step_impl(context):
    assert not context.grads[0].any()


@when('the gradient operator is applied to a random {h:d}x{w:d} image')
def step_impl(context, h, w):
    context.x = np.random.default_rng(0).random((h, w))
    context.grads = grad_op(torch.from_numpy(context.x))


@then('it matches an explicit difference loop exactly')
def step_impl(context):
    dh, dw = _explicit_diffs(context.x)
    np.testing.assert_array_equal(context.grads[0].numpy(), dh)
    np.testing.assert_array_equal(context.grads[1].numpy(), dw)


@when('the gradient operator is applied to a {h:d}x{w:d} image')
def step_impl(context, h, w):
    try:
        grad_op(torch.zeros(1, 3, h, w))
        context.error = None
    except Exception as e:
        context.error = e


@given('exact predictions for a synthetic {h:d}x{w:d} pair')
def step_impl(context, h, w):
    rng = np.random.default_rng(21)
    T = smooth_image(rng, h, w)
    I = np.clip(T + 0.3 * smooth_image(rng, h, w, sigma=4.0), 0, 1)
    context.labels = generate_unified_labels(I, T, sigma=1.0)
    context.image = to_tensor(I, dtype=torch.float64)
    context.output = GFRRNOutput(*(to_tensor(a, dtype=torch.float64) for a in (
        context.labels.transmission, context.labels.reflection_label, context.labels.residual_label)))


@when('every loss term is computed with the identity extractor')
def step_impl(context):
    context.report = compute_losses(context.output, context.labels, context.image, IdentityExtractor())


@then('the content, perceptual and reconstruction terms are zero')
def step_impl(context):
    values = context.report.as_dict()
    for term in ("content", "perceptual", "reconstruction"):
        assert abs(values[term]) < 1e-12, (term, values[term])


@then('the total equals the weighted exclusion term alone')
def step_impl(context):
    values = context.report.as_dict()
    assert math.isclose(values["total"], values["exclusion"], rel_tol=0, abs_tol=1e-12)
    assert values["exclusion"] >= 0


@when('the transmission estimate is offset by {offset:g}')
def step_impl(context, offset):
    out = context.output
    context.content = float(content_loss(out.t_hat + offset, out.r_hat, out.n_hat, context.labels))


@then('the content loss is {value:g} within {tol:g}')
def step_impl(context, value, tol):
    assert abs(context.content - value) < tol, context.content


@given('random {h:d}x{w:d} predictions and labels')
def step_impl(context, h, w):
    rng = np.random.default_rng(3)
    context.arrays = [rng.standard_normal((h, w)) for _ in range(6)]


@when('the content loss is computed')
def step_impl(context):
    t, r, n, T, R, N = (torch.from_numpy(a)[None, None] for a in context.arrays)
    labels = LabelTriplet(T, R, N)
    context.content = float(content_loss(t, r, n, labels))


@then('it matches the term-by-term sum within {tol:g}')
def step_impl(context, tol):
    t, r, n, T, R, N = context.arrays
    alpha, beta = 0.3, 0.6

    def mse(a, b):
        return float(np.mean((a - b) ** 2))

    def grad_l1(a, b):
        ah, aw = _explicit_diffs(a)
        bh, bw = _explicit_diffs(b)
        return float(np.mean(np.abs(ah - bh)) + np.mean(np.abs(aw - bw)))

    expected = mse(t, T) + mse(r, R) + alpha * mse(n, N) \
        + beta * (grad_l1(t, T) + grad_l1(r, R) + alpha * grad_l1(n, N))
    assert abs(context.content - expected) < tol, (context.content, expected)


@when('the exclusion loss compares a random {h:d}x{w:d} transmission with a constant reflection')
def step_impl(context, h, w):
    t = torch.rand(1, 3, h, w, dtype=torch.float64)
    context.exclusion = float(exclusion_loss(t, torch.full_like(t, 0.5)))


@when('the exclusion loss backpropagates from a random {h:d}x{w:d} transmission and a constant reflection')
def step_impl(context, h, w):
    t = torch.rand(1, 3, h, w, dtype=torch.float64, requires_grad=True)
    r = torch.full((1, 3, h, w), 0.5, dtype=torch.float64, requires_grad=True)
    loss = exclusion_loss(t, r)
    loss.backward()
    context.exclusion = float(loss)
    context.grads = (t.grad, r.grad)


@then('both layers receive finite gradients')
def step_impl(context):
    for grad in context.grads:
        assert grad is not None and torch.isfinite(grad).all(), grad


@then('the exclusion loss is 0')
def step_impl(context):
    assert context.exclusion < 1e-20, context.exclusion


@given('two random {h:d}x{w:d} layers')
def step_impl(context, h, w):
    rng = np.random.default_rng(17)
    context.a = torch.from_numpy(rng.random((1, 3, h, w)))
    context.b = torch.from_numpy(rng.random((1, 3, h, w)))


@then('the exclusion loss is the same in both argument orders')
def step_impl(context):
    forward = float(exclusion_loss(context.a, context.b))
    backward = float(exclusion_loss(context.b, context.a))
    assert abs(forward - backward) < 1e-12


@then('the exclusion loss matches an explicit three-level evaluation within {tol:g}')
def step_impl(context, tol):
    eps = 1e-6
    levels = []
    for n in range(3):
        t, r = context.a, context.b
        if n:
            t = F.interpolate(t, scale_factor=0.5 ** n, mode="bilinear", align_corners=False)
            r = F.interpolate(r, scale_factor=0.5 ** n, mode="bilinear", align_corners=False)
        t, r = t[0].numpy(), r[0].numpy()
        level = 0.0
        for axis in (1, 2):
            g_t = np.zeros_like(t)
            g_r = np.zeros_like(r)
            body = [slice(None)] * 3
            body[axis] = slice(0, -1)
            g_t[tuple(body)] = np.diff(t, axis=axis)
            g_r[tuple(body)] = np.diff(r, axis=axis)
            mu_t, mu_r = np.abs(g_t).mean(), np.abs(g_r).mean()
            xi1 = math.sqrt(mu_r / (mu_t + eps))
            xi2 = math.sqrt(mu_t / (mu_r + eps))
            level += np.mean((np.tanh(xi1 * np.abs(g_t)) * np.tanh(xi2 * np.abs(g_r))) ** 2)
        levels.append(level)
    expected = sum(levels) / 3
    assert abs(float(exclusion_loss(context.a, context.b)) - expected) < tol


@when('the exclusion loss compares two {h:d}x{w:d} layers')
def step_impl(context, h, w):
    try:
        exclusion_loss(torch.rand(1, 3, h, w), torch.rand(1, 3, h, w))
        context.error = None
    except Exception as e:
        context.error = e


@when('the exclusion gradients are checked by central differences')
def step_impl(context):
    a = context.a.clone().requires_grad_()
    b = context.b.clone().requires_grad_()
    context.report = gradient_check(lambda: exclusion_loss(a, b), [a, b], h=1e-6)


@then('the perceptual loss with the identity extractor is five times their L1 distance')
def step_impl(context):
    loss = float(perceptual_loss(context.a, context.b, IdentityExtractor()))
    assert abs(loss - 5 * float((context.a - context.b).abs().mean())) < 1e-12


@then('the random-filter perceptual loss equals a direct re-evaluation')
def step_impl(context):
    extractor = RandomConvExtractor(seed=4)
    loss = perceptual_loss(context.a, context.b, extractor)
    direct = sum((fa - fb).abs().mean() for fa, fb in zip(extractor(context.a), extractor(context.b)))
    assert float(loss) == float(direct)
    assert float(perceptual_loss(context.a, context.a, extractor)) == 0.0


@when('the perceptual loss uses an extractor with {taps:d} taps')
def step_impl(context, taps):
    try:
        perceptual_loss(context.a, context.b, lambda x: [x] * taps)
        context.error = None
    except Exception as e:
        context.error = e


@when('the residual estimate is offset by {offset:g}')
def step_impl(context, offset):
    out = context.output
    context.reconstruction = float(reconstruction_loss(context.image, out.t_hat, out.r_hat, out.n_hat + offset))


@then('the reconstruction loss is {value:g} within {tol:g}')
def step_impl(context, value, tol):
    assert abs(context.reconstruction - value) < tol, context.reconstruction


@when('the total loss combines content {c:g}, exclusion {e:g}, perceptual {p:g} and reconstruction {r:g}')
def step_impl(context, c, e, p, r):
    context.report = total_loss(c, e, p, r)


@then('the total is {total:g}')
def step_impl(context, total):
    assert math.isclose(float(context.report.total), total, rel_tol=0, abs_tol=1e-12), context.report.as_dict()


@when('loss weights are read with the key {key}')
def step_impl(context, key):
    try:
        LossWeights.from_dict({key: 1.0})
        context.error = None
    except Exception as e:
        context.error = e


@given('a randomly initialised VGG extractor')
def step_impl(context):
    context.extractor = VGGExtractor(weights=None)


@when('it extracts features from a {shape} image')
def step_impl(context, shape):
    with torch.no_grad():
        context.features = context.extractor(torch.rand(*(int(v) for v in shape.split("x"))))


@then('{count:d} feature maps come back with {channels} channels')
def step_impl(context, count, channels):
    expected = [int(v) for v in channels.replace(" and ", ", ").split(", ")]
    assert len(context.features) == count
    assert [f.shape[1] for f in context.features] == expected


@then('no extractor parameter requires gradients')
def step_impl(context):
    assert not any(p.requires_grad for p in context.extractor.parameters())
