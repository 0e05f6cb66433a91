import numpy as np
import torch
from behave import *
from common import double_tensor, randomize_

from gfrrn.frequency import (GAFLB, FrequencyMask, MaskKind, build_mask, fmim_split, impulse_response,
                             ringing_metric)
from gfrrn.training import gradient_check, projection_loss


@when('a {kind} mask of size {size:d} is built with {what} {px:g} and {py:g}')
def step_impl(context, kind, size, what, px, py):
    context.mask = build_mask(MaskKind(kind), (size, size), (px, py))
    context.h = impulse_response(context.mask)


@then('the impulse response has no negative lobe beyond {tol:g}')
def step_impl(context, tol):
    assert context.h.min() >= -tol, context.h.min()


@then('the impulse response has a negative lobe')
def step_impl(context):
    assert context.h.min() < 0


@then('the ringing metric is below {limit:g}')
def step_impl(context, limit):
    assert ringing_metric(context.mask) < limit


@then('the ringing metric exceeds {limit:g}')
def step_impl(context, limit):
    assert ringing_metric(context.mask) > limit


@then('the peak sits at the centre of the grid')
def step_impl(context):
    h, w = context.h.shape
    assert np.unravel_index(np.argmax(context.h), context.h.shape) == (h // 2, w // 2)


@then('the inverse transform of the mask has no imaginary part beyond {tol:g}')
def step_impl(context, tol):
    raw = np.fft.ifft2(np.fft.ifftshift(context.mask.grid))
    assert np.abs(raw.imag).max() < tol
    assert np.array_equal(context.h, np.fft.fftshift(raw).real)


@when('the impulse response of a random {size:d}x{size2:d} mask grid is taken')
def step_impl(context, size, size2):
    grid = np.random.default_rng(6).random((size, size2))
    try:
        impulse_response(FrequencyMask(MaskKind.GAUSSIAN, (0.3, 0.3), grid))
        context.error = None
    except Exception as e:
        context.error = e


@when('a {kind} mask is requested with parameters {p:g} and {q:g}')
def step_impl(context, kind, p, q):
    try:
        build_mask(kind, (32, 32), (p, q))
        context.error = None
    except Exception as e:
        context.error = e


@given('a random feature map of shape {b:d}x{c:d}x{h:d}x{w:d} in double precision')
def step_impl(context, b, c, h, w):
    context.x = double_tensor(np.random.default_rng(4), b, c, h, w)


@when('it is split with frequency sigmas {sx:g} and {sy:g}')
def step_impl(context, sx, sy):
    context.low, context.high = fmim_split(context.x, (sx, sy))


@then('the low and high bands add back to the map within {tol:g}')
def step_impl(context, tol):
    assert torch.allclose(context.low + context.high, context.x, atol=tol, rtol=0)


@then('the low band holds the mean of every channel')
def step_impl(context):
    torch.testing.assert_close(context.low.mean(dim=(-2, -1)), context.x.mean(dim=(-2, -1)))


@when('a constant image of value {value:g} is split with frequency sigmas {sx:g} and {sy:g}')
def step_impl(context, value, sx, sy):
    _, context.high = fmim_split(np.full((20, 24, 3), value), (sx, sy))


@then('the high band is zero within {tol:g}')
def step_impl(context, tol):
    assert np.max(np.abs(context.high)) < tol


@given('a G-AFLB with {channels:d} channels')
def step_impl(context, channels):
    context.channels = channels
    context.block = GAFLB(channels, num_heads=2)


@given('a G-AFLB with {channels:d} channels in double precision with randomized weights')
def step_impl(context, channels):
    context.block = randomize_(GAFLB(channels, num_heads=2).double(), std=0.2, seed=3)
    rng = np.random.default_rng(5)
    context.x = double_tensor(rng, 1, channels, 8, 8)
    context.image = torch.from_numpy(rng.random((1, 3, 8, 8)))


@when('it is applied to random features and an image of size {size:d}')
def step_impl(context, size):
    context.x = torch.randn(2, context.channels, size, size)
    with torch.no_grad():
        context.out = context.block(context.x, torch.rand(2, 3, size, size))


@then('the output equals the input features')
def step_impl(context):
    assert torch.equal(context.out, context.x)


@when('its blur widths are predicted for {count:d} random images')
def step_impl(context, count):
    with torch.no_grad():
        context.widths = context.block.predict_sigma(torch.rand(count, 3, 16, 16) * 10 - 5)


@then('every width lies in [0.5, 8.0]')
def step_impl(context):
    assert context.widths.shape[-1] == 2
    assert bool(torch.all(context.widths >= 0.5)) and bool(torch.all(context.widths <= 8.0))


@when('it is applied to 16x16 features and a 12x12 image')
def step_impl(context):
    try:
        context.block(torch.randn(1, context.channels, 16, 16), torch.rand(1, 3, 12, 12))
        context.error = None
    except Exception as e:
        context.error = e


@when('its gradients are checked by central differences')
def step_impl(context):
    block = context.block
    inputs = [context.x.requires_grad_()] + list(block.parameters())
    context.report = gradient_check(lambda: projection_loss(block(context.x, context.image)), inputs, h=1e-6)


@then('the worst relative gradient error is below {tol:g}')
def step_impl(context, tol):
    assert context.report.passed(tol), context.report


@then('the mask is 1 at DC and strictly decreasing away from it along each axis')
def step_impl(context):
    grid = context.mask.grid
    cy, cx = grid.shape[0] // 2, grid.shape[1] // 2
    assert grid[cy, cx] == 1.0
    for line, c in ((grid[cy, :], cx), (grid[:, cx], cy)):
        assert (np.diff(line[c:]) < 0).all()
        assert (np.diff(line[:c + 1]) > 0).all()


@then('the mask is 1 at DC and 0 at Nyquist')
def step_impl(context):
    grid = context.mask.grid
    cy, cx = grid.shape[0] // 2, grid.shape[1] // 2
    assert grid[cy, cx] == 1.0
    assert grid[cy, 0] == 0.0 and grid[0, cx] == 0.0 and grid[0, 0] == 0.0


@then('the mask passes every frequency and its impulse response is a centred unit delta within {tol:g}')
def step_impl(context, tol):
    assert (context.mask.grid == 1.0).all()
    expected = np.zeros(context.h.shape)
    expected[context.h.shape[0] // 2, context.h.shape[1] // 2] = 1.0
    assert np.max(np.abs(context.h - expected)) < tol


@given('a unit checkerboard at Nyquist of shape {c:d}x{h:d}x{w:d} in double precision')
def step_impl(context, c, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    board = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    context.x = torch.from_numpy(np.broadcast_to(board, (1, c, h, w)).copy())


@then('at least {share:g} of the energy sits in the high band')
def step_impl(context, share):
    energy = float((context.x ** 2).sum())
    assert float((context.high ** 2).sum()) >= share * energy, float((context.high ** 2).sum()) / energy


@then('the energy of the map is that of both bands plus twice their inner product within {tol:g}')
def step_impl(context, tol):
    energy = float((context.x ** 2).sum())
    bands = float((context.low ** 2).sum() + (context.high ** 2).sum() + 2 * (context.low * context.high).sum())
    assert abs(energy - bands) < tol * max(energy, 1.0)
