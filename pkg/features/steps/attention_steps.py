from unittest.mock import patch

import numpy as np
import torch
import torch.nn.functional as F
from behave import *
from common import double_tensor, randomize_

from gfrrn.attention import (AttentionConfig, DynamicAgentAttention, LayerwiseDynamicAgentAttention,
                             WindowAttention, generate_agents, remap_window_scores, shifted_window_mask,
                             window_count, window_partition, window_reverse)
from gfrrn.training import gradient_check, projection_loss


def direct_agent_attention(layer, x):
    """Plain agent attention written out step by step, with every window score at 1."""
    cfg = layer.cfg
    n, L, c = x.shape
    wh, ww = cfg.window
    heads, d = cfg.heads, cfg.head_dim
    side = int(round(cfg.num_agents ** 0.5))
    q, k, v = F.linear(x, layer.qkv.weight, layer.qkv.bias).split(c, dim=-1)
    grid = q.reshape(n, side, wh // side, side, ww // side, c)
    agents = grid.mean(dim=(2, 4)).reshape(n, side * side, c)
    out = torch.zeros_like(q)
    for head in range(heads):
        cols = slice(head * d, (head + 1) * d)
        qh, kh, vh, ah = q[..., cols], k[..., cols], v[..., cols], agents[..., cols]
        agg = torch.softmax(ah @ kh.transpose(1, 2) / d ** 0.5, dim=-1)
        broadcast = torch.softmax(qh @ ah.transpose(1, 2) / d ** 0.5, dim=-1)
        out[..., cols] = broadcast @ (agg @ vh)
    v_map = v.reshape(n, wh, ww, c).permute(0, 3, 1, 2)
    local = F.conv2d(v_map, layer.dwc.weight, layer.dwc.bias, padding=1, groups=c)
    out = out + local.permute(0, 2, 3, 1).reshape(n, L, c)
    return F.linear(out, layer.proj.weight, layer.proj.bias)


def constant_scores(value):
    return lambda q, window: torch.full((q.shape[0], 1), value, dtype=q.dtype)


@given('a random map of size {h:d}x{w:d} with {c:d} channels')
def step_impl(context, h, w, c):
    context.map = torch.randn(2, h, w, c)


@when('it is partitioned into {wh:d}x{ww:d} windows')
def step_impl(context, wh, ww):
    try:
        context.windows = window_partition(context.map, (wh, ww))
        context.error = None
    except Exception as e:
        context.error = e


@then('there are {count:d} windows of {tokens:d} tokens')
def step_impl(context, count, tokens):
    assert context.error is None, context.error
    assert context.windows.tokens.shape == (2 * count, tokens, context.map.shape[-1])
    h, w = context.map.shape[1:3]
    assert window_count(h, w, context.windows.window_dims) == count


@then('reversing the windows gives back the map exactly')
def step_impl(context):
    assert torch.equal(window_reverse(context.windows), context.map)


@when('every window is scored by its index')
def step_impl(context):
    count = context.windows.tokens.shape[0]
    context.scores = torch.arange(count, dtype=torch.float32).reshape(count, 1)
    context.score_map = remap_window_scores(context.scores, context.windows)


@then("the score map is {h:d}x{w:d} and every pixel carries its window's score")
def step_impl(context, h, w):
    batch = context.map.shape[0]
    wh, ww = context.windows.window_dims
    per_row = -(-w // ww)
    per_image = -(-h // wh) * per_row
    assert context.score_map.shape == (batch, 1, h, w)
    for b in range(batch):
        for i in range(h):
            for j in range(w):
                index = b * per_image + (i // wh) * per_row + j // ww
                assert context.score_map[b, 0, i, j] == context.scores[index, 0]


@when('an attention config with {channels:d} channels, {heads:d} heads and {agents:d} agents is created')
def step_impl(context, channels, heads, agents):
    try:
        AttentionConfig(channels, heads, window=8, num_agents=agents)
        context.error = None
    except Exception as e:
        context.error = e


@given('a dynamic agent attention with {channels:d} channels, {heads:d} heads and {agents:d} agents in double precision')
def step_impl(context, channels, heads, agents):
    context.cfg = AttentionConfig(channels, heads, window=8, num_agents=agents)
    context.layer = DynamicAgentAttention(context.cfg).double()
    context.tokens = context.cfg.tokens_per_window


@given('a cross-stream agent attention with {channels:d} channels, {heads:d} heads and {agents:d} agents in double precision')
def step_impl(context, channels, heads, agents):
    context.cfg = AttentionConfig(channels, heads, window=8, num_agents=agents)
    context.layer = LayerwiseDynamicAgentAttention(context.cfg).double()
    context.tokens = 2 * context.cfg.tokens_per_window


@given('its weights are randomized')
def step_impl(context):
    randomize_(context.layer, std=0.3, seed=1)


@when('it is compared with a direct agent attention on {count:d} random inputs')
def step_impl(context, count):
    rng = np.random.default_rng(9)
    diffs = []
    with torch.no_grad():
        for _ in range(count):
            x = double_tensor(rng, 2, context.tokens, context.cfg.channels)
            diffs.append(float((context.layer(x) - direct_agent_attention(context.layer, x)).abs().max()))
    context.diff = max(diffs)


@then('the largest difference is below {tol:g}')
def step_impl(context, tol):
    assert context.diff < tol, context.diff


@when('it attends over {count:d} random windows')
def step_impl(context, count):
    x = double_tensor(np.random.default_rng(2), count, context.tokens, context.cfg.channels)
    with torch.no_grad():
        _, context.agg, context.broadcast, context.score = context.layer.forward_with_attention(x)


@then('the {which} map has shape {shape} and rows summing to 1')
def step_impl(context, which, shape):
    attn = context.agg if which == "aggregation" else context.broadcast
    assert tuple(attn.shape) == tuple(int(s) for s in shape.split("x")), attn.shape
    torch.testing.assert_close(attn.sum(-1), torch.ones_like(attn.sum(-1)))


@then('every window score lies strictly between 0 and 2')
def step_impl(context):
    assert bool(torch.all(context.score > 0)) and bool(torch.all(context.score < 2))


@when('its window importance is forced to {value:g}')
def step_impl(context, value):
    layer = context.layer
    x = double_tensor(np.random.default_rng(6), 2, context.tokens, context.cfg.channels)
    q = layer.qkv(x).chunk(3, dim=-1)[0].detach()
    with torch.no_grad(), patch.object(layer.wie, "forward", side_effect=constant_scores(value)):
        context.agents, _ = layer.agent_tokens(q)
        context.weighted = layer(x)
    context.pooled = generate_agents(q, context.cfg.window, (2, 2))
    with torch.no_grad():
        context.unweighted = layer(x)
    context.value = value


@then('the agents are half of the pooled queries')
def step_impl(context):
    torch.testing.assert_close(context.agents, context.pooled * context.value)


@then('the output differs from the unweighted output')
def step_impl(context):
    assert not torch.allclose(context.weighted, context.unweighted)


@when('the transmission stream scores {t_score:g} and the reflection stream scores {r_score:g}')
def step_impl(context, t_score, r_score):
    layer = context.layer
    x = double_tensor(np.random.default_rng(8), 3, context.tokens, context.cfg.channels)
    scores = [torch.full((3, 1), t_score, dtype=torch.float64), torch.full((3, 1), r_score, dtype=torch.float64)]
    with torch.no_grad(), patch.object(layer.wie, "forward", side_effect=scores) as wie:
        _, context.agg, _, context.score = layer.forward_with_attention(x)
    assert wie.call_count == 2


@then('every window score equals {value:g}')
def step_impl(context, value):
    torch.testing.assert_close(context.score, torch.full_like(context.score, value))


@then('there are {count:d} agents per window')
def step_impl(context, count):
    assert context.agg.shape[2] == count


@when('it is given {tokens:d} tokens per window')
def step_impl(context, tokens):
    try:
        context.layer(torch.randn(2, tokens, context.cfg.channels, dtype=torch.float64))
        context.error = None
    except Exception as e:
        context.error = e


@when('the agent attention gradients are checked by central differences')
def step_impl(context):
    layer = context.layer
    x = double_tensor(np.random.default_rng(3), 2, context.tokens, context.cfg.channels).requires_grad_()
    tensors = [x, layer.qkv.weight, layer.agg_bias, layer.broadcast_bias, layer.wie.fc1.weight, layer.proj.weight]
    context.report = gradient_check(lambda: projection_loss(layer(x)), tensors, h=1e-6)


@when('the shifted window mask for a {h:d}x{w:d} map with window {window:d} and shift {shift:d} is built')
def step_impl(context, h, w, window, shift):
    context.mask = shifted_window_mask((h, w), window, shift)


@then('the mask has shape {shape} with values 0 and -100 only')
def step_impl(context, shape):
    assert tuple(context.mask.shape) == tuple(int(s) for s in shape.split("x"))
    assert set(context.mask.unique().tolist()) == {0.0, -100.0}


@then('the first window is unmasked')
def step_impl(context):
    assert not context.mask[0].any()


@then('every token may attend to itself')
def step_impl(context):
    assert not torch.diagonal(context.mask, dim1=-2, dim2=-1).any()


@given('a window attention with {channels:d} channels, {heads:d} heads and window {window:d}')
def step_impl(context, channels, heads, window):
    context.wmsa = WindowAttention(channels, heads, window).double()
    context.window = window


@when('it attends over a shifted {h:d}x{w:d} map')
def step_impl(context, h, w):
    x = torch.randn(1, h, w, context.wmsa.channels, dtype=torch.float64)
    shifted = torch.roll(x, shifts=(-context.window // 2, -context.window // 2), dims=(1, 2))
    windows = window_partition(shifted, context.window)
    context.mask = shifted_window_mask((h, w), context.window, context.window // 2).double()
    with torch.no_grad():
        _, context.attn = context.wmsa.forward_with_attention(windows.tokens, mask=context.mask)


@then('the attention rows sum to 1')
def step_impl(context):
    torch.testing.assert_close(context.attn.sum(-1), torch.ones_like(context.attn.sum(-1)))


@then('masked pairs receive less than {limit:g} of the attention')
def step_impl(context, limit):
    blocked = (context.mask != 0).unsqueeze(1).expand_as(context.attn)
    assert float(context.attn[blocked].max()) < limit


@when('{count:d} random map shapes including 17x23 are partitioned into 8x8 windows and reversed')
def step_impl(context, count):
    rng = np.random.default_rng(17)
    shapes = [(17, 23)] + [tuple(int(v) for v in rng.integers(8, 48, size=2)) for _ in range(count - 1)]
    context.round_trips = []
    for h, w in shapes:
        x = torch.from_numpy(rng.standard_normal((h, w, 3)))
        windows = window_partition(x, 8)
        context.round_trips.append((x, windows, window_reverse(windows)))


@then('every map comes back exactly from a ceiling count of windows')
def step_impl(context):
    assert len(context.round_trips) == 50
    for x, windows, back in context.round_trips:
        h, w = x.shape[:2]
        assert torch.equal(back, x), (h, w)
        assert windows.num_windows == window_count(h, w, 8) == -(-h // 8) * -(-w // 8)


@given('a single-token dynamic agent attention with {channels:d} channels and randomized weights')
def step_impl(context, channels):
    context.cfg = AttentionConfig(channels, 2, window=1, num_agents=1)
    context.layer = randomize_(DynamicAgentAttention(context.cfg).double(), std=0.3, seed=4)


@then('its output is the projection of the values plus their depthwise convolution')
def step_impl(context):
    layer, c = context.layer, context.cfg.channels
    x = double_tensor(np.random.default_rng(12), 5, 1, c)
    with torch.no_grad():
        _, agg, broadcast, score = layer.forward_with_attention(x)
        v = F.linear(x, layer.qkv.weight, layer.qkv.bias)[..., 2 * c:]
        local = F.conv2d(v.reshape(5, 1, 1, c).permute(0, 3, 1, 2), layer.dwc.weight, layer.dwc.bias, padding=1,
                         groups=c).reshape(5, 1, c)
        expected = F.linear(v + local, layer.proj.weight, layer.proj.bias)
        out = layer(x)
    assert torch.equal(agg, torch.ones_like(agg)) and torch.equal(broadcast, torch.ones_like(broadcast))
    assert not torch.allclose(score, torch.ones_like(score))
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)


@when('both halves of every window carry the same tokens')
def step_impl(context):
    layer = context.layer
    randomize_(layer.wie, std=0.3, seed=5)
    half = double_tensor(np.random.default_rng(13), 3, context.cfg.tokens_per_window, context.cfg.channels)
    with torch.no_grad():
        context.halves = layer(torch.cat([half, half], dim=1)).chunk(2, dim=1)


@then('the two output halves agree within {tol:g}')
def step_impl(context, tol):
    first, second = context.halves
    assert float((first - second).abs().max()) < tol


@given('a window attention with {channels:d} channels, {heads:d} heads, window {window:d} and no position bias')
def step_impl(context, channels, heads, window):
    context.wmsa = WindowAttention(channels, heads, window, position_bias=False).double()
    context.window = window


@when('the tokens of every window are shuffled by one permutation')
def step_impl(context):
    tokens = context.window * context.window
    x = double_tensor(np.random.default_rng(14), 3, tokens, context.wmsa.channels)
    perm = torch.from_numpy(np.random.default_rng(15).permutation(tokens))
    with torch.no_grad():
        context.shuffled_out = context.wmsa(x[:, perm])
        context.out_shuffled = context.wmsa(x)[:, perm]


@then('the output is shuffled the same way within {tol:g}')
def step_impl(context, tol):
    assert float((context.shuffled_out - context.out_shuffled).abs().max()) < tol


@then('a single-token window attends only to itself and returns the projected values')
def step_impl(context):
    wmsa = context.wmsa
    x = double_tensor(np.random.default_rng(16), 4, 1, wmsa.channels)
    with torch.no_grad():
        out, attn = wmsa.forward_with_attention(x)
        v = F.linear(x, wmsa.qkv.weight, wmsa.qkv.bias)[..., 2 * wmsa.channels:]
        expected = F.linear(v, wmsa.proj.weight, wmsa.proj.bias)
    assert torch.equal(attn, torch.ones_like(attn))
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)
