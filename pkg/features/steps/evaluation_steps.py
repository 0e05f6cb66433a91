import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
from behave import *
from common import randomize_, smooth_image, write_pairs
from scipy import ndimage

from gfrrn.adapters import ParamGroup
from gfrrn.evaluation import (PSNR_CAP, REPORT_COLUMNS, SURFACE_FILES, analyze_filters, evaluate_dataset,
                              load_restorer, plot_filter_surfaces, plot_window_scores, psnr, ssim, weights_summary,
                              window_score_maps)
from gfrrn.network import GFRRN, ModelConfig
from gfrrn.training import save_checkpoint


@given('a random {h:d}x{w:d} image')
def step_impl(context, h, w):
    context.a = smooth_image(np.random.default_rng(5), h, w)


@given('two random {h:d}x{w:d} images')
def step_impl(context, h, w):
    rng = np.random.default_rng(6)
    context.a = smooth_image(rng, h, w)
    context.b = np.clip(context.a + 0.2 * (rng.random((h, w, 3)) - 0.5), 0, 1)


@then('its PSNR against itself is {db:g} dB')
def step_impl(context, db):
    assert psnr(context.a, context.a.copy()) == db == PSNR_CAP


@when('it is compared with a copy brightened by {offset:g}')
def step_impl(context, offset):
    context.psnr = psnr(context.a, context.a + offset)


@then('the PSNR is {db:g} dB within {tol:g}')
def step_impl(context, db, tol):
    assert abs(context.psnr - db) < tol, context.psnr


@then('the PSNR equals ten log10 of one over their mean squared error')
def step_impl(context):
    mse = float(np.mean((context.a - context.b) ** 2))
    assert math.isclose(psnr(context.a, context.b), 10 * math.log10(1 / mse), rel_tol=1e-12)


@then('the PSNR is the same in both argument orders')
def step_impl(context):
    assert psnr(context.a, context.b) == psnr(context.b, context.a)


@then('its SSIM against itself is 1')
def step_impl(context):
    assert abs(ssim(context.a, context.a.copy()) - 1.0) < 1e-12


@when('SSIM compares a constant {a:g} image with a constant {b:g} image of size {size:d}')
def step_impl(context, a, b, size):
    context.ssim = ssim(np.full((size, size, 3), a), np.full((size, size, 3), b))


@then('the SSIM is (0.42 + 1e-4) / (0.58 + 1e-4) within {tol:g}')
def step_impl(context, tol):
    assert abs(context.ssim - (0.42 + 1e-4) / (0.58 + 1e-4)) < tol, context.ssim


def _gaussian_window_ssim(x, y, sigma=1.5, truncate=3.5, crop=5):
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def blur(a):
        return ndimage.gaussian_filter(a, sigma=sigma, truncate=truncate, mode="reflect")

    scores = []
    for ch in range(x.shape[-1]):
        a, b = x[..., ch], y[..., ch]
        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a ** 2
        var_b = blur(b * b) - mu_b ** 2
        cov = blur(a * b) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
        scores.append(s[crop:-crop, crop:-crop].mean())
    return float(np.mean(scores))


@then('the SSIM matches a per-channel Gaussian-window evaluation within {tol:g}')
def step_impl(context, tol):
    expected = _gaussian_window_ssim(context.a, context.b)
    assert abs(ssim(context.a, context.b) - expected) < tol, (ssim(context.a, context.b), expected)


@then('the SSIM is the same in both argument orders')
def step_impl(context):
    assert abs(ssim(context.a, context.b) - ssim(context.b, context.a)) < 1e-12


@when('SSIM compares two {h:d}x{w:d} images')
def step_impl(context, h, w):
    try:
        ssim(np.zeros((h, w, 3)), np.zeros((h, w, 3)))
        context.error = None
    except Exception as e:
        context.error = e


@when('PSNR compares a {h1:d}x{w1:d} image with a {h2:d}x{w2:d} image')
def step_impl(context, h1, w1, h2, w2):
    try:
        psnr(np.zeros((h1, w1, 3)), np.zeros((h2, w2, 3)))
        context.error = None
    except Exception as e:
        context.error = e


@given('a dataset of {count:d} identical pairs at size {size:d}')
def step_impl(context, count, size):
    context.data_root = Path(context.tmp) / "data"
    write_pairs(context.data_root, count, size, identical=True)


@given('a checkpoint of a fresh default model')
def step_impl(context):
    model = GFRRN(ModelConfig())
    store = model.configure_tuning()
    context.model_hash = model.config.hash()
    context.checkpoint = save_checkpoint(Path(context.tmp) / "fresh.npz", model, store=store)


@when('the dataset is evaluated with the identity restorer')
def step_impl(context):
    context.out_dir = Path(context.tmp) / "eval"
    context.metrics = evaluate_dataset(context.data_root, out_dir=context.out_dir, show_progress=False)


@when('the dataset is evaluated with that checkpoint')
def step_impl(context):
    context.out_dir = Path(context.tmp) / "eval"
    context.metrics = evaluate_dataset(context.data_root, context.checkpoint, context.out_dir,
                                       expected_hash=context.model_hash, show_progress=False)


@then('the report has {count:d} rows with finite positive PSNR')
def step_impl(context, count):
    rows = context.metrics.rows
    assert len(context.metrics) == count
    assert list(rows.columns) == REPORT_COLUMNS
    assert np.isfinite(rows["psnr"]).all() and (rows["psnr"] > 0).all()
    assert ((rows["ssim"] > -1) & (rows["ssim"] <= 1)).all()


@then('the report averages are the means of its rows')
def step_impl(context):
    summary = context.metrics.summary()
    assert summary["psnr"] == float(context.metrics.rows["psnr"].mean())
    assert summary["ssim"] == float(context.metrics.rows["ssim"].mean())


@then('report.csv and summary.json are written')
def step_impl(context):
    written = pd.read_csv(context.out_dir / "report.csv", dtype={"pair_id": str})
    assert list(written["pair_id"]) == list(context.metrics.rows["pair_id"])
    summary = json.loads((context.out_dir / "summary.json").read_text())
    assert summary["count"] == len(context.metrics)
    assert summary["checkpoint"] == "identity"


@then('every pair scores 99 dB and an SSIM of 1')
def step_impl(context):
    assert (context.metrics.rows["psnr"] == PSNR_CAP).all()
    assert np.allclose(context.metrics.rows["ssim"], 1.0, atol=1e-12)


@then('the summary carries the checkpoint config hash')
def step_impl(context):
    summary = json.loads((context.out_dir / "summary.json").read_text())
    assert summary["config_hash"] == context.model_hash
    assert summary["checkpoint"] == str(context.checkpoint)


@when('its restorer is loaded against the hash of a {channels:d} channel config')
def step_impl(context, channels):
    try:
        load_restorer(context.checkpoint, expected_hash=ModelConfig(channels=channels).hash())
        context.error = None
    except Exception as e:
        context.error = e


@when('the filters are analyzed at size {size:d}')
def step_impl(context, size):
    context.filter_table = analyze_filters(size=size)


@then('the table has {gaussian:d} gaussian and {rectangular:d} rectangular rows')
def step_impl(context, gaussian, rectangular):
    counts = context.filter_table["kind"].value_counts()
    assert counts["gaussian"] == gaussian
    assert counts["rectangular"] == rectangular


@then('every gaussian ringing value is below {low:g} and every rectangular one exceeds {high:g}')
def step_impl(context, low, high):
    table = context.filter_table
    assert (table.loc[table["kind"] == "gaussian", "ringing"] < low).all()
    assert (table.loc[table["kind"] == "rectangular", "ringing"] > high).all()


@when('the filter surfaces are plotted at size {size:d}')
def step_impl(context, size):
    context.paths = plot_filter_surfaces(Path(context.tmp) / "filters", size=size)


@then('the four surface images exist')
def step_impl(context):
    assert sorted(p.name for p in context.paths) == sorted(SURFACE_FILES.values())
    assert all(p.stat().st_size > 0 for p in context.paths)


@when('a {h:d}x{w:d} window score map is plotted')
def step_impl(context, h, w):
    scores = 2 * np.random.default_rng(8).random((1, 1, h, w))
    context.heatmap = plot_window_scores(scores, Path(context.tmp) / "plots" / "scores.png")


@then('the heatmap image exists')
def step_impl(context):
    assert context.heatmap.exists() and context.heatmap.stat().st_size > 0


@when('its weights are summarized')
def step_impl(context):
    context.summary = weights_summary(context.checkpoint)


@then('the summary counts frozen backbone and trainable mona parameters')
def step_impl(context):
    groups = context.summary["groups"]
    assert groups[ParamGroup.BACKBONE.value]["trainable"] == 0
    assert groups[ParamGroup.BACKBONE.value]["frozen"] > 0
    assert groups[ParamGroup.MONA.value]["trainable"] > 0
    assert groups[ParamGroup.MONA.value]["frozen"] == 0
    assert groups[ParamGroup.TASK.value]["trainable"] > 0


@then('the summary reports {mode} tuning at epoch {epoch:d}')
def step_impl(context, mode, epoch):
    assert context.summary["tuning_mode"] == mode
    assert context.summary["epoch"] == epoch
    assert context.summary["config_hash"] == context.model_hash


@given('a default model whose window importance estimators are randomized')
def step_impl(context):
    context.model = GFRRN(ModelConfig()).eval()
    for i, level in enumerate(context.model.levels):
        randomize_(level.blocks[0].self_attn.wie, std=0.5, seed=i)


@given('a default model built with {kind} attention')
def step_impl(context, kind):
    context.model = GFRRN(ModelConfig(attention_kind=kind)).eval()


@when('window score maps are taken for a {h:d}x{w:d} image')
def step_impl(context, h, w):
    context.size = (h, w)
    image = smooth_image(np.random.default_rng(9), h, w)
    try:
        context.maps = window_score_maps(context.model, image)
        context.error = None
    except Exception as e:
        context.error = e


@then('there is one score map per decoder level at the image size')
def step_impl(context):
    assert context.error is None, context.error
    assert [m.level for m in context.maps] == list(range(len(context.model.levels)))
    for m in context.maps:
        assert m.transmission.shape == m.reflection.shape == (1, 1) + context.size
        assert m.combined.shape == (1, 1) + context.size


@then('every score lies inside (0, 2) and is constant over each window')
def step_impl(context):
    cfg = context.model.config
    for m in context.maps:
        span = cfg.window * cfg.patch_size * 2 ** m.level
        for grid in (m.transmission[0, 0], m.reflection[0, 0]):
            assert ((grid > 0) & (grid < 2)).all()
            assert not np.allclose(grid, 1.0)
            corner = grid[:span, :span]
            assert np.allclose(corner, corner[0, 0])
