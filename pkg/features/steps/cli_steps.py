import json
import shlex
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pandas as pd
from behave import *
from common import captured_log, smooth_image, WARNING_STR

from gfrrn.cli import cli_dispatch
from gfrrn.evaluation import SURFACE_FILES
from gfrrn.labels import load_dataset
from gfrrn.utils import save_image

TINY_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "tiny.yaml"


def _dispatch(context, argv):
    out = StringIO()
    with captured_log("ERROR") as log, redirect_stdout(out):
        context.exit_code = cli_dispatch(argv)
    context.stdout = out.getvalue()
    context.log = log.getvalue()


def _argv(context, command):
    values = {"tmp": context.tmp, "data": getattr(context, "data_root", ""), "config": TINY_CONFIG}
    return shlex.split(command.format(**values))


@given('a folder of {count:d} source photos')
def step_impl(context, count):
    rng = np.random.default_rng(11)
    for k in range(count):
        save_image(Path(context.tmp) / "photos" / f"photo{k}.png", smooth_image(rng, 40, 48))


@given('a {h:d}x{w:d} photo saved as photo.png')
def step_impl(context, h, w):
    context.photo_size = (h, w)
    save_image(Path(context.tmp) / "photo.png", smooth_image(np.random.default_rng(12), h, w))


@given('filter analysis fails unexpectedly')
def step_impl(context):
    patcher = patch("gfrrn.cli.analyze_filters", side_effect=RuntimeError("surface grid exploded"))
    patcher.start()
    context.add_cleanup(patcher.stop)


@when('the command "{command}" is run')
def step_impl(context, command):
    _dispatch(context, _argv(context, command))


@when('the command line is empty')
def step_impl(context):
    _dispatch(context, [])


@when('the train command is run with "{arguments}"')
def step_impl(context, arguments):
    context.fit = MagicMock(return_value=MagicMock(trajectory=pd.DataFrame()))
    with patch("gfrrn.cli.fit", context.fit):
        _dispatch(context, ["train"] + _argv(context, arguments))


@then('the command exits with {code:d}')
def step_impl(context, code):
    assert context.exit_code == code, (context.exit_code, context.log)


@then('T.png, R_low.png and N.png are written under labels')
def step_impl(context):
    out_dir = Path(context.tmp) / "labels"
    for name in ("T.png", "R_low.png", "N.png"):
        assert (out_dir / name).exists(), name
        assert str(out_dir / name) in context.stdout


@then('the synth folder holds a manifest of {count:d} pairs and a synthesis table')
def step_impl(context, count):
    synth = Path(context.tmp) / "synth"
    assert len(load_dataset(synth)) == count
    table = pd.read_csv(synth / "synthesis.csv")
    assert len(table) == count
    assert (table["transmission_source"] != table["reflection_source"]).all()


@then('the printed summary counts {count:d} pairs')
def step_impl(context, count):
    summary = json.loads(context.stdout)
    assert summary["count"] == count
    assert summary["checkpoint"] == "identity"


@then('the report folder holds {count:d} report rows')
def step_impl(context, count):
    assert len(pd.read_csv(Path(context.tmp) / "report" / "report.csv")) == count
    assert (Path(context.tmp) / "report" / "summary.json").exists()


@then('the filters folder holds filters.csv and four surface images')
def step_impl(context):
    out_dir = Path(context.tmp) / "filters"
    assert len(pd.read_csv(out_dir / "filters.csv")) == 10
    for name in SURFACE_FILES.values():
        assert (out_dir / name).exists(), name


@then('the weights folder holds a heat-map and a CSV for each of {levels:d} decoder levels')
def step_impl(context, levels):
    out_dir = Path(context.tmp) / "weights"
    summary = json.loads(context.stdout)
    assert set(summary["groups"]) == {"backbone", "mona", "task"}
    assert len(summary["files"]) == 2 * levels
    for level in range(levels):
        assert (out_dir / f"wie_level{level}.png").stat().st_size > 0
        grid = pd.read_csv(out_dir / f"wie_level{level}.csv", header=None).to_numpy()
        assert grid.shape == context.photo_size, grid.shape
        assert np.allclose(grid, 1.0)
    assert not (out_dir / f"wie_level{levels}.png").exists()


@then('training received {mode} tuning and a {steps:d} step limit')
def step_impl(context, mode, steps):
    context.fit.assert_called_once()
    manifest, run = context.fit.call_args.args[:2]
    assert len(manifest) == 2
    assert run.model.tuning_mode == run.train.tuning_mode == mode
    assert run.train.max_steps == steps
    assert context.fit.call_args.kwargs["out_dir"] == f"{context.tmp}/runs"


@then('a GFRRN error is logged for {command}')
def step_impl(context, command):
    assert f"While running {command} {WARNING_STR}" in context.log, context.log


@then('training received {weights} perceptual weights')
def step_impl(context, weights):
    run = context.fit.call_args.args[1]
    assert run.train.vgg_weights == weights
