import os
import shutil
import sys
import tempfile

import torch
from loguru import logger

from gfrrn.utils import seed_everything

os.environ.setdefault("GFRRN_DEVICE", "cpu")


def before_all(context):
    logger.remove()
    logger.add(sys.stderr, level=os.environ.get("GFRRN_TEST_LOG_LEVEL", "WARNING"))
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


def before_scenario(context, scenario):
    if "slow" in scenario.effective_tags and not os.environ.get("GFRRN_RUN_SLOW"):
        scenario.skip("set GFRRN_RUN_SLOW=1 to run the slow training scenarios")
        return
    seed_everything(0)
    context.tmp = tempfile.mkdtemp(prefix="gfrrn-")


def after_scenario(context, scenario):
    if getattr(context, "tmp", None):
        shutil.rmtree(context.tmp, ignore_errors=True)
    torch.set_default_dtype(torch.float32)
