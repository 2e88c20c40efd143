"""
Shared pytest fixtures: the CI-scale config, a tiny recorded dataset and a
tiny trained pipeline, each built once per session.
"""

from pathlib import Path

import pytest

from datastore import record_dataset
from run_config import load_config
from training import Trainer

TINY_CONFIG = Path(__file__).resolve().parent / "configs" / "tiny.env"


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(str(TINY_CONFIG), use_environment=False)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg, tmp_path_factory):
    return record_dataset(tmp_path_factory.mktemp("dataset"), tiny_cfg, verbose=False)


@pytest.fixture(scope="session")
def trained_run(tiny_cfg, tiny_dataset, tmp_path_factory):
    """World model, stage-1 and stage-2 checkpoints from one tiny run."""
    out = tmp_path_factory.mktemp("run")
    trainer = Trainer(tiny_cfg, out, verbose=False)
    wm = trainer.pretrain_wm(tiny_dataset)
    stage1 = trainer.train_stage1(tiny_dataset, wm)
    stage2 = trainer.train_stage2(tiny_dataset, stage1, wm)
    return {"dir": out, "wm": wm, "stage1": stage1, "stage2": stage2}
