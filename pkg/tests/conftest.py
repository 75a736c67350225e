import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def world():
    """Default synthetic world, shared by every test that needs one."""
    from convasr.pipeline.synth import WorldSpec, build_world

    return build_world(WorldSpec())


FAST_RNN = {"embed_dim": 8, "hidden": [8], "phase1_passes": 1, "max_epochs": 2}


def fast_config(out_dir, world=None, **blocks):
    """Small world and tiny recurrent LMs so a full run takes a few seconds."""
    from convasr.pipeline.config import PipelineConfig

    d = {"out_dir": str(out_dir),
         "world": {"n_train": 10, "n_dev": 20, "n_eval": 20, "in_domain_words": 3000,
                   "out_domain_words": 1000, "validation_words": 500, **(world or {})},
         "lm": {"rnn": FAST_RNN}}
    d.update(blocks)
    return PipelineConfig.from_dict(d)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default configuration run once; returns (out_dir, report)."""
    from convasr.pipeline.config import PipelineConfig
    from convasr.pipeline.run import run_pipeline

    out = tmp_path_factory.mktemp("default_run")
    return out, run_pipeline(PipelineConfig(out_dir=str(out)))
