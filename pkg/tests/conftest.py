import json
from pathlib import Path

import numpy as np
import pytest


def tiny_config(tmp: Path, **over) -> dict:
    """Desk-scale experiment config pointing at ``tmp/data``."""
    stage = {
        "optimizer": {"learning_rate": 1e-3},
        "train": {"max_epochs": 3, "early_stop_patience": 2, "batch_size": 4},
    }
    cfg = {
        "schema_version": 1,
        "seed": 7,
        "repetitions": 2,
        "model": {"in_channels": 3, "out_channels": 1, "base_width": 4, "depth": 2, "input_size": 32},
        "datasets": {
            "source": "data/source/manifest.txt",
            "general": "data/general/manifest.txt",
            "portable_transfer": "data/portable/transfer_manifest.txt",
            "portable_heldout": "data/portable/heldout_manifest.txt",
        },
        "stage0": json.loads(json.dumps(stage)),
        "stage1": json.loads(json.dumps(stage)),
        "stage2": json.loads(json.dumps(stage)),
    }
    cfg.update(over)
    return cfg


TINY_SYNTH = {
    "schema_version": 1,
    "defaults": {"size": 32},
    "domains": {
        "source": {"count_per_class": 8, "seed": 1},
        "general": {"count_per_class": 4, "seed": 2},
        "portable": {"count_per_class": 4, "seed": 3, "halves": True},
    },
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_run_dir(tmp_path_factory):
    """Synthetic data plus a config for a two-repetition, three-epoch pipeline."""
    from xseg.cli import main

    root = tmp_path_factory.mktemp("tiny")
    (root / "synth.json").write_text(json.dumps(TINY_SYNTH))
    assert main(["synth", "--spec", str(root / "synth.json"), "--out", str(root / "data")]) == 0
    (root / "config.json").write_text(json.dumps(tiny_config(root), indent=1))
    return root


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_run_dir):
    from xseg.cli import main

    out = tiny_run_dir / "run"
    assert main(["pipeline", "--config", str(tiny_run_dir / "config.json"), "--out", str(out), "--workers", "1"]) == 0
    return out
