import json
import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from flowfront.core import Config
from flowfront.data import SyntheticDataset, build_manifest
from flowfront import train as train_mod


@pytest.fixture(scope="session")
def manifest10():
    return build_manifest(None, n_identities=10, seed=2, resolution=64)


@pytest.fixture(scope="session")
def dataset10(manifest10):
    return SyntheticDataset(manifest10)


@pytest.fixture(scope="session")
def pretrained_flows(manifest10, dataset10):
    """Both flow estimators after the standard 4-epoch warmup on 10 identities.
    Returns (state, elapsed_seconds)."""
    cfg = Config(resolution=64, seed=0)
    state = train_mod.build_state(cfg, n_classes=len(manifest10.train_ids))
    t0 = time.monotonic()
    train_mod.pretrain_flows(state, dataset10)
    return state, time.monotonic() - t0


@pytest.fixture(scope="session")
def smoke500(tmp_path_factory):
    """500-step end-to-end run at 32x32 with batch 8.
    Returns (out_dir, parsed loss rows, elapsed_seconds)."""
    out = tmp_path_factory.mktemp("smoke500")
    man = build_manifest(None, n_identities=10, seed=2, resolution=32)
    cfg = Config(resolution=32, total_steps=500, seed=0)
    t0 = time.monotonic()
    train_mod.train_full(cfg, man, str(out))
    elapsed = time.monotonic() - t0
    with open(out / "logs" / "losses.jsonl") as fh:
        rows = [json.loads(line) for line in fh]
    return out, rows, elapsed


@pytest.fixture(scope="session")
def ablation_runs(tmp_path_factory):
    """Identically seeded 2000-step runs on 20 identities at 64x64: the full
    objective vs. the same objective with the illumination-preservation
    weight zeroed. Returns (manifest, full_state, ablated_state, elapsed)."""
    out = tmp_path_factory.mktemp("ablation")
    man = build_manifest(None, n_identities=20, seed=1, resolution=64)
    cfg_full = Config(resolution=64, total_steps=2000, seed=0)
    cfg_abl = cfg_full.replace(lambdas=(5.0, 1.0, 0.1, 0.0, 1.0))
    t0 = time.monotonic()
    last_full = train_mod.train_full(cfg_full, man, str(out / "full"))
    last_abl = train_mod.train_full(cfg_abl, man, str(out / "ablated"))
    elapsed = time.monotonic() - t0
    full_state = train_mod.load_state(last_full, man)
    abl_state = train_mod.load_state(last_abl, man)
    return man, full_state, abl_state, elapsed


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
