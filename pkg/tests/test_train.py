import copy
import json
import os

import numpy as np
import pytest
import torch

from flowfront.core import Config
from flowfront.data import SyntheticDataset, batch_indices, build_manifest
from flowfront import train as train_mod
from flowfront.train import (
    TrainingDiverged,
    build_state,
    forward_pass,
    pretrain_embedder,
    pretrain_flows,
    train_full,
    train_step,
)


@pytest.fixture(scope="module")
def tiny_manifest():
    return build_manifest(None, n_identities=3, seed=6, resolution=32)


@pytest.fixture(scope="module")
def tiny_dataset(tiny_manifest):
    return SyntheticDataset(tiny_manifest)


def tiny_cfg(**kw):
    base = dict(
        resolution=32,
        total_steps=6,
        embed_steps=3,
        pretrain_epochs=1,
        checkpoint_every=3,
        sample_every=100,
        seed=0,
    )
    base.update(kw)
    return Config(**base)


def _param_blob(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def test_build_state_is_seed_deterministic(tiny_manifest):
    a = build_state(tiny_cfg(), n_classes=2)
    b = build_state(tiny_cfg(), n_classes=2)
    for m in ("flow_fwd", "flow_rev", "gen", "disc", "embedder"):
        assert torch.equal(_param_blob(getattr(a, m)), _param_blob(getattr(b, m)))
    c = build_state(tiny_cfg(seed=1), n_classes=2)
    assert not torch.equal(_param_blob(a.gen), _param_blob(c.gen))


def test_train_step_replays_identically(tiny_manifest, tiny_dataset):
    pool = [
        i for i, r in enumerate(tiny_manifest.records)
        if r.split == "train" and not r.is_gallery
    ]
    batch = batch_indices(0, 0, pool, 4)
    s1 = build_state(tiny_cfg(), n_classes=2)
    s2 = copy.deepcopy(s1)
    r1 = train_step(s1, tiny_dataset, batch)
    r2 = train_step(s2, tiny_dataset, batch)
    assert r1 == r2
    assert torch.equal(_param_blob(s1.gen), _param_blob(s2.gen))


def test_warmup_bypass_is_exact(tiny_manifest, tiny_dataset):
    from flowfront.core import image_to_tensor

    cfg = tiny_cfg(gfilter_warmup_steps=5, total_steps=10)
    state = build_state(cfg, n_classes=2)
    s = tiny_dataset.sample(tiny_manifest.indices(split="train", gallery=False)[0])
    prof = image_to_tensor(s.profile.image).unsqueeze(0)
    front = image_to_tensor(s.frontal.image).unsqueeze(0)
    with torch.no_grad():
        _, _, synth, _, adapted = forward_pass(state, prof, front, step=0)
        assert adapted is synth  # not a copy: bitwise the same tensor
        _, _, synth2, _, adapted2 = forward_pass(state, prof, front, step=5)
        assert adapted2 is not synth2
        assert not torch.equal(adapted2, synth2)


def test_discriminator_and_generator_updates_are_isolated(
    tiny_manifest, tiny_dataset
):
    pool = [
        i for i, r in enumerate(tiny_manifest.records)
        if r.split == "train" and not r.is_gallery
    ]
    state = build_state(tiny_cfg(), n_classes=2)
    pretrain_embedder(state, tiny_dataset)
    before = {
        name: _param_blob(mod).clone()
        for name, mod in state.modules().items()
    }
    train_step(state, tiny_dataset, batch_indices(0, 0, pool, 4))
    after = {name: _param_blob(mod) for name, mod in state.modules().items()}
    assert not torch.equal(before["disc"], after["disc"])
    assert not torch.equal(before["gen"], after["gen"])
    assert not torch.equal(before["flow_fwd"], after["flow_fwd"])
    assert not torch.equal(before["flow_rev"], after["flow_rev"])
    # frozen nets never move
    assert torch.equal(before["embedder"], after["embedder"])
    assert torch.equal(before["backbone"], after["backbone"])
    assert all(not p.requires_grad for p in state.embedder.parameters())


def test_nan_loss_aborts_with_diagnostic(tiny_manifest, tiny_dataset):
    pool = [
        i for i, r in enumerate(tiny_manifest.records)
        if r.split == "train" and not r.is_gallery
    ]
    state = build_state(tiny_cfg(), n_classes=2)
    with torch.no_grad():
        state.gen.out.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as exc:
        train_step(state, tiny_dataset, batch_indices(0, 0, pool, 4))
    assert "step 0" in str(exc.value)
    assert "pixel" in str(exc.value)


def test_pretrain_flows_lowers_landmark_epe(tiny_manifest, tiny_dataset):
    from flowfront.core import image_to_tensor

    cfg = tiny_cfg(pretrain_epochs=2)
    state = build_state(cfg, n_classes=2)
    idx = tiny_manifest.indices(split="train", gallery=False)
    sample = tiny_dataset.sample(idx[0])

    def epe(st):
        prof = image_to_tensor(sample.profile.image).unsqueeze(0)
        with torch.no_grad():
            flow = st.flow_fwd(prof)[0].numpy().transpose(1, 2, 0)
        gt = sample.gt_forward_flow.data
        m = sample.frontal.mask.data.astype(bool)
        return float(np.linalg.norm(flow - gt, axis=2)[m].mean())

    before = epe(state)  # zero-init flow: EPE equals mean gt magnitude
    pretrain_flows(state, tiny_dataset)
    after = epe(state)
    assert after < before


def test_train_full_artifacts_and_resume_tail(tmp_path, tiny_manifest):
    cfg = tiny_cfg()
    out_a = str(tmp_path / "a")
    last = train_full(cfg, tiny_manifest, out_a)
    assert os.path.basename(last) == "step_00000006.ckpt"
    ckpts = sorted(os.listdir(os.path.join(out_a, "checkpoints")))
    assert ckpts == [
        "step_00000000.ckpt",
        "step_00000003.ckpt",
        "step_00000006.ckpt",
    ]
    with open(os.path.join(out_a, "logs", "losses.jsonl")) as fh:
        lines_a = fh.read().splitlines()
    assert len(lines_a) == 6
    rec = json.loads(lines_a[0])
    assert list(rec.keys()) == [
        "step", "pixel", "perceptual", "adversarial",
        "illum_preserve", "identity", "total",
    ]

    # resuming from the midpoint reproduces the tail byte for byte
    out_b = str(tmp_path / "b")
    train_full(
        cfg, tiny_manifest, out_b,
        resume=os.path.join(out_a, "checkpoints", "step_00000003.ckpt"),
    )
    with open(os.path.join(out_b, "logs", "losses.jsonl")) as fh:
        lines_b = fh.read().splitlines()
    assert lines_b == lines_a[3:]


def test_sample_grids_written(tmp_path, tiny_manifest):
    cfg = tiny_cfg(total_steps=2, checkpoint_every=2, sample_every=2)
    out = str(tmp_path / "s")
    train_full(cfg, tiny_manifest, out)
    samples = os.listdir(os.path.join(out, "samples"))
    assert "step_00000002.png" in samples
    from PIL import Image as PILImage

    arr = np.asarray(PILImage.open(os.path.join(out, "samples", "step_00000002.png")))
    # five columns of 32px, up to four probe rows
    assert arr.shape[1] == 5 * 32
    assert arr.shape[0] % 32 == 0
