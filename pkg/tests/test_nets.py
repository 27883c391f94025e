import os

import numpy as np
import pytest
import torch

from flowfront.core import Config, FlowField, Image
from flowfront.nets import (
    CHECKPOINT_VERSION,
    Discriminator,
    Embedder,
    FlowEstimator,
    Generator,
    WarpAttention,
    discriminate,
    embed,
    estimate_flow,
    generate,
    load_checkpoint,
    param_count,
    save_checkpoint,
)


def test_flow_estimator_zero_initialized():
    net = FlowEstimator(32)
    img = torch.rand(2, 3, 32, 32)
    flow = net(img)
    assert flow.shape == (2, 2, 32, 32)
    assert torch.all(flow == 0.0)


def test_flow_estimator_resolution_check():
    with pytest.raises(ValueError):
        FlowEstimator(30)
    with pytest.raises(ValueError):
        Generator(20)


def test_estimate_flow_wrapper(rng):
    net = FlowEstimator(32)
    img = Image(rng.random((32, 32, 3), dtype=np.float32))
    flow = estimate_flow(net, img)
    assert isinstance(flow, FlowField)
    assert flow.data.shape == (32, 32, 2)


def test_flow_estimator_trains_away_from_zero(rng):
    torch.manual_seed(0)
    net = FlowEstimator(32)
    img = torch.rand(1, 3, 32, 32)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    target = torch.full((1, 2, 32, 32), 1.5)
    for _ in range(5):
        loss = (net(img) - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert torch.any(net(img) != 0.0)


def test_wam_gate_and_shapes(rng):
    torch.manual_seed(1)
    wam = WarpAttention(8)
    f = torch.rand(2, 8, 16, 16)
    flow = torch.zeros(2, 2, 16, 16)
    out = wam(f, flow)
    assert out.shape == (2, 16, 16, 16)  # channel count doubles
    assert wam.last_gate.shape == (2, 16, 16, 16)
    assert torch.all(wam.last_gate > 0) and torch.all(wam.last_gate < 1)
    with pytest.raises(ValueError):
        wam(f, torch.zeros(2, 2, 8, 8))
    forced = wam(f, flow, gate_override=torch.ones(2, 16, 16, 16))
    # unit gate passes the warped/flipped pair through untouched
    assert torch.allclose(forced[:, :8], f, atol=1e-6)


def test_generator_output_range_and_shape(rng):
    torch.manual_seed(0)
    gen = Generator(32)
    img = torch.rand(2, 3, 32, 32)
    flow = torch.zeros(2, 2, 32, 32)
    out = gen(img, flow)
    assert out.shape == (2, 3, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(ValueError):
        gen(img, torch.zeros(2, 2, 16, 16))
    img_obj = Image(rng.random((32, 32, 3), dtype=np.float32))
    res = generate(gen, img_obj, FlowField(np.zeros((32, 32, 2), np.float32)))
    assert isinstance(res, Image)


def test_discriminator_two_scales(rng):
    d = Discriminator(32)
    maps = d(torch.rand(2, 3, 32, 32))
    assert len(maps) == 2
    assert maps[0].shape[0] == 2 and maps[0].shape[1] == 1
    # second critic sees the 2x downsampled image
    assert maps[1].shape[-1] == maps[0].shape[-1] // 2
    out = discriminate(d, Image(rng.random((32, 32, 3), dtype=np.float32)))
    assert len(out) == 2


def test_embedder_features_and_embed(rng):
    e = Embedder(7)
    img = torch.rand(3, 3, 32, 32)
    logits = e(img)
    assert logits.shape == (3, 7)
    pool, fc2 = e.features(img)
    assert pool.shape[0] == 3 and fc2.shape[0] == 3
    pool_vec, fc2_vec = embed(e, Image(rng.random((32, 32, 3), dtype=np.float32)))
    assert pool_vec.ndim == 1 and fc2_vec.ndim == 1
    assert np.linalg.norm(pool_vec) == pytest.approx(1.0, abs=1e-5)
    assert np.linalg.norm(fc2_vec) == pytest.approx(1.0, abs=1e-5)


def test_total_parameter_budget():
    nets = [
        FlowEstimator(64),
        FlowEstimator(64),
        Generator(64),
        Discriminator(64),
        Embedder(16),
    ]
    total = sum(param_count(n) for n in nets)
    assert total < 10_000_000


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    cfg = Config(resolution=32, total_steps=50)
    net = FlowEstimator(32)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    img = torch.rand(1, 3, 32, 32)
    (net(img).abs().mean() + sum(p.sum() for p in net.parameters()) * 0).backward()
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, 12, cfg, {"flow": net}, {"opt": opt})
    assert os.path.exists(path)
    assert not any(f.endswith(".tmp") for f in os.listdir(tmp_path))

    torch.manual_seed(99)
    net2 = FlowEstimator(32)
    opt2 = torch.optim.Adam(net2.parameters(), lr=1e-3)
    step, cfg2 = load_checkpoint(path, {"flow": net2}, {"opt": opt2})
    assert step == 12
    assert cfg2 == cfg
    for p, q in zip(net.parameters(), net2.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    cfg = Config(resolution=32)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, 0, cfg, {"emb": Embedder(5)}, {})
    other = Embedder(9)  # classifier head shape differs
    before = [p.clone() for p in other.parameters()]
    with pytest.raises((ValueError, RuntimeError)):
        load_checkpoint(path, {"emb": other}, {})
    # the target modules were not partially overwritten
    for p, q in zip(before, other.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_rejects_missing_module(tmp_path):
    cfg = Config(resolution=32)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, 0, cfg, {"flow": FlowEstimator(32)}, {})
    with pytest.raises((KeyError, ValueError)):
        load_checkpoint(path, {"other_name": FlowEstimator(32)}, {})


def test_checkpoint_version_guard(tmp_path):
    cfg = Config(resolution=32)
    net = FlowEstimator(32)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, 0, cfg, {"flow": net}, {})
    blob = torch.load(path, weights_only=False)
    blob["version"] = CHECKPOINT_VERSION + 1
    torch.save(blob, path)
    with pytest.raises(ValueError):
        load_checkpoint(path, {"flow": FlowEstimator(32)}, {})
