import os

import numpy as np
import pytest
import torch

from flowfront.core import FlowField, Image, tensor_to_flow
from flowfront.warp import (
    FLO_MAGIC,
    bilinear_warp,
    flip_flow,
    flow_to_color,
    hflip,
    in_bounds_map,
    read_flow,
    resize_flow,
    warp_grad_check,
    warp_image,
    warp_tensor,
    write_flow,
)


def oracle_warp(src, flow):
    """Independent nested-loop reference: border-clamped bilinear backward
    sampling, out[c, y, x] = src at (x + dx, y + dy)."""
    c, h, w = src.shape
    out = np.zeros_like(src)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0.0), w - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), h - 1.0)
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = sx - x0
            fy = sy - y0
            for ch in range(c):
                out[ch, y, x] = (
                    src[ch, y0, x0] * (1 - fx) * (1 - fy)
                    + src[ch, y0, x1] * fx * (1 - fy)
                    + src[ch, y1, x0] * (1 - fx) * fy
                    + src[ch, y1, x1] * fx * fy
                )
    return out


def test_matches_oracle_on_random_instances(rng):
    worst = 0.0
    for _ in range(50):
        h, w = rng.integers(2, 17, size=2)
        src = rng.random((3, h, w), dtype=np.float32)
        flow = (rng.random((2, h, w), dtype=np.float32) - 0.5) * 2 * max(h, w)
        got = warp_tensor(torch.from_numpy(src)[None], torch.from_numpy(flow)[None])[0]
        want = oracle_warp(src.astype(np.float64), flow.astype(np.float64))
        worst = max(worst, float(np.abs(got.numpy() - want).max()))
    assert worst <= 1e-6


def test_identity_flow_is_exact(rng):
    src = rng.random((3, 9, 7), dtype=np.float32)
    out = warp_tensor(torch.from_numpy(src)[None], torch.zeros(1, 2, 9, 7))[0]
    assert np.array_equal(out.numpy(), src)


def test_integer_shift():
    src = torch.arange(12, dtype=torch.float32).reshape(1, 1, 3, 4)
    flow = torch.zeros(1, 2, 3, 4)
    flow[:, 0] = 1.0  # read one pixel to the right
    out = warp_tensor(src, flow)
    assert torch.equal(out[0, 0, :, :3], src[0, 0, :, 1:])
    # border column clamps to the last source column
    assert torch.equal(out[0, 0, :, 3], src[0, 0, :, 3])


def test_in_bounds_map():
    flow = torch.zeros(1, 2, 4, 4)
    flow[0, 0, :, 3] = 2.0  # x = 3 reads x = 5, outside
    flow[0, 1, 0, :] = -1.0  # y = 0 reads y = -1, outside
    ib = in_bounds_map(flow)
    assert ib.shape == (1, 1, 4, 4)
    assert ib[0, 0, 0, 0] == 0.0
    assert ib[0, 0, 1, 3] == 0.0
    assert ib[0, 0, 2, 1] == 1.0


def test_bilinear_warp_wrappers(rng):
    arr = rng.random((8, 8, 3), dtype=np.float32)
    img = Image(arr)
    flow = FlowField(np.zeros((8, 8, 2), np.float32))
    out = bilinear_warp(torch.from_numpy(arr.transpose(2, 0, 1)), flow)
    assert np.array_equal(out.data.numpy(), arr.transpose(2, 0, 1))
    img2 = warp_image(img, flow)
    assert np.array_equal(img2.data, arr)


def test_warp_grad_check_small(rng):
    # fractional offsets well away from the bilinear kinks at integers
    h = w = 6
    src = torch.from_numpy(rng.random((3, h, w)))
    base = rng.integers(-2, 2, size=(2, h, w)).astype(np.float64)
    flow = torch.from_numpy(base + 0.25 + 0.5 * rng.random((2, h, w)))
    assert warp_grad_check(src, flow, direction="src") < 1e-4
    assert warp_grad_check(src, flow, direction="flow") < 1e-4


def test_warp_grad_check_rejects_bad_direction(rng):
    src = torch.zeros(1, 4, 4)
    flow = torch.zeros(2, 4, 4)
    with pytest.raises(ValueError):
        warp_grad_check(src, flow, direction="both")


def test_hflip_and_flip_flow():
    t = torch.arange(8, dtype=torch.float32).reshape(1, 1, 2, 4)
    f = hflip(t)
    assert torch.equal(f[0, 0, 0], torch.tensor([3.0, 2.0, 1.0, 0.0]))
    a = np.arange(8, dtype=np.float32).reshape(2, 4)
    assert np.array_equal(hflip(a), a[:, ::-1])

    flow = torch.zeros(1, 2, 2, 4)
    flow[0, 0] = 2.0
    flow[0, 1] = 3.0
    ff = flip_flow(flow)
    assert torch.all(ff[0, 0] == -2.0)  # dx negated
    assert torch.all(ff[0, 1] == 3.0)


def test_resize_flow_scales_displacements():
    flow = torch.zeros(1, 2, 4, 4)
    flow[:, 0] = 2.0
    flow[:, 1] = 1.0
    up = resize_flow(flow, (8, 8))
    assert up.shape == (1, 2, 8, 8)
    assert torch.allclose(up[:, 0], torch.full((1, 8, 8), 4.0))
    assert torch.allclose(up[:, 1], torch.full((1, 8, 8), 2.0))


def test_flo_roundtrip(tmp_path, rng):
    flow = FlowField((rng.random((5, 7, 2)) - 0.5).astype(np.float32) * 3)
    path = tmp_path / "f.flo"
    write_flow(str(path), flow)
    back = read_flow(str(path))
    assert np.array_equal(back.data, flow.data)


def test_flo_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    with open(path, "wb") as fh:
        fh.write(np.float32(1.0).tobytes())
        fh.write(np.int32(2).tobytes() * 2)
        fh.write(np.zeros(8, np.float32).tobytes())
    with pytest.raises(ValueError):
        read_flow(str(path))
    assert FLO_MAGIC == pytest.approx(202021.25)


def test_zero_flow_renders_white():
    img = flow_to_color(FlowField(np.zeros((6, 6, 2), np.float32)))
    arr = (img.data * 255.0).round().astype(np.uint8)
    assert (arr == 255).all()


def test_hue_follows_angle():
    import colorsys

    h = w = 8
    max_mag = 0.2 * w
    for angle in (0.0, 90.0, 180.0, 270.0):
        dx = max_mag * np.cos(np.radians(angle))
        dy = max_mag * np.sin(np.radians(angle))
        flow = FlowField(np.tile(np.array([dx, dy], np.float32), (h, w, 1)))
        got = (flow_to_color(flow).data[0, 0] * 255.0).round()
        want = np.array(colorsys.hsv_to_rgb(angle / 360.0, 1.0, 1.0)) * 255.0
        assert np.abs(got - want.round()).max() <= 1.0


def test_saturation_scales_with_magnitude():
    h = w = 8
    flow = FlowField(np.tile(np.array([0.2 * w / 2, 0.0], np.float32), (h, w, 1)))
    got = (flow_to_color(flow).data[0, 0] * 255.0).round()
    assert got[0] == 255  # red channel saturated for 0-degree hue
    assert 100 < got[1] < 155  # half-magnitude -> half saturation


def test_tensor_flow_roundtrip(rng):
    arr = (rng.random((4, 4, 2)).astype(np.float32) - 0.5) * 2
    f = FlowField(arr)
    t = torch.from_numpy(f.data.transpose(2, 0, 1))
    assert np.array_equal(tensor_to_flow(t).data, f.data)
