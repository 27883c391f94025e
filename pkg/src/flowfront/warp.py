"""Differentiable bilinear warping, flipping, and flow visualization.

The warp is the backward-sampling kind used everywhere in this package: the
output at pixel (x, y) reads the source at (x + dx, y + dy). Coordinates are
clamped to the image border; the separate in-bounds map records which output
pixels sampled strictly inside the source rectangle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .core import FlowField, Image, flow_to_tensor, image_to_tensor, tensor_to_image


@dataclass(frozen=True)
class WarpOutput:
    """Result of a warp: `data` matches the source shape, `in_bounds` is an
    H x W {0,1} map of output pixels whose sample point lay inside the source."""

    data: torch.Tensor
    in_bounds: torch.Tensor


def _sample_coords(flow):
    # flow (B,2,H,W) -> absolute sample coordinates (B,H,W) each
    b, _, h, w = flow.shape
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    return xs + flow[:, 0], ys + flow[:, 1]


def warp_tensor(src, flow):
    """Batched warp core. src (B,C,H,W), flow (B,2,H,W) -> (B,C,H,W).

    Pure floor/clamp/gather/lerp, differentiable w.r.t. both arguments.
    Zero flow reproduces src exactly: the corner weights are exact 0/1 there.
    """
    if src.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"flow size {tuple(flow.shape[-2:])} does not match "
                         f"source size {tuple(src.shape[-2:])}")
    b, c, h, w = src.shape
    flow = flow.to(src.dtype)
    cx, cy = _sample_coords(flow)
    cx = cx.clamp(0, w - 1)
    cy = cy.clamp(0, h - 1)
    x0 = cx.detach().floor().clamp(0, max(w - 2, 0))
    y0 = cy.detach().floor().clamp(0, max(h - 2, 0))
    fx = (cx - x0).unsqueeze(1)
    fy = (cy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def take(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00, v01 = take(y0, x0), take(y0, x1)
    v10, v11 = take(y1, x0), take(y1, x1)
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def in_bounds_map(flow):
    """(B,2,H,W) flow -> (B,1,H,W) {0,1} map of samples inside [0,W-1]x[0,H-1]."""
    _, _, h, w = flow.shape
    cx, cy = _sample_coords(flow)
    ok = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    return ok.unsqueeze(1).to(flow.dtype)


def bilinear_warp(src, flow) -> WarpOutput:
    """Warp an unbatched C x H x W tensor by a flow field.

    `src` may be a torch tensor or numpy array; `flow` a FlowField or a
    (2, H, W) tensor. Both data and the in-bounds map come back as tensors.
    """
    if isinstance(src, np.ndarray):
        src = torch.from_numpy(np.ascontiguousarray(src))
    if isinstance(flow, FlowField):
        flow = flow_to_tensor(flow)
    if src.dim() != 3 or flow.dim() != 3 or flow.shape[0] != 2:
        raise ValueError("expected src C x H x W and flow 2 x H x W")
    data = warp_tensor(src[None], flow[None].to(src.dtype))[0]
    bounds = in_bounds_map(flow[None].to(src.dtype))[0, 0]
    return WarpOutput(data=data, in_bounds=bounds)


def warp_image(img: Image, flow: FlowField) -> Image:
    """Convenience wrapper: warp a core Image by a FlowField."""
    return tensor_to_image(bilinear_warp(image_to_tensor(img), flow).data)


def hflip(t):
    """Reverse the x (last) axis of a tensor or array."""
    if isinstance(t, np.ndarray):
        return np.ascontiguousarray(t[..., ::-1])
    return torch.flip(t, dims=[-1])


def flip_flow(flow):
    """hflip a (B,2,H,W) displacement field, negating dx so the flipped field
    describes the mirrored motion."""
    out = torch.flip(flow, dims=[-1]).clone()
    out[:, 0] = -out[:, 0]
    return out


def resize_flow(flow, size):
    """Bilinearly resize a (B,2,H,W) flow to `size`=(h2,w2), scaling dx by
    w2/w and dy by h2/h so displacements stay in destination pixel units."""
    b, _, h, w = flow.shape
    h2, w2 = size
    out = torch.nn.functional.interpolate(flow, size=(h2, w2), mode="bilinear",
                                          align_corners=False)
    scale = torch.tensor([w2 / w, h2 / h], dtype=flow.dtype, device=flow.device)
    return out * scale.view(1, 2, 1, 1)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def warp_grad_check(src, flow, direction, step=1e-3):
    """Compare autograd gradients of the warp against central finite
    differences; returns the max absolute deviation over all elements.

    `direction` selects which argument to differentiate ("src" or "flow").
    Runs in float64: at step 1e-3 single precision FD noise would swamp the
    1e-4 tolerance this check is used with.
    """
    if direction not in ("src", "flow"):
        raise ValueError(f"direction must be 'src' or 'flow', got {direction!r}")
    if isinstance(src, np.ndarray):
        src = torch.from_numpy(np.ascontiguousarray(src))
    if isinstance(flow, FlowField):
        flow = flow_to_tensor(flow)
    src = src.detach().double()
    flow = flow.detach().double()

    gen = torch.Generator().manual_seed(0)
    proj = torch.rand(src.shape, generator=gen, dtype=torch.float64)

    def scalar(s, f):
        return (warp_tensor(s[None], f[None])[0] * proj).sum()

    target = src if direction == "src" else flow
    target.requires_grad_(True)
    analytic, = torch.autograd.grad(scalar(src, flow), target)
    target.requires_grad_(False)

    fd = torch.zeros_like(target)
    flat = target.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = scalar(src, flow).item()
        flat[i] = orig - step
        lo = scalar(src, flow).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2 * step)
    return (analytic - fd).abs().max().item()


# ---------------------------------------------------------------------------
# flow visualization and persistence
# ---------------------------------------------------------------------------

def flow_to_color(flow: FlowField, max_mag: float = None) -> Image:
    """Render a flow field as an HSV-coded image.

    Hue encodes displacement direction (atan2(dy, dx) over [0, 360)),
    saturation the magnitude relative to max_mag, value is fixed at 1, so a
    pixel that does not move renders pure white. max_mag defaults to 20% of
    the image width.
    """
    arr = flow.data if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = arr.shape[:2]
    if max_mag is None:
        max_mag = 0.2 * w
    if max_mag <= 0:
        raise ValueError("max_mag must be positive")
    dx = arr[..., 0].astype(np.float64)
    dy = arr[..., 1].astype(np.float64)
    mag = np.sqrt(dx * dx + dy * dy)
    hue = np.degrees(np.arctan2(dy, dx)) % 360.0
    sat = np.minimum(mag / max_mag, 1.0)
    val = np.ones_like(sat)

    # vectorized HSV -> RGB, hue in degrees
    c = val * sat
    hp = hue / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    m = val - c
    sector = np.floor(hp).astype(int) % 6
    r = np.choose(sector, [c, x, np.zeros_like(c), np.zeros_like(c), x, c])
    g = np.choose(sector, [x, c, c, x, np.zeros_like(c), np.zeros_like(c)])
    b = np.choose(sector, [np.zeros_like(c), np.zeros_like(c), x, c, c, x])
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return Image(rgb.astype(np.float32))


FLO_MAGIC = 202021.25  # float32 little-endian spells "PIEH"


def write_flow(path, flow: FlowField):
    """Persist a flow in the Middlebury .flo layout: magic, W, H, then
    row-major little-endian float32 (dx, dy) pairs."""
    arr = flow.data.astype("<f4")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(arr.tobytes())


def read_flow(path) -> FlowField:
    """Read a Middlebury .flo file written by write_flow."""
    with open(path, "rb") as fh:
        magic = struct.unpack("<f", fh.read(4))[0]
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise ValueError(f"{path}: bad flow file magic {magic}")
        w, h = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(w * h * 2 * 4), dtype="<f4")
    return FlowField(data.reshape(h, w, 2).copy())
