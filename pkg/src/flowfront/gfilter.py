"""Differentiable guided filter for the illumination adaption pathway.

Transfers the ground-truth image's illumination onto the synthesized image's
facial details: the filter input carries the illumination, the guide carries
the structure. Per-channel local linear model, box sums via integral images
with true (edge-truncated) window areas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Image


@dataclass(frozen=True)
class GuidedFilterParams:
    radius: int
    eps: float = 0.01

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def for_resolution(cls, resolution: int, eps: float = 0.01):
        """Default radius is a quarter of the image resolution."""
        return cls(radius=max(1, resolution // 4), eps=eps)


def _box_sum(t, r):
    """Sum of t over the (2r+1)^2 window around each pixel, truncated at the
    image border. t is (B,C,H,W); computed with padded integral images."""
    b, c, h, w = t.shape
    cs = t.cumsum(2).cumsum(3)
    cs = torch.nn.functional.pad(cs, (1, 0, 1, 0))
    ys = torch.arange(h, device=t.device)
    xs = torch.arange(w, device=t.device)
    y0 = (ys - r).clamp(min=0)
    y1 = (ys + r + 1).clamp(max=h)
    x0 = (xs - r).clamp(min=0)
    x1 = (xs + r + 1).clamp(max=w)
    top = cs.index_select(2, y0)
    bot = cs.index_select(2, y1)
    return (bot.index_select(3, x1) - bot.index_select(3, x0)
            - top.index_select(3, x1) + top.index_select(3, x0))


def _window_counts(h, w, r, dtype, device):
    ys = torch.arange(h, device=device)
    xs = torch.arange(w, device=device)
    ny = (ys + r + 1).clamp(max=h) - (ys - r).clamp(min=0)
    nx = (xs + r + 1).clamp(max=w) - (xs - r).clamp(min=0)
    return (ny.view(1, 1, h, 1) * nx.view(1, 1, 1, w)).to(dtype)


def guided_filter_tensor(p, g, radius, eps):
    """Batched differentiable core. p (input, illumination source) and g
    (guide, structure source) are (B,C,H,W) of equal shape.

    Within each truncated box window k: a_k = cov(g,p) / (var(g) + eps),
    b_k = mean(p) - a_k * mean(g). Output(i) = mean over windows containing i
    of a_k * g(i) + b_k; with truncated windows that set is again the
    truncated box around i.
    """
    if p.shape != g.shape:
        raise ValueError(f"input {tuple(p.shape)} and guide {tuple(g.shape)} differ")
    _, _, h, w = p.shape
    n = _window_counts(h, w, radius, p.dtype, p.device)
    mean_p = _box_sum(p, radius) / n
    mean_g = _box_sum(g, radius) / n
    cov_gp = _box_sum(g * p, radius) / n - mean_g * mean_p
    var_g = _box_sum(g * g, radius) / n - mean_g * mean_g
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    mean_a = _box_sum(a, radius) / n
    mean_b = _box_sum(b, radius) / n
    return mean_a * g + mean_b


def guided_filter(p: Image, g: Image, params: GuidedFilterParams) -> Image:
    """Filter `p` (the illumination source) guided by `g` (the structure
    source). Computed in float64 for stable statistics, returned clamped."""
    if p.resolution != g.resolution:
        raise ValueError(f"resolution mismatch: {p.resolution} vs {g.resolution}")
    pt = torch.from_numpy(p.data.transpose(2, 0, 1)).double()[None]
    gt = torch.from_numpy(g.data.transpose(2, 0, 1)).double()[None]
    out = guided_filter_tensor(pt, gt, params.radius, params.eps)[0]
    arr = out.clamp(0, 1).numpy().transpose(1, 2, 0).astype(np.float32)
    return Image(arr)


def gfilter_grad_check(p, g, params: GuidedFilterParams, step=1e-3):
    """Autograd vs central finite differences for the guided filter; returns
    the max absolute deviation over all elements of both inputs."""
    if isinstance(p, Image):
        p = p.data.transpose(2, 0, 1)
    if isinstance(g, Image):
        g = g.data.transpose(2, 0, 1)
    pt = torch.as_tensor(np.asarray(p, dtype=np.float64))
    gt = torch.as_tensor(np.asarray(g, dtype=np.float64))
    if pt.dim() == 2:
        pt, gt = pt[None], gt[None]
    pt = pt[None].clone()  # (1,C,H,W)
    gt = gt[None].clone()

    gen = torch.Generator().manual_seed(0)
    proj = torch.rand(pt.shape, generator=gen, dtype=torch.float64)

    def scalar(a, b):
        return (guided_filter_tensor(a, b, params.radius, params.eps) * proj).sum()

    worst = 0.0
    for which in (0, 1):
        target = (pt, gt)[which]
        target.requires_grad_(True)
        analytic, = torch.autograd.grad(scalar(pt, gt), target)
        target.requires_grad_(False)
        flat = target.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = scalar(pt, gt).item()
            flat[i] = orig - step
            lo = scalar(pt, gt).item()
            flat[i] = orig
            worst = max(worst, abs(analytic.reshape(-1)[i].item() - (hi - lo) / (2 * step)))
    return worst
