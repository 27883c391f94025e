"""Training objectives: multi-scale pixel, perceptual (full image + facial
regions), adversarial, illumination-preserving, identity, and the three flow
pretraining losses, each as an independently testable function.

Masked losses premultiply images by the mask before any downsampling or
feature extraction, so pixels outside the mask cannot influence the value at
all, not merely approximately.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Config, FlowField, Image, Mask, flow_to_tensor, image_to_tensor
from .warp import warp_tensor


def _as_batch(x):
    """Image | (3,H,W) | (B,3,H,W) -> (B,3,H,W) float tensor."""
    if isinstance(x, Image):
        x = image_to_tensor(x)
    if x.dim() == 3:
        x = x[None]
    return x


def _as_mask_batch(m, like):
    """Mask | (H,W) | (1,H,W) | (B,1,H,W) -> (B,1,H,W) matching `like`'s dtype."""
    if isinstance(m, Mask):
        m = torch.from_numpy(m.data.astype(np.float32))
    if m.dim() == 2:
        m = m[None]
    if m.dim() == 3:
        m = m[None] if m.shape[0] == 1 else m[:, None]
    return m.to(like.dtype)


# ---------------------------------------------------------------------------
# pixel-space losses
# ---------------------------------------------------------------------------

def multiscale_masked_l1(a, b, mask, scales=3):
    """Sum over `scales` of the masked mean L1 distance, each scale built by
    2x average pooling of the premasked full-resolution images.

    Per scale the value is sum|a_s - b_s| / (3 * sum(mask_s)), so a constant
    per-channel difference of delta inside the mask contributes exactly delta
    per scale.
    """
    a = _as_batch(a)
    b = _as_batch(b)
    m = _as_mask_batch(mask, a)
    am, bm = a * m, b * m
    total = 0.0
    terms = []
    for s in range(scales):
        if s > 0:
            am = F.avg_pool2d(am, 2)
            bm = F.avg_pool2d(bm, 2)
            m = F.avg_pool2d(m, 2)
        denom = m.sum() * a.shape[1]
        term = (am - bm).abs().sum() / denom
        terms.append(float(term.detach()))
        total = total + term
    return total, terms


def pixel_loss(synth, target, mask, scales=3):
    """Multi-scale masked L1 between the adapted synthesis and ground truth."""
    total, _ = multiscale_masked_l1(synth, target, mask, scales)
    return total


def illum_preserve_loss(warped_back, profile, mask, scales=3):
    """Multi-scale masked L1 between the synthesis warped back to the profile
    view and the original profile; same scale setting as pixel_loss."""
    total, _ = multiscale_masked_l1(warped_back, profile, mask, scales)
    return total


# ---------------------------------------------------------------------------
# perceptual loss
# ---------------------------------------------------------------------------

class PerceptualBackbone(nn.Module):
    """Fixed feature pyramid standing in for an ImageNet-trained VGG: five
    tap points at strides 1, 2, 4, 8, 16. Weights are seeded at construction
    and never trained; load_taps ingests externally pretrained convs with the
    same shapes when available."""

    CHANNELS = (16, 24, 32, 40, 48)

    def __init__(self, seed=0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            cin = 3
            for i, cout in enumerate(self.CHANNELS):
                stride = 1 if i == 0 else 2
                setattr(self, f"conv{i}", nn.Conv2d(cin, cout, 3, stride=stride,
                                                    padding=1))
                cin = cout
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        taps = []
        for i in range(len(self.CHANNELS)):
            x = F.leaky_relu(getattr(self, f"conv{i}")(x), 0.2)
            taps.append(x)
        return taps

    def tap0(self, x):
        return F.leaky_relu(self.conv0(x), 0.2)

    def load_taps(self, state_dict):
        self.load_state_dict(state_dict)


def _tap_l1(backbone, a, b, weights):
    ta = backbone(a)
    tb = backbone(b)
    return sum(w * (fa - fb).abs().mean() for w, fa, fb in zip(weights, ta, tb))


def boxes_from_centers(centers, resolution, frac=0.25):
    """Axis-aligned square boxes of side frac*resolution around (x, y) centers,
    shifted to stay inside the image. Returns (y0, y1, x0, x1) tuples."""
    side = int(round(frac * resolution))
    boxes = []
    for cx, cy in centers:
        x0 = int(round(cx - side / 2))
        y0 = int(round(cy - side / 2))
        x0 = min(max(x0, 0), resolution - side) if side <= resolution else 0
        y0 = min(max(y0, 0), resolution - side) if side <= resolution else 0
        boxes.append((y0, y0 + side, x0, x0 + side))
    return boxes


def perceptual_loss(a, b, backbone, weights=(1.0, 0.5, 0.25, 0.25, 0.125),
                    regions=None, report=None):
    """Weighted multi-tap L1 on the full images, plus the same measure on each
    facial region crop; region terms are averaged and added to the full term.

    `regions` is a list of (y0, y1, x0, x1) boxes for unbatched inputs, or a
    per-sample list of such lists for batched inputs. Degenerate boxes are
    skipped (counted in `report` when a dict is passed).
    """
    a = _as_batch(a)
    b = _as_batch(b)
    loss = _tap_l1(backbone, a, b, weights)
    if regions is None:
        return loss
    if regions and not isinstance(regions[0], list):
        regions = [list(regions)] * a.shape[0]

    # group equal-size crops so each group runs the backbone once
    groups = {}
    skipped = 0
    for i, boxes in enumerate(regions):
        for (y0, y1, x0, x1) in boxes:
            if y1 <= y0 or x1 <= x0:
                skipped += 1
                continue
            groups.setdefault((y1 - y0, x1 - x0), []).append((i, y0, x0))
    if report is not None:
        report["skipped_regions"] = skipped
    n_regions = sum(len(v) for v in groups.values())
    if n_regions == 0:
        return loss
    region_sum = 0.0
    for (hh, ww), items in groups.items():
        ca = torch.stack([a[i, :, y0:y0 + hh, x0:x0 + ww] for i, y0, x0 in items])
        cb = torch.stack([b[i, :, y0:y0 + hh, x0:x0 + ww] for i, y0, x0 in items])
        # each crop contributes its own tap-L1; batching crops of one size
        # changes only the arithmetic grouping of the same means
        ta = backbone(ca)
        tb = backbone(cb)
        for w, fa, fb in zip(weights, ta, tb):
            region_sum = region_sum + w * (fa - fb).abs().mean(dim=(1, 2, 3)).sum()
    return loss + region_sum / n_regions


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------

def adversarial_d_loss(d, real, fake):
    """Non-saturating logistic critic loss, averaged per scale map then over
    scales. The fake branch is detached: this term trains only the critic."""
    real_maps = d(_as_batch(real))
    fake_maps = d(_as_batch(fake).detach())
    terms = [F.softplus(-r).mean() + F.softplus(f).mean()
             for r, f in zip(real_maps, fake_maps)]
    return sum(terms) / len(terms)


def adversarial_g_loss(d, fake):
    """Generator-side non-saturating loss, -E[log D(fake)]."""
    fake_maps = d(_as_batch(fake))
    terms = [F.softplus(-f).mean() for f in fake_maps]
    return sum(terms) / len(terms)


def adversarial_losses(d, real, fake):
    """(d_loss, g_loss) under the non-saturating logistic objective."""
    return adversarial_d_loss(d, real, fake), adversarial_g_loss(d, fake)


# ---------------------------------------------------------------------------
# identity loss
# ---------------------------------------------------------------------------

def _norm_features(e, img):
    pool, fc2 = e.features(_as_batch(img))
    return F.normalize(pool, dim=1), F.normalize(fc2, dim=1)


def identity_loss(e, synth, adapted, target):
    """L1 distance between L2-normalized embedder features (pooled + fc) of
    the synthesis and the ground truth, evaluated for both the raw synthesis
    and its illumination-adapted version, summed."""
    with torch.no_grad():
        pool_t, fc2_t = _norm_features(e, target)
    loss = 0.0
    for x in (synth, adapted):
        pool_x, fc2_x = _norm_features(e, x)
        loss = loss + ((fc2_x - fc2_t).abs().sum(dim=1)
                       + (pool_x - pool_t).abs().sum(dim=1)).mean()
    return loss


# ---------------------------------------------------------------------------
# flow pretraining losses
# ---------------------------------------------------------------------------

def _as_flow_tensor(flow):
    if isinstance(flow, FlowField):
        return flow_to_tensor(flow)
    return flow


def landmark_flow_loss(flow, src_pts, dst_pts):
    """Mean Euclidean error between the flow sampled at the destination
    landmarks and the displacement (src - dst) those landmarks prescribe.

    For the forward field the destination is the frontal view, so dst_pts are
    frontal landmarks and src_pts their profile counterparts.
    """
    ft = _as_flow_tensor(flow)
    if ft.dim() != 3:
        raise ValueError("expected a single (2,H,W) flow")
    h, w = ft.shape[-2:]
    src = np.asarray(src_pts.points if hasattr(src_pts, "points") else src_pts,
                     dtype=np.float64)
    dst = np.asarray(dst_pts.points if hasattr(dst_pts, "points") else dst_pts,
                     dtype=np.float64)
    for name, pts in (("src", src), ("dst", dst)):
        if (pts[:, 0].min() < 0 or pts[:, 0].max() > w - 1
                or pts[:, 1].min() < 0 or pts[:, 1].max() > h - 1):
            raise ValueError(f"{name} landmarks outside image bounds")
    x, y = dst[:, 0], dst[:, 1]
    x0 = np.minimum(np.floor(x), w - 2).astype(int).clip(min=0)
    y0 = np.minimum(np.floor(y), h - 2).astype(int).clip(min=0)
    fx = torch.from_numpy(x - x0).to(ft.dtype)
    fy = torch.from_numpy(y - y0).to(ft.dtype)
    v00 = ft[:, y0, x0]
    v01 = ft[:, y0, x0 + 1]
    v10 = ft[:, y0 + 1, x0]
    v11 = ft[:, y0 + 1, x0 + 1]
    sampled = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
               + v10 * (1 - fx) * fy + v11 * fx * fy)       # (2, N)
    target = torch.from_numpy((src - dst).T).to(ft.dtype)
    diff = sampled - target
    return torch.sqrt((diff * diff).sum(dim=0) + 1e-12).mean()


def sampling_correctness_loss(src, dst, flow, mask, backbone):
    """1 - masked mean cosine similarity between first-tap backbone features
    of the warped (premasked) source and the (premasked) destination."""
    src = _as_batch(src)
    dst = _as_batch(dst)
    ft = _as_flow_tensor(flow)
    if ft.dim() == 3:
        ft = ft[None]
    m = _as_mask_batch(mask, src)
    warped = warp_tensor(src * m, ft) * m
    fa = backbone.tap0(warped)
    fb = backbone.tap0(dst * m)
    num = (fa * fb).sum(dim=1)
    den = torch.clamp(fa.norm(dim=1) * fb.norm(dim=1), min=1e-12)
    cos = num / den
    msum = torch.clamp(m.sum(), min=1.0)
    return 1.0 - (cos * m[:, 0]).sum() / msum


def flow_regularization(flow):
    """Mean total variation of the displacement field: channel-summed absolute
    x- and y-differences, each averaged over its valid positions."""
    ft = _as_flow_tensor(flow)
    if ft.dim() == 3:
        ft = ft[None]
    dx = (ft[..., :, 1:] - ft[..., :, :-1]).abs().sum(dim=1)
    dy = (ft[..., 1:, :] - ft[..., :-1, :]).abs().sum(dim=1)
    return dx.mean() + dy.mean()


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    pixel: float
    perceptual: float
    adversarial: float
    illum_preserve: float
    identity: float
    total: float
    pixel_scales: tuple = ()
    illum_scales: tuple = ()

    def jsonl_record(self, step):
        return {"step": int(step), "pixel": self.pixel,
                "perceptual": self.perceptual, "adversarial": self.adversarial,
                "illum_preserve": self.illum_preserve, "identity": self.identity,
                "total": self.total}


def weighted_total(pixel, perceptual, adversarial, illum_preserve, identity,
                   cfg: Config):
    """The lambda-weighted sum; works on tensors (for backward) and floats."""
    l0, l1, l2, l3, l4 = cfg.lambdas
    return (l0 * pixel + l1 * perceptual + l2 * adversarial
            + l3 * illum_preserve + l4 * identity)


def total_loss(pixel, perceptual, adversarial, illum_preserve, identity,
               cfg: Config, pixel_scales=(), illum_scales=()) -> LossReport:
    """Assemble the weighted-sum LossReport from component values."""
    vals = [float(v) for v in (pixel, perceptual, adversarial,
                               illum_preserve, identity)]
    total = float(weighted_total(*vals, cfg))
    return LossReport(*vals, total, tuple(float(v) for v in pixel_scales),
                      tuple(float(v) for v in illum_scales))
