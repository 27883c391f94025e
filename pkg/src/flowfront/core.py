"""Domain types, shape contracts, and configuration shared by every module.

All images are H x W x 3 float arrays with values in [0, 1]. Flow fields are
H x W x 2 float arrays of pixel displacements (dx, dy) using the backward
sampling convention: the warped output at pixel (x, y) reads the source at
(x + dx, y + dy). Masks are H x W binary arrays marking the face region.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch


# ---------------------------------------------------------------------------
# value objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image:
    """H x W x 3 float image, values in [0, 1]. H and W must be multiples of 4
    so the multi-scale losses can downsample by 2 and 4."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", arr)

    @property
    def resolution(self):
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class Mask:
    """H x W binary {0, 1} face mask, same spatial size as its image."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.uint8)
        object.__setattr__(self, "data", arr)

    @property
    def resolution(self):
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class FlowField:
    """H x W x 2 pixel displacement field; channel 0 = dx, channel 1 = dy.

    Displacements are clamped at creation to |dx| <= W and |dy| <= H, which
    keeps every sample coordinate representable without affecting any flow a
    network can usefully predict.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32).copy()
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"flow must be H x W x 2, got {arr.shape}")
        h, w = arr.shape[0], arr.shape[1]
        arr[..., 0] = np.clip(arr[..., 0], -w, w)
        arr[..., 1] = np.clip(arr[..., 1], -h, h)
        object.__setattr__(self, "data", arr)

    @property
    def resolution(self):
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class LandmarkSet:
    """N x 2 (x, y) pixel coordinates, index-aligned with the paired view."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class FaceView:
    """One view (profile or frontal) of a sample: image + mask + landmarks."""

    image: Image
    mask: Mask
    landmarks: LandmarkSet


@dataclass(frozen=True)
class Sample:
    """A paired profile/frontal training record.

    Ground-truth flows are present only for synthetic data, where the pose
    transform is closed-form. ``gt_forward_flow`` warps the profile to the
    frontal view, ``gt_reverse_flow`` the frontal to the profile view.
    """

    profile: FaceView
    frontal: FaceView
    identity_id: int
    pose_deg: float
    illum_id: int
    gt_forward_flow: Optional[FlowField] = None
    gt_reverse_flow: Optional[FlowField] = None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    """Training configuration. The loss weights, learning rates, batch size,
    scale count, and perceptual layer weights default to the recommended
    operating point; everything else is a desk-scale artifact knob."""

    # loss weights: (pixel, perceptual, adversarial, illum_preserve, identity)
    lambdas: tuple = (5.0, 1.0, 0.1, 15.0, 1.0)
    lr_main: float = 0.0004
    lr_flow: float = 0.00005
    batch_size: int = 8
    scales: int = 3
    vgg_layer_weights: tuple = (1.0, 0.5, 0.25, 0.25, 0.125)
    # guided-filter schedule; -1 means "10% of total_steps"
    gfilter_warmup_steps: int = -1
    gfilter_eps: float = 0.01
    seed: int = 0

    # desk-scale knobs
    resolution: int = 64
    total_steps: int = 2000
    pretrain_epochs: int = 4
    pretrain_lr: float = 0.002
    pretrain_batch: int = 1
    embed_steps: int = 600
    embed_lr: float = 0.002
    n_illum: int = 3
    checkpoint_every: int = 500
    sample_every: int = 500

    def resolved_warmup(self) -> int:
        """Warm-up step count, resolving the -1 sentinel to 10% of the run."""
        if self.gfilter_warmup_steps >= 0:
            return self.gfilter_warmup_steps
        return self.total_steps // 10

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


def _coerce(raw: str, pytype):
    raw = raw.strip()
    if pytype is tuple:
        return tuple(float(v) for v in raw.split(","))
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    return raw


def parse_config(path) -> Config:
    """Read a flat ``key = value`` config file. ``#`` starts a comment.
    Unknown keys are an error; missing keys keep their defaults."""
    fields = {f.name: f for f in dataclasses.fields(Config)}
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            default = getattr(Config(), key)
            values[key] = _coerce(raw, type(default))
    return Config(**values)


def write_config(cfg: Config, path) -> None:
    """Write ``cfg`` in the same flat key = value format ``parse_config`` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(Config):
            val = getattr(cfg, f.name)
            if isinstance(val, tuple):
                val = ",".join(repr(v) for v in val)
            fh.write(f"{f.name} = {val}\n")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

FLOW_LANDMARK_TOL = 0.5  # px; gt flows must map paired landmarks this closely


def _check_view(name: str, view: FaceView, out: list):
    img = view.image.data
    if img.ndim != 3 or img.shape[2] != 3:
        out.append(f"{name} image not H x W x 3")
        return
    h, w = img.shape[:2]
    if not np.all(np.isfinite(img)):
        out.append(f"{name} image has non-finite values")
    elif img.min() < 0.0 or img.max() > 1.0:
        out.append(f"{name} image values outside [0, 1]")
    if h % 4 != 0 or w % 4 != 0:
        out.append(f"{name} image size {h}x{w} not a multiple of 4")
    m = view.mask.data
    if m.shape != (h, w):
        out.append(f"{name} mask size mismatch")
    else:
        if not np.isin(m, (0, 1)).all():
            out.append(f"{name} mask not binary")
        if m.sum() == 0:
            out.append(f"{name} mask empty")
    pts = view.landmarks.points
    if pts.ndim != 2 or pts.shape[1] != 2:
        out.append(f"{name} landmarks not N x 2")
    else:
        if (pts[:, 0].min() < 0 or pts[:, 0].max() > w - 1
                or pts[:, 1].min() < 0 or pts[:, 1].max() > h - 1):
            out.append(f"{name} landmarks outside image bounds")


def _sample_flow_at(flow: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinearly sample an H x W x 2 flow at float (x, y) points."""
    h, w = flow.shape[:2]
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, int)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = flow[y0, x0]
    v01 = flow[y0, x1]
    v10 = flow[y1, x0]
    v11 = flow[y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def _check_flow(name: str, flow: FlowField, src_pts: np.ndarray,
                dst_pts: np.ndarray, shape, out: list):
    arr = flow.data
    if arr.shape[:2] != shape:
        out.append(f"{name} flow size mismatch")
        return
    if not np.all(np.isfinite(arr)):
        out.append(f"{name} flow has non-finite values")
        return
    if len(src_pts) != len(dst_pts):
        return  # landmark count mismatch reported separately
    sampled = _sample_flow_at(arr, dst_pts)
    err = np.linalg.norm(sampled - (src_pts - dst_pts), axis=1)
    if err.max() > FLOW_LANDMARK_TOL:
        out.append(f"{name} flow/landmark mismatch ({err.max():.2f} px)")


def validate_sample(s: Sample) -> list:
    """Check every type invariant of a Sample; returns a list of violation
    strings (empty when the sample is well formed). Never raises."""
    out: list = []
    _check_view("profile", s.profile, out)
    _check_view("frontal", s.frontal, out)
    np_, nf = len(s.profile.landmarks), len(s.frontal.landmarks)
    if np_ != nf:
        out.append(f"landmark count mismatch ({np_} vs {nf})")
    h, w = s.frontal.image.data.shape[:2]
    if s.gt_forward_flow is not None:
        # forward flow lives on the frontal grid and points into the profile
        _check_flow("forward", s.gt_forward_flow, s.profile.landmarks.points,
                    s.frontal.landmarks.points, (h, w), out)
    if s.gt_reverse_flow is not None:
        hp, wp = s.profile.image.data.shape[:2]
        _check_flow("reverse", s.gt_reverse_flow, s.frontal.landmarks.points,
                    s.profile.landmarks.points, (hp, wp), out)
    return out


def downsample(img: Image, factor: int) -> Image:
    """Average-pool an image by a power-of-two factor that divides H and W."""
    data = img.data
    h, w = data.shape[:2]
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError(f"factor must be a power of two, got {factor}")
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return Image(data.copy())
    blocks = data.reshape(h // factor, factor, w // factor, factor, 3)
    return Image(blocks.mean(axis=(1, 3)))


def erode_mask(mask: Mask, iterations: int = 1) -> Mask:
    """Binary erosion with the 3 x 3 structuring element (used to trim
    interpolation slack off mask borders in round-trip checks)."""
    m = mask.data.astype(bool)
    for _ in range(iterations):
        inner = np.ones_like(m)
        inner[:-1] &= m[1:]
        inner[1:] &= m[:-1]
        inner[:, :-1] &= m[:, 1:]
        inner[:, 1:] &= m[:, :-1]
        inner[:-1, :-1] &= m[1:, 1:]
        inner[1:, 1:] &= m[:-1, :-1]
        inner[:-1, 1:] &= m[1:, :-1]
        inner[1:, :-1] &= m[:-1, 1:]
        m = inner & m
    return Mask(m.astype(np.uint8))


# ---------------------------------------------------------------------------
# torch bridging
# ---------------------------------------------------------------------------

def image_to_tensor(img: Image) -> torch.Tensor:
    """Image -> float32 tensor of shape (3, H, W)."""
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1)))


def tensor_to_image(t: torch.Tensor) -> Image:
    """(3, H, W) tensor -> Image, clamped into the valid range."""
    arr = t.detach().cpu().float().clamp(0, 1).numpy().transpose(1, 2, 0)
    return Image(arr)


def flow_to_tensor(flow: FlowField) -> torch.Tensor:
    """FlowField -> float32 tensor of shape (2, H, W), channel 0 = dx."""
    return torch.from_numpy(np.ascontiguousarray(flow.data.transpose(2, 0, 1)))


def tensor_to_flow(t: torch.Tensor) -> FlowField:
    """(2, H, W) tensor -> FlowField (creation clamp applies)."""
    return FlowField(t.detach().cpu().float().numpy().transpose(1, 2, 0))


def mask_to_tensor(mask: Mask) -> torch.Tensor:
    """Mask -> float32 tensor of shape (1, H, W)."""
    return torch.from_numpy(mask.data.astype(np.float32))[None]
