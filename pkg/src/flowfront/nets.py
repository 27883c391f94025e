"""The four trainable networks: forward/reverse flow estimators, the U-Net
generator with warp-attention skip connections, the two-scale patch
discriminator, and the identity embedder.

All are deliberately small: the whole system stays under 10M parameters and
trains on one CPU core at desk scale. Every net is resolution-parameterized;
the encoder stacks assume the resolution is a multiple of 16.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (Config, FlowField, Image, flow_to_tensor, image_to_tensor,
                   tensor_to_flow, tensor_to_image)
from .warp import hflip, resize_flow, warp_tensor


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


def param_count(module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# flow estimation
# ---------------------------------------------------------------------------

class FlowEstimator(nn.Module):
    """Single-image flow net: RGB in, dense displacement field out.

    4-level encoder, coarse-to-fine decoder that predicts a flow at 1/16
    resolution and refines a residual at each upsampling step. All flow
    prediction convs start at zero so the untrained net emits zero flow.
    """

    def __init__(self, resolution, base=16):
        super().__init__()
        if resolution % 16:
            raise ValueError(f"resolution must be a multiple of 16, got {resolution}")
        self.resolution = resolution
        chans = [base, base * 2, base * 3, base * 4]
        self.enc0 = _conv_block(3, chans[0], 2)
        self.enc1 = _conv_block(chans[0], chans[1], 2)
        self.enc2 = _conv_block(chans[1], chans[2], 2)
        self.enc3 = _conv_block(chans[2], chans[3], 2)
        self.head = _conv_block(3, 8, 1)
        self.predict = nn.Conv2d(chans[3], 2, 3, padding=1)
        self.refine2 = self._refiner(chans[2])
        self.refine1 = self._refiner(chans[1])
        self.refine0 = self._refiner(chans[0])
        self.refine_full = self._refiner(8)
        for m in (self.predict, self.refine2[-1], self.refine1[-1],
                  self.refine0[-1], self.refine_full[-1]):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    @staticmethod
    def _refiner(cin):
        return nn.Sequential(
            nn.Conv2d(cin + 2, 32, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 2, 3, padding=1),
        )

    def forward(self, img):
        if img.shape[-1] != self.resolution or img.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}px input, got "
                             f"{tuple(img.shape[-2:])}")
        e0 = self.enc0(img)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        flow = self.predict(e3)
        for feat, refine in ((e2, self.refine2), (e1, self.refine1),
                             (e0, self.refine0)):
            flow = resize_flow(flow, feat.shape[-2:])
            flow = flow + refine(torch.cat([feat, flow], dim=1))
        flow = resize_flow(flow, img.shape[-2:])
        flow = flow + self.refine_full(torch.cat([self.head(img), flow], dim=1))
        return flow


def estimate_flow(net: FlowEstimator, img: Image) -> FlowField:
    """Run a flow estimator on a single core Image."""
    h, w = img.resolution
    if h != net.resolution or w != net.resolution:
        raise ValueError(f"image {h}x{w} does not match net resolution "
                         f"{net.resolution}")
    with torch.no_grad():
        flow = net(image_to_tensor(img)[None])[0]
    return tensor_to_flow(flow)


# ---------------------------------------------------------------------------
# warp attention
# ---------------------------------------------------------------------------

class _ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)), inplace=True)
        y = self.bn2(self.conv2(y))
        return x + y


class WarpAttention(nn.Module):
    """Skip-connection gate: warp the encoder feature by the (resized) forward
    flow, concatenate with its horizontal flip, and gate the pair with a
    learned attention map of the same shape.

    The attention net is conv -> batch-norm -> ReLU -> residual block, with a
    sigmoid so the gate lies in (0, 1). Channel count doubles.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(2 * channels)
        self.res = _ResidualBlock(2 * channels)

    def forward(self, f, flow, gate_override=None):
        if f.shape[-2:] != flow.shape[-2:]:
            raise ValueError(f"feature {tuple(f.shape[-2:])} vs flow "
                             f"{tuple(flow.shape[-2:])} spatial mismatch")
        f_w = warp_tensor(f, flow)
        pair = torch.cat([f_w, hflip(f_w)], dim=1)
        gate = torch.sigmoid(self.res(F.relu(self.bn(self.conv(pair)), inplace=True)))
        if gate_override is not None:
            gate = gate_override
        # kept for attention-map dumps; tiny at toy scale
        self.last_gate = gate.detach()
        return gate * pair


def wam_forward(wam: WarpAttention, f, flow, gate_override=None):
    """Functional form of WarpAttention.forward; flow must already be resized
    (with displacement rescaling) to f's spatial size."""
    return wam(f, flow, gate_override=gate_override)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class Generator(nn.Module):
    """U-Net synthesizer. The three deepest skip connections pass through a
    WarpAttention gate driven by the forward flow (resized to each level); the
    shallowest skip passes features unmodified. Sigmoid output keeps the
    synthesized image inside [0, 1]."""

    def __init__(self, resolution, base=16):
        super().__init__()
        if resolution % 16:
            raise ValueError(f"resolution must be a multiple of 16, got {resolution}")
        self.resolution = resolution
        c = [base, base * 2, base * 3, base * 4, base * 5]
        self.enc0 = _conv_block(3, c[0], 1)
        self.enc1 = _conv_block(c[0], c[1], 2)
        self.enc2 = _conv_block(c[1], c[2], 2)
        self.enc3 = _conv_block(c[2], c[3], 2)
        self.bottleneck = _conv_block(c[3], c[4], 2)
        self.wam1 = WarpAttention(c[1])
        self.wam2 = WarpAttention(c[2])
        self.wam3 = WarpAttention(c[3])
        self.dec3 = _conv_block(c[4] + 2 * c[3], c[3], 1)
        self.dec2 = _conv_block(c[3] + 2 * c[2], c[2], 1)
        self.dec1 = _conv_block(c[2] + 2 * c[1], c[1], 1)
        self.dec0 = _conv_block(c[1] + c[0], c[0], 1)
        self.out = nn.Conv2d(c[0], 3, 3, padding=1)

    def forward(self, img, flow):
        if img.shape[-2:] != flow.shape[-2:]:
            raise ValueError("image and flow spatial sizes differ")
        e0 = self.enc0(img)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        x = self.bottleneck(e3)
        for feat, wam, dec in ((e3, self.wam3, self.dec3),
                               (e2, self.wam2, self.dec2),
                               (e1, self.wam1, self.dec1)):
            x = F.interpolate(x, size=feat.shape[-2:], mode="nearest")
            skip = wam(feat, resize_flow(flow, feat.shape[-2:]))
            x = dec(torch.cat([x, skip], dim=1))
        x = F.interpolate(x, size=e0.shape[-2:], mode="nearest")
        x = self.dec0(torch.cat([x, e0], dim=1))
        return torch.sigmoid(self.out(x))


def generate(gen: Generator, img: Image, flow: FlowField) -> Image:
    """Synthesize a frontal view from one profile Image and its forward flow."""
    with torch.no_grad():
        out = gen(image_to_tensor(img)[None], flow_to_tensor(flow)[None])[0]
    return tensor_to_image(out)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class _PatchCritic(nn.Module):
    def __init__(self, base=16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, base * 3, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 3, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Two patch critics: one on the full image, one on a 2x downsampled copy.
    Each returns a spatial logit map."""

    def __init__(self, resolution, base=16):
        super().__init__()
        self.resolution = resolution
        # crit_ prefix: bare .half would shadow nn.Module.half()
        self.crit_full = _PatchCritic(base)
        self.crit_half = _PatchCritic(base)

    def forward(self, img):
        return [self.crit_full(img), self.crit_half(F.avg_pool2d(img, 2))]


def discriminate(d: Discriminator, img: Image):
    """Score one Image; returns the two logit maps."""
    with torch.no_grad():
        return d(image_to_tensor(img)[None])


# ---------------------------------------------------------------------------
# identity embedder
# ---------------------------------------------------------------------------

class Embedder(nn.Module):
    """Small convolutional identity classifier. Exposes the pooled feature
    (psi_pool) and the following fully connected feature (psi_fc2); both have
    a fixed dimension independent of the identity count."""

    def __init__(self, n_classes, dim=64, base=16):
        super().__init__()
        self.dim = dim
        self.trunk = nn.Sequential(
            _conv_block(3, base, 2),
            _conv_block(base, base * 2, 2),
            _conv_block(base * 2, base * 3, 2),
            _conv_block(base * 3, dim, 2),
        )
        self.fc = nn.Linear(dim, dim)
        self.classifier = nn.Linear(dim, n_classes)

    def features(self, img):
        """Raw (psi_pool, psi_fc2) feature pair, shape (B, dim) each."""
        pool = self.trunk(img).mean(dim=(2, 3))
        fc2 = self.fc(F.leaky_relu(pool, 0.2))
        return pool, fc2

    def forward(self, img):
        _, fc2 = self.features(img)
        return self.classifier(F.leaky_relu(fc2, 0.2))


def embed(e: Embedder, img: Image):
    """L2-normalized (psi_pool, psi_fc2) for one Image, as numpy vectors."""
    with torch.no_grad():
        pool, fc2 = e.features(image_to_tensor(img)[None])
    pool = F.normalize(pool, dim=1)[0].numpy()
    fc2 = F.normalize(fc2, dim=1)[0].numpy()
    return pool, fc2


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, step, cfg: Config, modules: dict, optimizers: dict = None):
    """Write a versioned checkpoint: named module state dicts, optimizer
    states, the Config snapshot, and the step counter. Atomic via tmp+rename."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "config": dataclasses.asdict(cfg),
        "modules": {k: m.state_dict() for k, m in modules.items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
    }
    tmp = str(path) + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, modules: dict, optimizers: dict = None):
    """Restore module/optimizer state from a checkpoint written by
    save_checkpoint. Validates the version tag and the full shape manifest
    before touching any module. Returns (step, Config)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload.get('version')} "
                         f"!= {CHECKPOINT_VERSION}")
    for name, module in modules.items():
        if name not in payload["modules"]:
            raise ValueError(f"{path}: missing module state {name!r}")
        saved = payload["modules"][name]
        current = module.state_dict()
        if set(saved) != set(current):
            raise ValueError(f"{path}: parameter names for {name!r} do not match")
        for key, tensor in saved.items():
            if tuple(tensor.shape) != tuple(current[key].shape):
                raise ValueError(f"{path}: shape mismatch {name}.{key}: "
                                 f"{tuple(tensor.shape)} vs {tuple(current[key].shape)}")
    for name, module in modules.items():
        module.load_state_dict(payload["modules"][name])
    if optimizers:
        for name, opt in optimizers.items():
            if name in payload["optimizers"]:
                opt.load_state_dict(payload["optimizers"][name])
    cfg = Config(**{k: tuple(v) if isinstance(v, list) else v
                    for k, v in payload["config"].items()})
    return payload["step"], cfg
