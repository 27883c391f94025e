"""Synthetic paired-face generator and real-data ingestion.

The generator reproduces the experimental condition this model targets:
profile/frontal supervision where the ground-truth frontal carries different
illumination than the profile. A profile is the frontal geometry pushed
through a horizontal squeeze toward the pose side, so the true forward and
reverse flows are closed-form and landmark correspondences are exact. The
squeeze coefficient is linear in y (shear) and the flow linear in x, which
makes both ground-truth fields exactly bilinear: sampling them at landmark
positions is interpolation-error free.

Profiles additionally get a pose-correlated multiplicative illumination
(global gain and/or a horizontal ramp) and a far-side feature dropout band
that stands in for self-occlusion.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .core import (FaceView, FlowField, Image, LandmarkSet, Mask, Sample,
                   validate_sample)

POSES = (-90, -75, -60, -45, -30, -15, 15, 30, 45, 60, 75, 90)

# squeeze model: x' = cx + (x - cx) * m(y),  m = M_BASE + (1-M_BASE)cos(th)
# + SHEAR*sin(th)*(y-cy)/(R/2). The floor keeps the 90-degree profile at 40%
# width instead of the degenerate pure-cosine collapse.
M_BASE = 0.45
SHEAR = 0.08
M_MIN = 0.30

# feature dropout band on the side turning away from the camera; reaches the
# outer half of the far eye so the attention path sees real missing content
DROP_MAX = 0.6       # at |pose| = 90, scaled by (|pose|/90)^2
DROP_START = 0.42    # normalized frontal x where the fade begins
DROP_WIDTH = 0.30

EDGE_PX_PER_64 = 3.0  # smoothstep edge width in pixels at resolution 64


def _edge_px(resolution):
    return max(0.9, EDGE_PX_PER_64 * resolution / 64.0)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def identity_geometry(identity_seed) -> dict:
    """Per-identity face geometry and palette, in fractions of the image side.
    Deterministic in the seed."""
    rng = np.random.default_rng(identity_seed)
    u = rng.uniform
    skin = np.array([0.52 + u(0, 0.20), 0.38 + u(0, 0.16), 0.30 + u(0, 0.12)])
    geom = {
        "skin": skin.tolist(),
        "rx": u(0.38, 0.43),
        "ry": u(0.44, 0.48),
        "shade": u(-1.0, 1.0) * 0.15,
        "eye_dx": u(0.14, 0.19),
        "eye_y": u(-0.12, -0.07),
        "eye_r": u(0.040, 0.058),
        "iris": [u(0.05, 0.22), u(0.05, 0.20), u(0.08, 0.30)],
        "brow_w": u(0.06, 0.09),
        "nose_y": u(-0.02, 0.05),
        "nose_len": u(0.09, 0.14),
        "nose_shade": u(0.78, 0.90),
        "mouth_y": u(0.18, 0.24),
        "mouth_w": u(0.09, 0.14),
        "mouth": [u(0.45, 0.65), u(0.18, 0.30), u(0.20, 0.32)],
        "mark_side": 1 if rng.integers(0, 2) else -1,
        "mark_x": u(0.18, 0.28),
        "mark_y": u(-0.02, 0.14),
        "mark_r": u(0.030, 0.048),
        "mark_tone": u(0.50, 0.70),
    }
    return geom


def illum_gains(pose_deg, illum_id):
    """(g_global, g_left, g_right) for a profile record. Neutral at pose 0;
    |gain - 1| grows linearly with |pose| so inconsistency is pose-correlated."""
    p = abs(pose_deg) / 90.0
    if illum_id == 0:
        return 1.0 - 0.40 * p, 1.0, 1.0
    if illum_id == 1:
        return 1.0, 1.0 + 0.35 * p, 1.0 - 0.80 * p
    if illum_id == 2:
        return 1.0, 1.0 - 0.80 * p, 1.0 + 0.35 * p
    raise ValueError(f"unknown illum_id {illum_id}")


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_seed: int
    pose_deg: float
    illum_id: int
    resolution: int
    geometry: dict = field(default_factory=dict)
    gains: tuple = (1.0, 1.0, 1.0)


def make_face_spec(identity_seed, pose_deg, illum_id, resolution) -> SyntheticFaceSpec:
    if abs(pose_deg) > 90:
        raise ValueError(f"|pose| must be <= 90, got {pose_deg}")
    return SyntheticFaceSpec(
        identity_seed=int(identity_seed), pose_deg=float(pose_deg),
        illum_id=int(illum_id), resolution=int(resolution),
        geometry=identity_geometry(identity_seed),
        gains=illum_gains(pose_deg, illum_id))


# ---------------------------------------------------------------------------
# geometry of the pose squeeze
# ---------------------------------------------------------------------------

def _squeeze_m(y, pose_deg, resolution):
    """Squeeze coefficient m(y); y may be an array of frontal/profile rows."""
    th = np.radians(pose_deg)
    cy = resolution / 2.0
    m = (M_BASE + (1.0 - M_BASE) * np.cos(th)
         + SHEAR * np.sin(th) * (y - cy) / (resolution / 2.0))
    # cap at 1: pure contraction keeps every in-bounds point in bounds after
    # the transform, so landmark/flow correspondences never need clipping
    return np.clip(m, M_MIN, 1.0)


def pose_transform(x, y, pose_deg, resolution):
    """Frontal (x, y) -> profile x' = cx + (x - cx) * m(y). Rows unchanged."""
    cx = resolution / 2.0
    return cx + (x - cx) * _squeeze_m(y, pose_deg, resolution)


def pose_transform_inv(u, y, pose_deg, resolution):
    """Profile (u, y) -> frontal x = cx + (u - cx) / m(y)."""
    cx = resolution / 2.0
    return cx + (u - cx) / _squeeze_m(y, pose_deg, resolution)


# ---------------------------------------------------------------------------
# appearance
# ---------------------------------------------------------------------------

def _ellipse_alpha(x, y, cx, cy, ax, ay, edge):
    q = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + 1e-12)
    return _smoothstep((1.0 - q) / (edge / min(ax, ay)))


def _feature_layers(geom, R):
    """(center_x, center_y, semi_x, semi_y, color) tuples in pixel units."""
    c = R / 2.0
    g = geom
    skin = np.array(g["skin"])
    layers = []
    for side in (-1, 1):
        layers.append((c + side * g["eye_dx"] * R, c + (g["eye_y"] - 0.075) * R,
                       g["brow_w"] * R, 0.022 * R, skin * 0.45))
    for side in (-1, 1):
        layers.append((c + side * g["eye_dx"] * R, c + g["eye_y"] * R,
                       g["eye_r"] * 1.5 * R, g["eye_r"] * R,
                       np.array(g["iris"])))
    layers.append((c, c + g["nose_y"] * R + g["nose_len"] * R / 2,
                   0.035 * R, g["nose_len"] * R / 2, skin * g["nose_shade"]))
    layers.append((c, c + g["mouth_y"] * R, g["mouth_w"] * R, 0.035 * R,
                   np.array(g["mouth"])))
    layers.append((c + g["mark_side"] * g["mark_x"] * R, c + g["mark_y"] * R,
                   g["mark_r"] * R, g["mark_r"] * 0.8 * R,
                   skin * g["mark_tone"]))
    return layers


def _render_appearance(spec, xf, yf, with_dropout):
    """Evaluate the frontal appearance at (possibly transformed) frontal
    coordinates. Returns (rgb HxWx3 float64, oval alpha HxW)."""
    g = spec.geometry
    R = spec.resolution
    c = R / 2.0
    edge = _edge_px(R)
    skin = np.array(g["skin"])
    rxp, ryp = g["rx"] * R, g["ry"] * R
    oval = _ellipse_alpha(xf, yf, c, c, rxp, ryp, edge)
    shade = 1.0 + g["shade"] * (yf - c) / R
    rgb = skin[None, None, :] * shade[..., None]

    if with_dropout and spec.pose_deg != 0:
        p = abs(spec.pose_deg) / 90.0
        xi = np.sign(spec.pose_deg) * (xf - c) / rxp
        drop = 1.0 - DROP_MAX * p * p * _smoothstep((xi - DROP_START) / DROP_WIDTH)
    else:
        drop = None

    for (fx, fy, ax, ay, color) in _feature_layers(g, R):
        alpha = _ellipse_alpha(xf, yf, fx, fy, ax, ay, edge) * oval
        if drop is not None:
            alpha = alpha * drop
        rgb = rgb * (1.0 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    rgb = rgb * oval[..., None]
    return np.clip(rgb, 0.0, 1.0), oval


def _landmarks(spec) -> np.ndarray:
    """40 frontal landmarks: named feature points, an 18-point inner oval
    ring, and 8 contour points slightly outside the oval."""
    g = spec.geometry
    R = spec.resolution
    c = R / 2.0
    rxp, ryp = g["rx"] * R, g["ry"] * R
    pts = [
        (c - g["eye_dx"] * R, c + g["eye_y"] * R),          # 0 eye_l
        (c + g["eye_dx"] * R, c + g["eye_y"] * R),          # 1 eye_r
        (c - g["eye_dx"] * R, c + (g["eye_y"] - 0.075) * R),  # 2 brow_l
        (c + g["eye_dx"] * R, c + (g["eye_y"] - 0.075) * R),  # 3 brow_r
        (c, c + g["nose_y"] * R),                           # 4 nose_top
        (c, c + (g["nose_y"] + g["nose_len"]) * R),         # 5 nose_tip
        (c - g["mouth_w"] * R, c + g["mouth_y"] * R),       # 6 mouth_l
        (c, c + g["mouth_y"] * R),                          # 7 mouth_c
        (c + g["mouth_w"] * R, c + g["mouth_y"] * R),       # 8 mouth_r
        (c + g["mark_side"] * g["mark_x"] * R, c + g["mark_y"] * R),  # 9 marking
        (c, c - 0.30 * R),                                  # 10 forehead
        (c, c + 0.38 * R),                                  # 11 chin
        (c - 0.28 * R, c + 0.05 * R),                       # 12 cheek_l
        (c + 0.28 * R, c + 0.05 * R),                       # 13 cheek_r
    ]
    for k in range(18):
        a = 2 * np.pi * k / 18
        pts.append((c + 0.85 * rxp * np.cos(a), c + 0.85 * ryp * np.sin(a)))
    for k in range(8):
        a = 2 * np.pi * k / 8 + np.pi / 16
        pts.append((c + 1.02 * rxp * np.cos(a), c + 1.02 * ryp * np.sin(a)))
    # contour points can graze the border at small resolutions; nudge inward
    return np.clip(np.array(pts, dtype=np.float64), 0.8, R - 1.8)


LANDMARK_GROUPS = {"eye_l": (0,), "eye_r": (1,), "nose": (4, 5),
                   "mouth": (6, 7, 8)}


def region_centers(landmarks: LandmarkSet):
    """(x, y) centroids of the eye/nose/mouth landmark groups, for the
    facial-region perceptual loss."""
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else landmarks
    return [tuple(np.mean(pts[list(idx)], axis=0)) for idx in LANDMARK_GROUPS.values()]


# ---------------------------------------------------------------------------
# sample rendering
# ---------------------------------------------------------------------------

def render_synthetic(spec: SyntheticFaceSpec) -> Sample:
    """Render a full paired Sample (profile view, frontal view, gt flows)."""
    if abs(spec.pose_deg) > 90:
        raise ValueError(f"|pose| must be <= 90, got {spec.pose_deg}")
    R = spec.resolution
    ys, xs = np.mgrid[0:R, 0:R].astype(np.float64)

    frgb, foval = _render_appearance(spec, xs, ys, with_dropout=False)
    frontal_img = Image(frgb)
    frontal_mask = Mask((foval >= 0.5).astype(np.uint8))
    f_pts = _landmarks(spec)

    # profile: appearance evaluated at the inverse-squeezed coordinates
    xf = pose_transform_inv(xs, ys, spec.pose_deg, R)
    prgb, poval = _render_appearance(spec, xf, ys, with_dropout=True)
    g0, gl, gr = spec.gains
    t = xs / (R - 1.0)
    gain = g0 * (gl + (gr - gl) * t)
    prgb = np.clip(prgb * gain[..., None], 0.0, 1.0)
    profile_img = Image(prgb)
    profile_mask = Mask((poval >= 0.5).astype(np.uint8))
    p_pts = np.stack([pose_transform(f_pts[:, 0], f_pts[:, 1], spec.pose_deg, R),
                      f_pts[:, 1]], axis=1)

    fwd_x = np.clip(pose_transform(xs, ys, spec.pose_deg, R), 0, R - 1) - xs
    rev_x = np.clip(xf, 0, R - 1) - xs
    zeros = np.zeros_like(fwd_x)
    gt_forward = FlowField(np.stack([fwd_x, zeros], axis=-1))
    gt_reverse = FlowField(np.stack([rev_x, zeros], axis=-1))

    return Sample(
        profile=FaceView(profile_img, profile_mask, LandmarkSet(p_pts)),
        frontal=FaceView(frontal_img, frontal_mask, LandmarkSet(f_pts)),
        identity_id=spec.identity_seed,
        pose_deg=spec.pose_deg,
        illum_id=spec.illum_id,
        gt_forward_flow=gt_forward,
        gt_reverse_flow=gt_reverse,
    )


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1
N_LANDMARKS = 40


@dataclass(frozen=True)
class RecordSpec:
    identity_id: int
    identity_seed: int
    pose_deg: float
    illum_id: int
    split: str            # "train" | "test"
    is_gallery: bool


@dataclass(frozen=True)
class DatasetManifest:
    resolution: int
    seed: int
    n_illum: int
    train_ids: tuple
    test_ids: tuple
    records: tuple        # of RecordSpec
    n_landmarks: int = N_LANDMARKS

    def indices(self, split=None, gallery=None, pose=None):
        out = []
        for i, r in enumerate(self.records):
            if split is not None and r.split != split:
                continue
            if gallery is not None and r.is_gallery != gallery:
                continue
            if pose is not None and r.pose_deg != pose:
                continue
            out.append(i)
        return out


def build_manifest(root, n_identities, poses=POSES, seed=0, resolution=64,
                   n_illum=3) -> DatasetManifest:
    """Deterministic manifest: 80/20 identity split (at least one test
    identity), one frontal gallery record per identity, and every
    (pose, illum) profile record."""
    if n_identities < 2:
        raise ValueError("need at least 2 identities for a train/test split")
    if root is not None and not os.path.isdir(root):
        raise IOError(f"dataset root {root!r} is not a readable directory")
    ids = list(range(n_identities))
    n_test = max(1, n_identities // 5)
    train_ids, test_ids = ids[:-n_test], ids[-n_test:]
    records = []
    for i in ids:
        split = "train" if i in set(train_ids) else "test"
        iseed = seed * 1_000_003 + i
        records.append(RecordSpec(i, iseed, 0.0, 0, split, True))
        for pose in poses:
            for illum in range(n_illum):
                records.append(RecordSpec(i, iseed, float(pose), illum, split, False))
    return DatasetManifest(resolution=int(resolution), seed=int(seed),
                           n_illum=int(n_illum), train_ids=tuple(train_ids),
                           test_ids=tuple(test_ids), records=tuple(records))


def save_manifest(manifest: DatasetManifest, path):
    payload = {
        "version": MANIFEST_VERSION,
        "resolution": manifest.resolution,
        "seed": manifest.seed,
        "n_illum": manifest.n_illum,
        "n_landmarks": manifest.n_landmarks,
        "train_ids": list(manifest.train_ids),
        "test_ids": list(manifest.test_ids),
        "records": [dataclasses.asdict(r) for r in manifest.records],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version")
    return DatasetManifest(
        resolution=payload["resolution"], seed=payload["seed"],
        n_illum=payload["n_illum"], n_landmarks=payload["n_landmarks"],
        train_ids=tuple(payload["train_ids"]), test_ids=tuple(payload["test_ids"]),
        records=tuple(RecordSpec(**r) for r in payload["records"]))


class SyntheticDataset:
    """Lazy, cached rendering of the manifest's records."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache = {}

    def __len__(self):
        return len(self.manifest.records)

    def sample(self, i) -> Sample:
        r = self.manifest.records[i]
        key = (r.identity_seed, r.pose_deg, r.illum_id)
        if key not in self._cache:
            spec = make_face_spec(r.identity_seed, r.pose_deg, r.illum_id,
                                  self.manifest.resolution)
            self._cache[key] = render_synthetic(spec)
        return self._cache[key]


def batch_indices(seed, step, pool, k):
    """Deterministic per-step batch: stateless RNG keyed by (seed, step)."""
    rng = np.random.default_rng((seed * 1_000_003 + step) % (2 ** 63))
    replace = len(pool) < k
    return [pool[j] for j in rng.choice(len(pool), size=k, replace=replace)]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_image_png(path, img: Image):
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> Image:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
    return Image(arr / 255.0)


def save_mask_png(path, mask: Mask):
    PILImage.fromarray(mask.data * 255, mode="L").save(path, format="PNG")


def load_mask_png(path) -> Mask:
    arr = np.asarray(PILImage.open(path).convert("L"))
    return Mask((arr > 127).astype(np.uint8))


def save_landmarks_txt(path, lmk: LandmarkSet):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in lmk.points:
            fh.write(f"{x:.6f} {y:.6f}\n")


def load_landmarks_txt(path) -> LandmarkSet:
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                x, y = line.split()
                pts.append((float(x), float(y)))
    return LandmarkSet(np.array(pts, dtype=np.float32))


def export_records(manifest: DatasetManifest, out_dir):
    """Write every record in the real-data layout:
    <out>/<identity>/<pose>_<illum>.png (+ .mask.png, .lmk.txt). The frontal
    record is pose 0. Returns the number of files written."""
    ds = SyntheticDataset(manifest)
    written = 0
    for i, r in enumerate(manifest.records):
        ident_dir = os.path.join(out_dir, str(r.identity_id))
        os.makedirs(ident_dir, exist_ok=True)
        s = ds.sample(i)
        view = s.frontal if r.pose_deg == 0 else s.profile
        stem = os.path.join(ident_dir, f"{int(r.pose_deg)}_{r.illum_id}")
        save_image_png(stem + ".png", view.image)
        save_mask_png(stem + ".mask.png", view.mask)
        save_landmarks_txt(stem + ".lmk.txt", view.landmarks)
        written += 3
    return written


class IngestionError(Exception):
    pass


_NAME_RE = re.compile(r"^(-?\d+)_(\d+)\.png$")


def _load_view(stem, resolution=None) -> FaceView:
    img_path = stem + ".png"
    mask_path = stem + ".mask.png"
    lmk_path = stem + ".lmk.txt"
    for p in (img_path, mask_path, lmk_path):
        if not os.path.exists(p):
            raise IngestionError(f"missing file: {p}")
    img = load_image_png(img_path)
    mask = load_mask_png(mask_path)
    lmk = load_landmarks_txt(lmk_path)
    if resolution is not None and img.resolution != (resolution, resolution):
        h, w = img.resolution
        pil = PILImage.fromarray((img.data * 255).astype(np.uint8))
        img = Image(np.asarray(pil.resize((resolution, resolution),
                                          PILImage.BILINEAR), dtype=np.float32) / 255.0)
        mpil = PILImage.fromarray(mask.data * 255)
        mask = Mask((np.asarray(mpil.resize((resolution, resolution),
                                            PILImage.NEAREST)) > 127).astype(np.uint8))
        lmk = LandmarkSet(lmk.points * np.array([resolution / w, resolution / h],
                                                dtype=np.float32))
    return FaceView(img, mask, lmk)


def load_real_pair(dir_path, pose=None, illum=None, resolution=None) -> Sample:
    """Load one profile/frontal pair from an identity directory laid out as
    <pose>_<illum>.png with sibling .mask.png and .lmk.txt files.

    The frontal is the pose-0 record (lowest illum id when several exist).
    When pose/illum are not given the directory must contain exactly one
    non-frontal record. Ground-truth flows are absent for real data.
    """
    if not os.path.isdir(dir_path):
        raise IngestionError(f"not a directory: {dir_path}")
    entries = []
    for name in sorted(os.listdir(dir_path)):
        m = _NAME_RE.match(name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2))))
    frontals = sorted(e for e in entries if e[0] == 0)
    if not frontals:
        raise IngestionError(f"no frontal (pose 0) record in {dir_path}")
    profiles = [e for e in entries if e[0] != 0]
    if pose is not None:
        profiles = [e for e in profiles if e[0] == int(pose)
                    and (illum is None or e[1] == int(illum))]
    if len(profiles) != 1:
        raise IngestionError(
            f"{dir_path}: need exactly one profile record, found "
            f"{len(profiles)}; pass pose/illum to disambiguate")
    ppose, pillum = profiles[0]
    frontal = _load_view(os.path.join(dir_path, f"0_{frontals[0][1]}"), resolution)
    profile = _load_view(os.path.join(dir_path, f"{ppose}_{pillum}"), resolution)
    if len(profile.landmarks) != len(frontal.landmarks):
        raise IngestionError(
            f"{dir_path}: landmark count mismatch "
            f"({len(profile.landmarks)} vs {len(frontal.landmarks)})")
    name = os.path.basename(os.path.normpath(dir_path))
    ident = int(name) if name.isdigit() else zlib.crc32(name.encode()) & 0x7FFFFFFF
    return Sample(profile=profile, frontal=frontal, identity_id=ident,
                  pose_deg=float(ppose), illum_id=pillum)
