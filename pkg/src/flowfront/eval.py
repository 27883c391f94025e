"""Evaluation: rank-1 identification, verification ACC/AUC, illumination
preservation metrics, and qualitative dumps."""

import dataclasses
import json
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .core import image_to_tensor, mask_to_tensor, tensor_to_flow
from .data import SyntheticDataset
from .warp import flow_to_color, warp_tensor


class ProtocolError(RuntimeError):
    """Evaluation protocol violated (e.g. a test identity has no gallery)."""


@dataclasses.dataclass
class RecognitionResult:
    per_pose: dict            # abs pose (deg) -> rank-1 rate in percent
    average: float            # unweighted mean over pose bins, percent
    gallery_size: int
    probe_counts: dict        # abs pose -> number of probes

    def as_dict(self):
        return {
            "per_pose": {f"{p:g}": v for p, v in sorted(self.per_pose.items())},
            "average": self.average,
            "gallery_size": self.gallery_size,
            "probe_counts": {f"{p:g}": n for p, n in sorted(self.probe_counts.items())},
        }


@dataclasses.dataclass
class IllumReport:
    warp_l1: dict             # abs pose -> mean masked L1 of warped-back synthesis vs profile
    synth_l1: dict            # abs pose -> mean masked L1 of synthesis vs frontal target

    def as_dict(self):
        return {
            "warp_l1": {f"{p:g}": v for p, v in sorted(self.warp_l1.items())},
            "synth_l1": {f"{p:g}": v for p, v in sorted(self.synth_l1.items())},
        }


def _eval_modules(model):
    for net in (model.flow_fwd, model.flow_rev, model.gen):
        net.eval()


def frontalize(model, prof):
    """Run the synthesis half of the model on a batched profile tensor."""
    with torch.no_grad():
        flow = model.flow_fwd(prof)
        return model.gen(prof, flow)


def pool_embedding(embedder, imgs):
    """L2-normalized pooled embedding for a batched image tensor."""
    embedder.eval()
    with torch.no_grad():
        pool, _ = embedder.features(imgs)
    return F.normalize(pool, dim=1)


def _masked_l1(a, b, mask):
    diff = ((a - b).abs() * mask).sum()
    denom = mask.sum() * a.shape[1]
    return float(diff / denom.clamp(min=1.0))


def rank1_recognition(model, manifest, embedder):
    """Rank-1 identification over the test split.

    Every non-gallery test record is a probe: frontalized through `model`
    when one is given, used raw otherwise, embedded, and matched against the
    single frontal gallery embedding per identity by cosine similarity.
    """
    dataset = SyntheticDataset(manifest)
    if model is not None:
        _eval_modules(model)

    gallery_ids = []
    gallery_vecs = []
    for ident in manifest.test_ids:
        idxs = [
            i
            for i, r in enumerate(manifest.records)
            if r.identity_id == ident and r.is_gallery
        ]
        if not idxs:
            raise ProtocolError(f"test identity {ident} has no gallery record")
        s = dataset.sample(idxs[0])
        img = image_to_tensor(s.frontal.image) * mask_to_tensor(s.frontal.mask)
        gallery_ids.append(ident)
        gallery_vecs.append(pool_embedding(embedder, img.unsqueeze(0))[0])
    gallery = torch.stack(gallery_vecs)

    hits = {}
    counts = {}
    for i in manifest.indices(split="test", gallery=False):
        rec = manifest.records[i]
        s = dataset.sample(i)
        if model is not None:
            prof = image_to_tensor(s.profile.image).unsqueeze(0)
            img = frontalize(model, prof) * mask_to_tensor(s.frontal.mask)
        else:
            img = (
                image_to_tensor(s.profile.image) * mask_to_tensor(s.profile.mask)
            ).unsqueeze(0)
        vec = pool_embedding(embedder, img)[0]
        sims = gallery @ vec
        pred = gallery_ids[int(torch.argmax(sims))]
        pose = abs(rec.pose_deg)
        counts[pose] = counts.get(pose, 0) + 1
        hits[pose] = hits.get(pose, 0) + (1 if pred == rec.identity_id else 0)

    per_pose = {p: 100.0 * hits[p] / counts[p] for p in counts}
    average = float(np.mean(list(per_pose.values()))) if per_pose else 0.0
    return RecognitionResult(
        per_pose=per_pose,
        average=average,
        gallery_size=len(gallery_ids),
        probe_counts=counts,
    )


def _fold_slices(n, k=10):
    k = min(k, n)
    bounds = [i * n // k for i in range(k + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(k)]


def _best_threshold(scores, labels):
    # candidate cuts: midpoints between adjacent sorted scores plus sentinels
    order = np.sort(np.unique(scores))
    if len(order) == 1:
        cands = np.array([order[0] - 1.0, order[0] + 1.0])
    else:
        mids = (order[:-1] + order[1:]) / 2.0
        cands = np.concatenate([[order[0] - 1.0], mids, [order[-1] + 1.0]])
    best_t, best_acc = cands[0], -1.0
    for t in cands:
        acc = float(np.mean((scores > t) == labels))
        if acc > best_acc:
            best_t, best_acc = t, acc
    return best_t


def verification_metrics(scores, labels):
    """10-fold threshold accuracy (percent) and trapezoidal ROC AUC (fraction)
    from similarity scores and boolean same-identity labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-d arrays")
    n = len(scores)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    if labels.all() or not labels.any():
        raise ValueError("need both same and different pairs")

    fold_accs = []
    for lo, hi in _fold_slices(n):
        test = np.zeros(n, dtype=bool)
        test[lo:hi] = True
        if test.all() or not test.any():
            continue
        t = _best_threshold(scores[~test], labels[~test])
        fold_accs.append(float(np.mean((scores[test] > t) == labels[test])))
    acc = 100.0 * float(np.mean(fold_accs))

    # ROC by descending-score sweep
    order = np.argsort(-scores, kind="stable")
    lab = labels[order]
    tp = np.concatenate([[0], np.cumsum(lab)])
    fp = np.concatenate([[0], np.cumsum(~lab)])
    tpr = tp / lab.sum()
    fpr = fp / (~lab).sum()
    auc = float(np.trapezoid(tpr, fpr))
    return acc, auc


def verification(model, pair_list, embedder):
    """Verification over (sample_a, sample_b, same) triples.

    Each side is frontalized when a model is given (raw profile otherwise),
    embedded, and scored by cosine similarity; returns (ACC percent, AUC).
    """
    if len(pair_list) < 2:
        raise ValueError("need at least 2 pairs")
    if model is not None:
        _eval_modules(model)

    def side(sample):
        prof = image_to_tensor(sample.profile.image).unsqueeze(0)
        if model is not None:
            img = frontalize(model, prof) * mask_to_tensor(sample.frontal.mask)
        else:
            img = prof * mask_to_tensor(sample.profile.mask)
        return pool_embedding(embedder, img)[0]

    scores, labels = [], []
    for a, b, same in pair_list:
        scores.append(float(side(a) @ side(b)))
        labels.append(bool(same))
    return verification_metrics(np.array(scores), np.array(labels))


def make_verification_pairs(manifest, n_pairs, seed=0):
    """Deterministic same/different pair sampling from the test split."""
    dataset = SyntheticDataset(manifest)
    idxs = manifest.indices(split="test", gallery=False)
    if not idxs:
        raise ValueError("no test probes to pair")
    rng = np.random.default_rng(seed)
    by_id = {}
    for i in idxs:
        by_id.setdefault(manifest.records[i].identity_id, []).append(i)
    ids = sorted(by_id)
    pairs = []
    for k in range(n_pairs):
        same = k % 2 == 0
        if same:
            ident = ids[rng.integers(len(ids))]
            a, b = rng.choice(by_id[ident], size=2, replace=len(by_id[ident]) < 2)
        else:
            ia, ib = rng.choice(len(ids), size=2, replace=False) if len(ids) > 1 else (0, 0)
            a = rng.choice(by_id[ids[ia]])
            b = rng.choice(by_id[ids[ib]])
        pairs.append((dataset.sample(int(a)), dataset.sample(int(b)), same))
    return pairs


def illumination_metrics(model, manifest):
    """Masked L1 of the warp-back against the profile and of the synthesis
    against the frontal target, averaged per absolute pose over the test split."""
    dataset = SyntheticDataset(manifest)
    _eval_modules(model)
    warp_sums, synth_sums, counts = {}, {}, {}
    with torch.no_grad():
        for i in manifest.indices(split="test", gallery=False):
            rec = manifest.records[i]
            s = dataset.sample(i)
            prof = image_to_tensor(s.profile.image).unsqueeze(0)
            front = image_to_tensor(s.frontal.image).unsqueeze(0)
            m_prof = mask_to_tensor(s.profile.mask).unsqueeze(0)
            m_front = mask_to_tensor(s.frontal.mask).unsqueeze(0)
            flow_fwd = model.flow_fwd(prof)
            flow_rev = model.flow_rev(prof)
            synth = model.gen(prof, flow_fwd)
            warped = warp_tensor(synth, flow_rev)
            pose = abs(rec.pose_deg)
            warp_sums[pose] = warp_sums.get(pose, 0.0) + _masked_l1(warped, prof, m_prof)
            synth_sums[pose] = synth_sums.get(pose, 0.0) + _masked_l1(synth, front, m_front)
            counts[pose] = counts.get(pose, 0) + 1
    warp_l1 = {p: warp_sums[p] / counts[p] for p in counts}
    synth_l1 = {p: synth_sums[p] / counts[p] for p in counts}
    return IllumReport(warp_l1=warp_l1, synth_l1=synth_l1)


def _to_png(arr01, path):
    arr = (np.clip(arr01, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    PILImage.fromarray(arr).save(path)
    return path


def dump_qualitative(model, samples, out_dir):
    """Per sample: a profile/synthesis/target triptych, a two-panel flow
    rendering of both predicted fields, and a grayscale grid of the
    channel-averaged attention gates. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    _eval_modules(model)
    files = []
    for k, s in enumerate(samples):
        prof = image_to_tensor(s.profile.image).unsqueeze(0)
        with torch.no_grad():
            flow_fwd = model.flow_fwd(prof)
            flow_rev = model.flow_rev(prof)
            synth = model.gen(prof, flow_fwd)

        trip = np.concatenate(
            [
                s.profile.image.data,
                synth[0].permute(1, 2, 0).numpy(),
                s.frontal.image.data,
            ],
            axis=1,
        )
        files.append(_to_png(trip, os.path.join(out_dir, f"sample_{k:03d}_triptych.png")))

        fwd_rgb = flow_to_color(tensor_to_flow(flow_fwd[0])).data
        rev_rgb = flow_to_color(tensor_to_flow(flow_rev[0])).data
        flows = np.concatenate([fwd_rgb, rev_rgb], axis=1)
        files.append(_to_png(flows, os.path.join(out_dir, f"sample_{k:03d}_flows.png")))

        res = s.profile.image.data.shape[0]
        tiles = []
        for wam in (model.gen.wam1, model.gen.wam2, model.gen.wam3):
            gate = wam.last_gate[0].mean(dim=0, keepdim=True)  # (1, h, w) in (0,1)
            up = F.interpolate(gate.unsqueeze(0), size=(res, res), mode="nearest")[0, 0]
            tiles.append(up.numpy())
        grid = np.concatenate(tiles, axis=1)
        files.append(
            _to_png(
                np.repeat(grid[:, :, None], 3, axis=2),
                os.path.join(out_dir, f"sample_{k:03d}_attention.png"),
            )
        )
    return files


def recognition_table(results):
    """Plain-text table: one row per labeled result, pose columns plus Avg."""
    poses = sorted({p for r in results.values() for p in r.per_pose})
    header = "Method".ljust(18) + "".join(f"{'±%g°' % p:>9}" for p in poses) + f"{'Avg':>9}"
    lines = [header]
    for name, r in results.items():
        row = name.ljust(18)
        for p in poses:
            row += f"{r.per_pose.get(p, float('nan')):>9.2f}"
        row += f"{r.average:>9.2f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_report(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate_all(model, manifest, embedder, n_pairs=100):
    """Full evaluation bundle used by the command-line entry point."""
    frontal = rank1_recognition(model, manifest, embedder)
    raw = rank1_recognition(None, manifest, embedder)
    pairs = make_verification_pairs(manifest, n_pairs=n_pairs, seed=manifest.seed)
    acc, auc = verification(model, pairs, embedder)
    illum = illumination_metrics(model, manifest)
    payload = {
        "rank1_frontalized": frontal.as_dict(),
        "rank1_raw_profile": raw.as_dict(),
        "verification_acc": acc,
        "verification_auc": auc,
        "illumination": illum.as_dict(),
    }
    table = recognition_table({"frontalized": frontal, "raw profile": raw})
    return payload, table
