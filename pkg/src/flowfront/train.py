"""Training loops: embedder warmup, flow pretraining, and adversarial frontalization."""

import dataclasses
import json
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .core import Config, image_to_tensor, mask_to_tensor
from .data import SyntheticDataset, batch_indices, region_centers
from .gfilter import guided_filter_tensor
from .losses import (
    LossReport,
    PerceptualBackbone,
    adversarial_d_loss,
    adversarial_g_loss,
    boxes_from_centers,
    identity_loss,
    landmark_flow_loss,
    multiscale_masked_l1,
    perceptual_loss,
    sampling_correctness_loss,
    flow_regularization,
    weighted_total,
)
from .nets import (
    Discriminator,
    Embedder,
    FlowEstimator,
    Generator,
    load_checkpoint,
    save_checkpoint,
)
from .warp import warp_tensor

# flow pretraining loss weights (landmark term implicitly 1.0)
PRETRAIN_W_CORRECTNESS = 1.0
PRETRAIN_W_SMOOTHNESS = 0.05

ADAM_BETAS = (0.5, 0.999)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN/inf; carries the step and per-term values."""

    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclasses.dataclass
class TrainState:
    cfg: Config
    step: int
    flow_fwd: FlowEstimator
    flow_rev: FlowEstimator
    gen: Generator
    disc: Discriminator
    embedder: Embedder
    backbone: PerceptualBackbone
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam

    def modules(self):
        return {
            "flow_fwd": self.flow_fwd,
            "flow_rev": self.flow_rev,
            "gen": self.gen,
            "disc": self.disc,
            "embedder": self.embedder,
            "backbone": self.backbone,
        }

    def optimizers(self):
        return {"g_opt": self.g_opt, "d_opt": self.d_opt}


def build_state(cfg, n_classes):
    """Seeded construction of every network and optimizer.

    Generator weights ride on lr_main while both flow estimators share the
    much smaller lr_flow; the discriminator gets its own optimizer.
    """
    torch.manual_seed(cfg.seed)
    flow_fwd = FlowEstimator(cfg.resolution)
    flow_rev = FlowEstimator(cfg.resolution)
    gen = Generator(cfg.resolution)
    disc = Discriminator(cfg.resolution)
    embedder = Embedder(n_classes)
    backbone = PerceptualBackbone(seed=cfg.seed)
    g_opt = torch.optim.Adam(
        [
            {"params": list(gen.parameters()), "lr": cfg.lr_main},
            {
                "params": list(flow_fwd.parameters()) + list(flow_rev.parameters()),
                "lr": cfg.lr_flow,
            },
        ],
        lr=cfg.lr_main,
        betas=ADAM_BETAS,
    )
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr_main, betas=ADAM_BETAS)
    return TrainState(
        cfg=cfg,
        step=0,
        flow_fwd=flow_fwd,
        flow_rev=flow_rev,
        gen=gen,
        disc=disc,
        embedder=embedder,
        backbone=backbone,
        g_opt=g_opt,
        d_opt=d_opt,
    )


def _stack_images(samples, which):
    if which == "profile":
        return torch.stack([image_to_tensor(s.profile.image) for s in samples])
    return torch.stack([image_to_tensor(s.frontal.image) for s in samples])


def _stack_masks(samples, which):
    if which == "profile":
        return torch.stack([mask_to_tensor(s.profile.mask) for s in samples])
    return torch.stack([mask_to_tensor(s.frontal.mask) for s in samples])


def pretrain_embedder(state, dataset):
    """Identity classification on near-frontal train views; frozen afterwards.

    Only train-split records within 30 degrees are used so the embedder never
    sees the extreme poses it is later asked to score.
    """
    cfg = state.cfg
    manifest = dataset.manifest
    pool = [
        i
        for i, r in enumerate(manifest.records)
        if r.split == "train" and abs(r.pose_deg) <= 30.0
    ]
    if not pool:
        raise ValueError("no near-frontal train records for embedder pretraining")
    id_index = {ident: k for k, ident in enumerate(manifest.train_ids)}
    opt = torch.optim.Adam(state.embedder.parameters(), lr=cfg.embed_lr)
    state.embedder.train()
    for it in range(cfg.embed_steps):
        batch = batch_indices(cfg.seed + 91, it, pool, cfg.batch_size)
        samples = [dataset.sample(i) for i in batch]
        imgs = _stack_images(samples, "profile") * _stack_masks(samples, "profile")
        labels = torch.tensor(
            [id_index[manifest.records[i].identity_id] for i in batch]
        )
        logits = state.embedder(imgs)
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    state.embedder.eval()
    for p in state.embedder.parameters():
        p.requires_grad_(False)


def _flow_pretrain_loss(net, sample, backbone, reverse):
    """Shared loss for one direction of flow pretraining.

    Both estimators take the profile view as input; the reverse estimator is
    supervised to carry frontal pixels back onto the profile.
    """
    img = image_to_tensor(sample.profile.image).unsqueeze(0)
    flow = net(img)[0]
    if reverse:
        src_pts, dst_pts = sample.frontal.landmarks.points, sample.profile.landmarks.points
        src_img = image_to_tensor(sample.frontal.image).unsqueeze(0)
        dst_img = img
        mask = mask_to_tensor(sample.profile.mask).unsqueeze(0)
    else:
        src_pts, dst_pts = sample.profile.landmarks.points, sample.frontal.landmarks.points
        src_img = img
        dst_img = image_to_tensor(sample.frontal.image).unsqueeze(0)
        mask = mask_to_tensor(sample.frontal.mask).unsqueeze(0)
    lmk = landmark_flow_loss(flow, src_pts, dst_pts)
    corr = sampling_correctness_loss(src_img, dst_img, flow.unsqueeze(0), mask, backbone)
    smooth = flow_regularization(flow.unsqueeze(0))
    return lmk + PRETRAIN_W_CORRECTNESS * corr + PRETRAIN_W_SMOOTHNESS * smooth


def pretrain_flows(state, dataset, epochs=None):
    """Supervised warmup of both flow estimators over the train split."""
    cfg = state.cfg
    if epochs is None:
        epochs = cfg.pretrain_epochs
    manifest = dataset.manifest
    pool = [
        i
        for i, r in enumerate(manifest.records)
        if r.split == "train" and not r.is_gallery
    ]
    params = list(state.flow_fwd.parameters()) + list(state.flow_rev.parameters())
    opt = torch.optim.Adam(params, lr=cfg.pretrain_lr)
    state.flow_fwd.train()
    state.flow_rev.train()
    bs = max(1, cfg.pretrain_batch)
    for epoch in range(epochs):
        order = np.random.default_rng(cfg.seed * 77 + epoch).permutation(len(pool))
        for lo in range(0, len(order), bs):
            chunk = [pool[j] for j in order[lo : lo + bs]]
            loss = 0.0
            for idx in chunk:
                sample = dataset.sample(idx)
                loss = loss + _flow_pretrain_loss(
                    state.flow_fwd, sample, state.backbone, reverse=False
                )
                loss = loss + _flow_pretrain_loss(
                    state.flow_rev, sample, state.backbone, reverse=True
                )
            opt.zero_grad()
            (loss / len(chunk)).backward()
            opt.step()


def _region_boxes(samples, resolution):
    boxes = []
    for s in samples:
        centers = region_centers(s.frontal.landmarks)
        boxes.append(boxes_from_centers(centers, resolution))
    return boxes


def forward_pass(state, prof, front, step=None):
    """Generator-side dataflow shared by training, evaluation, and tests.

    Returns (flow_fwd, flow_rev, synth, warped_back, adapted). Guided-filter
    adaptation of the synthesized frontal only engages once the warmup window
    has elapsed; before that `adapted` IS `synth` (the bypass is exact, not a
    blend).
    """
    cfg = state.cfg
    if step is None:
        step = state.step
    flow_fwd = state.flow_fwd(prof)
    flow_rev = state.flow_rev(prof)
    synth = state.gen(prof, flow_fwd)
    warped_back = warp_tensor(synth, flow_rev)
    if step >= cfg.resolved_warmup():
        radius = max(1, cfg.resolution // 4)
        adapted = guided_filter_tensor(front, synth, radius, cfg.gfilter_eps)
    else:
        adapted = synth
    return flow_fwd, flow_rev, synth, warped_back, adapted


def train_step(state, dataset, batch):
    """One adversarial step: discriminator first, then generator and flows."""
    cfg = state.cfg
    for net in (state.flow_fwd, state.flow_rev, state.gen, state.disc):
        net.train()
    samples = [dataset.sample(i) for i in batch]
    prof = _stack_images(samples, "profile")
    front = _stack_images(samples, "frontal")
    m_prof = _stack_masks(samples, "profile")
    m_front = _stack_masks(samples, "frontal")

    _, _, synth, warped_back, adapted = forward_pass(state, prof, front)

    fake_in = adapted * m_front
    real_in = front * m_front

    d_loss = adversarial_d_loss(state.disc, real_in, fake_in)
    state.d_opt.zero_grad()
    d_loss.backward()
    state.d_opt.step()

    pix, pix_scales = multiscale_masked_l1(adapted, front, m_front, cfg.scales)
    boxes = _region_boxes(samples, cfg.resolution)
    perc = perceptual_loss(
        fake_in, real_in, state.backbone, cfg.vgg_layer_weights, regions=boxes
    )
    adv = adversarial_g_loss(state.disc, fake_in)
    ilp, ilp_scales = multiscale_masked_l1(warped_back, prof, m_prof, cfg.scales)
    ident = identity_loss(state.embedder, synth * m_front, fake_in, real_in)
    total = weighted_total(pix, perc, adv, ilp, ident, cfg)

    state.g_opt.zero_grad()
    total.backward()
    state.g_opt.step()

    report = LossReport(
        pixel=float(pix.detach()),
        perceptual=float(perc.detach()),
        adversarial=float(adv.detach()),
        illum_preserve=float(ilp.detach()),
        identity=float(ident.detach()),
        total=float(total.detach()),
        pixel_scales=tuple(pix_scales),
        illum_scales=tuple(ilp_scales),
    )
    terms = {
        "pixel": report.pixel,
        "perceptual": report.perceptual,
        "adversarial": report.adversarial,
        "illum_preserve": report.illum_preserve,
        "identity": report.identity,
        "total": report.total,
        "d_loss": float(d_loss.detach()),
    }
    if not all(np.isfinite(v) for v in terms.values()):
        raise TrainingDiverged(state.step, terms)
    state.step += 1
    return report


def _sample_grid(state, dataset, indices):
    """Row per held-out sample: profile, synthesis, warp-back, adapted, target."""
    rows = []
    with torch.no_grad():
        for idx in indices:
            s = dataset.sample(idx)
            prof = image_to_tensor(s.profile.image).unsqueeze(0)
            front = image_to_tensor(s.frontal.image).unsqueeze(0)
            _, _, synth, warped, adapted = forward_pass(state, prof, front)
            cols = [prof, synth, warped, adapted, front]
            row = torch.cat([c[0] for c in cols], dim=2)
            rows.append(row)
    grid = torch.cat(rows, dim=1).clamp(0.0, 1.0)
    arr = (grid.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return arr


def _append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def train_full(cfg, manifest, out_dir, resume=None):
    """Full run: pretrains, then cfg.total_steps adversarial steps with
    periodic checkpoints, loss logging, and sample grids. Returns the final
    checkpoint path. `resume` restores a checkpoint and skips pretraining."""
    torch.set_num_threads(1)
    dataset = SyntheticDataset(manifest)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    log_dir = os.path.join(out_dir, "logs")
    sample_dir = os.path.join(out_dir, "samples")
    for d in (ckpt_dir, log_dir, sample_dir):
        os.makedirs(d, exist_ok=True)
    log_path = os.path.join(log_dir, "losses.jsonl")

    state = build_state(cfg, n_classes=len(manifest.train_ids))
    if resume is not None:
        step, cfg_loaded = load_checkpoint(
            resume, state.modules(), state.optimizers()
        )
        state.step = step
        state.cfg = cfg_loaded
        cfg = cfg_loaded
        for p in state.embedder.parameters():
            p.requires_grad_(False)
        state.embedder.eval()
    else:
        pretrain_embedder(state, dataset)
        pretrain_flows(state, dataset)
        first = os.path.join(ckpt_dir, "step_%08d.ckpt" % 0)
        save_checkpoint(first, 0, cfg, state.modules(), state.optimizers())

    pool = [
        i
        for i, r in enumerate(manifest.records)
        if r.split == "train" and not r.is_gallery
    ]
    probe = manifest.indices(split="test", gallery=False)[:4]

    last = None
    while state.step < cfg.total_steps:
        step = state.step
        batch = batch_indices(cfg.seed, step, pool, cfg.batch_size)
        report = train_step(state, dataset, batch)
        _append_jsonl(log_path, report.jsonl_record(step))
        done = state.step
        if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
            last = os.path.join(ckpt_dir, "step_%08d.ckpt" % done)
            save_checkpoint(last, done, cfg, state.modules(), state.optimizers())
        if probe and (done % cfg.sample_every == 0 or done == cfg.total_steps):
            arr = _sample_grid(state, dataset, probe)
            PILImage.fromarray(arr).save(
                os.path.join(sample_dir, "step_%08d.png" % done)
            )
    if last is None:
        last = os.path.join(ckpt_dir, "step_%08d.ckpt" % state.step)
        save_checkpoint(last, state.step, cfg, state.modules(), state.optimizers())
    return last


def load_state(path, manifest):
    """Rebuild a TrainState from a checkpoint for evaluation or resumption."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = Config(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob["config"].items()})
    state = build_state(cfg, n_classes=len(manifest.train_ids))
    step, cfg = load_checkpoint(path, state.modules(), state.optimizers())
    state.step = step
    state.cfg = cfg
    return state
