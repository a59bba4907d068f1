"""Heatmap rendering, pose-network training with permutation-invariant
losses, and inference by heatmap argmax."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericalError
from .networks import NetworkSpec, build_network, save_checkpoint
from .warp import (
    AffineParams,
    DeformationField,
    HeatmapStack,
    KeypointSet,
    apply_affine,
    bilinear_sample,
    identity_grid,
)

LOW_CONFIDENCE_PEAK = 0.05


@dataclass(frozen=True)
class SkeletonDef:
    """Joint vocabulary and symmetry group for one animal class.

    The symmetry group (always containing the identity) drives the
    permutation-invariant metrics; pi_training marks classes whose loss also
    minimizes over the group (the front/back-symmetric worm only — the fly is
    trained with a fixed leg order and only evaluated permutation-invariantly).
    """

    animal: str
    joint_names: tuple
    pi_training: bool

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def symmetry_permutations(self):
        j = self.num_joints
        if self.animal == "worm":
            return [np.arange(j), np.arange(j)[::-1].copy()]
        if self.animal == "fly":
            # the three evaluated legs swap as whole 5-joint groups
            perms = []
            base = np.arange(j)
            for order in itertools.permutations(range(3)):
                p = base.copy()
                for slot, leg in enumerate(order):
                    p[slot * 5:slot * 5 + 5] = np.arange(leg * 5, leg * 5 + 5)
                perms.append(p)
            return perms
        return [np.arange(j)]

    def train_permutations(self):
        return self.symmetry_permutations() if self.pi_training else [np.arange(self.num_joints)]


_FLY_JOINTS = tuple(
    f"leg{leg}_{part}" for leg in range(1, 7)
    for part in ("coxa", "femur", "tibia", "tarsus", "tip"))

_SKELETONS = {
    "fly": SkeletonDef("fly", _FLY_JOINTS, pi_training=False),
    "worm": SkeletonDef("worm", ("head", "s1", "s2", "mid", "s4", "s5", "tail"),
                        pi_training=True),
    "fish": SkeletonDef("fish", ("eye_left", "eye_right", "tail_tip"), pi_training=False),
}


def skeleton_for(animal: str) -> SkeletonDef:
    try:
        return _SKELETONS[animal]
    except KeyError:
        raise ValueError(f"unknown animal class {animal!r}") from None


@dataclass
class PoseSample:
    """One supervised example: image plus keypoints (heatmaps optional,
    re-rendered on demand)."""

    image: np.ndarray
    keypoints: KeypointSet
    heatmaps: HeatmapStack | None = None
    origin: str = "synthetic"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ValueError("pose sample image must be a single-channel (H, W) raster")
        if self.origin not in ("translated", "real_annotated", "synthetic"):
            raise ValueError(f"unknown sample origin {self.origin!r}")
        if self.heatmaps is not None:
            peaks = self.heatmaps.argmax_px()
            expect = self.keypoints.xy / self.heatmaps.scale
            vis = self.keypoints.visible
            if vis.any() and np.abs(peaks[vis] - expect[vis]).max() > 1.0 + 1e-9:
                raise ValueError("heatmap peaks disagree with keypoints/scale by more than 1 px")


# ---------------------------------------------------------------------------
# Rendering and inference
# ---------------------------------------------------------------------------


def render_heatmaps(k: KeypointSet, out_res: int = 32, sigma2: float = 0.5,
                    scale: int = 4) -> HeatmapStack:
    """Isotropic Gaussians (variance sigma2 in heatmap px) at keypoints/scale,
    peak-normalized to 1.0; invisible joints render all-zero channels."""
    if np.isscalar(out_res):
        h = w = int(out_res)
    else:
        h, w = out_res
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    maps = np.zeros((len(k), h, w), dtype=np.float32)
    for j in range(len(k)):
        if not k.visible[j]:
            continue
        cx, cy = k.xy[j] / scale
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma2))
        peak = g.max()
        if peak > 0:
            maps[j] = g / peak
    return HeatmapStack(maps=maps, sigma2=sigma2, scale=scale)


def heatmaps_to_keypoints(maps: np.ndarray, names, scale: int = 4,
                          peak_threshold: float = LOW_CONFIDENCE_PEAK) -> KeypointSet:
    """Per-channel argmax (lowest row-major index on ties) scaled back to
    image pixels; peaks below the threshold are flagged low-confidence."""
    maps = np.asarray(maps)
    j, h, w = maps.shape
    flat = maps.reshape(j, -1)
    idx = flat.argmax(axis=1)
    xy = np.stack([(idx % w) * scale, (idx // w) * scale], axis=1).astype(np.float64)
    visible = flat[np.arange(j), idx] >= peak_threshold
    return KeypointSet(names=list(names), xy=xy, visible=visible)


def predict(net, img, skel: SkeletonDef, scale: int = 4) -> KeypointSet:
    """Run the pose network and decode the final stack's heatmaps."""
    net.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(img, dtype=np.float32))[None, None]
        stacks = net(x)
    final = stacks[-1][0].numpy()
    return heatmaps_to_keypoints(final, skel.joint_names, scale=scale)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def pi_loss(pred_stacks, gt_maps, skel: SkeletonDef, permutations=None) -> torch.Tensor:
    """Per-sample minimum over symmetry permutations of the MSE between
    predicted and permuted target heatmaps, summed over supervision stacks."""
    if torch.is_tensor(pred_stacks):
        pred_stacks = [pred_stacks]
    gt = gt_maps if torch.is_tensor(gt_maps) else torch.as_tensor(gt_maps)
    if gt.dim() == 3:
        gt = gt.unsqueeze(0)
    for s in pred_stacks:
        if s.shape != gt.shape:
            raise ValueError(f"stack shape {tuple(s.shape)} != target {tuple(gt.shape)}")
    perms = permutations if permutations is not None else skel.symmetry_permutations()
    per_perm = []
    for p in perms:
        target = gt[:, np.asarray(p, dtype=int), :, :]
        mse = sum(((s - target) ** 2).mean(dim=(1, 2, 3)) for s in pred_stacks)
        per_perm.append(mse)
    return torch.stack(per_perm).min(dim=0).values.mean()


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def rotate_sample(image: np.ndarray, k: KeypointSet, angle_deg: float):
    """Rotate image and keypoints jointly about the image center (zero
    padding); keypoints leaving the frame become invisible."""
    h, w = image.shape
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # sampling field uses the inverse rotation; keypoints move forward
    theta = AffineParams(np.array([[cos, sin, 0.0], [-sin, cos, 0.0]]))
    grid = apply_affine(theta, identity_grid(h, w, dtype=torch.float64))
    rotated = bilinear_sample(image.astype(np.float64), DeformationField(grid))

    kn = np.stack([2 * k.xy[:, 0] / (w - 1) - 1, 2 * k.xy[:, 1] / (h - 1) - 1], axis=1)
    fwd = kn @ np.array([[cos, -sin], [sin, cos]]).T
    xy = np.stack([(fwd[:, 0] + 1) / 2 * (w - 1), (fwd[:, 1] + 1) / 2 * (h - 1)], axis=1)
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)
    return rotated.astype(np.float32), KeypointSet(list(k.names), xy, k.visible & inside)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class PoseTrainConfig:
    epochs: int = 200
    lr: float = 2e-3
    decay_start: int = 100
    batch_size: int = 8
    rotation_aug_deg: float = 30.0
    width: int = 64
    num_stacks: int = 2
    seed: int = 0
    heatmap_scale: int = 4
    sigma2: float = 0.5
    log_every: int = 1


def lr_factor(epoch: int, decay_start: int, total: int) -> float:
    """1.0 until decay_start, then linear to 0 at `total`."""
    if epoch < decay_start:
        return 1.0
    if total <= decay_start:
        return 0.0
    return max(0.0, (total - epoch) / (total - decay_start))


def train_pose(samples, skel: SkeletonDef, cfg: PoseTrainConfig,
               out_dir=None, net=None):
    """Supervised hourglass training on PoseSamples.

    Rotation augmentation is applied jointly to image and keypoints, with
    heatmaps re-rendered from the rotated keypoints. Returns (net, log rows).
    """
    if not samples:
        raise ValueError("need at least one training sample")
    size = samples[0].image.shape[0]
    spec = NetworkSpec(kind="hourglass", out_channels=skel.num_joints,
                       base_width=cfg.width, num_stacks=cfg.num_stacks, in_size=size)
    if net is None:
        net = build_network(spec, cfg.seed)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda e: lr_factor(e, cfg.decay_start, cfg.epochs))
    rng = np.random.RandomState(cfg.seed)
    hm_res = size // cfg.heatmap_scale
    perms = skel.train_permutations()

    log_rows = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            imgs, gts = [], []
            for s in batch:
                img, kps = s.image, s.keypoints
                if cfg.rotation_aug_deg > 0:
                    img, kps = rotate_sample(img, kps, rng.uniform(
                        -cfg.rotation_aug_deg, cfg.rotation_aug_deg))
                imgs.append(img)
                gts.append(render_heatmaps(kps, hm_res, cfg.sigma2, cfg.heatmap_scale).maps)
            x = torch.as_tensor(np.stack(imgs))[:, None]
            gt = torch.as_tensor(np.stack(gts))

            opt.zero_grad()
            stacks = net(x)
            loss = pi_loss(stacks, gt, skel, permutations=perms)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    np.savez(str(out_dir / "nan_dump.npz"), images=np.stack(imgs))
                raise NumericalError(f"pose loss went non-finite at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        sched.step()
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            log_rows.append({"epoch": epoch, "lr": opt.param_groups[0]["lr"],
                             "loss": float(np.mean(epoch_losses))})

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "pose_net.pt", net, spec, cfg.seed, cfg.epochs)
        with open(out_dir / "pose_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "loss"])
            for row in log_rows:
                w.writerow([row["epoch"], f"{row['lr']:.10g}", f"{row['loss']:.10g}"])
    return net, log_rows
