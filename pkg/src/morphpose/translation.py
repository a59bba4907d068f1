"""Two-stage adversarial translation training: a shape stage (global affine +
local deformation vs. a silhouette discriminator, with straight-through
binarization and a deformation regularizer) and an appearance stage (mask-to-
image generator vs. a small-receptive-field image discriminator plus a
supervised silhouette-reconstruction term), trained jointly on unpaired sets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError
from .networks import NetworkSpec, build_network, save_checkpoint
from .warp import (
    AffineParams,
    DeformationField,
    GradientField,
    KeypointSet,
    clamp_gradients,
    identity_grid,
    identity_spacing,
    integrate_gradients,
    threshold_ste,
    warp_keypoints,
)

ADAM_BETAS = (0.5, 0.999)
TRAINER_STATE_VERSION = 1


@dataclass(frozen=True)
class GanLossSpec:
    """Nonsaturating logistic GAN: discriminator maximizes log-sigmoid of real
    logits plus log(1 - sigmoid) of fake logits; the generator maximizes
    log-sigmoid of fake logits. Both sides stay finite for any finite logits."""

    variant: str = "nonsaturating-logistic"


@dataclass
class RegularizerWeights:
    alpha: float = 10.0  # squared deviation of spacings from the identity spacing
    beta: float = 1.0    # mean norm of the field's deviation from the identity grid

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("regularizer weights must be nonnegative")


@dataclass
class ScheduleSpec:
    """Per-network learning rates plus the shared linear decay window."""

    lr_stn: float = 2e-5
    lr_gd: float = 2e-5
    lr_gi: float = 2e-3
    lr_ds: float = 2e-6
    lr_di: float = 2e-3
    decay_start: int = 50
    decay_end: int = 100
    batch_size: int = 4
    epochs: int = 100

    def __post_init__(self):
        if self.decay_end < self.decay_start:
            raise ValueError("decay_end must be >= decay_start")
        for name in ("lr_stn", "lr_gd", "lr_gi", "lr_ds", "lr_di"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def factor(self, epoch: int) -> float:
        if epoch < self.decay_start:
            return 1.0
        if self.decay_end == self.decay_start:
            return 0.0
        return max(0.0, (self.decay_end - epoch) / (self.decay_end - self.decay_start))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_logits(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericalError("non-finite discriminator logits")


def gan_disc_loss(real_logits, fake_logits) -> torch.Tensor:
    _check_logits(real_logits, fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def gan_gen_loss(fake_logits) -> torch.Tensor:
    _check_logits(fake_logits)
    return F.softplus(-fake_logits).mean()


def loss_shape(disc_out_real, disc_out_fake):
    """(generator loss, discriminator loss) for the silhouette stage."""
    return gan_gen_loss(disc_out_fake), gan_disc_loss(disc_out_real, disc_out_fake)


def loss_regularizer(fld: DeformationField, grads: GradientField,
                     w: RegularizerWeights) -> torch.Tensor:
    """Deformation penalty, zero exactly at the identity field.

    alpha weighs the mean squared deviation of the spacings from the identity
    spacing; beta weighs the mean per-pixel norm of phi's deviation from the
    identity grid (smoothed at the origin so the gradient exists there).
    """
    h, w_ = fld.spatial_shape
    sx = identity_spacing(w_)
    sy = identity_spacing(h)
    dev_x = grads.gx - sx
    dev_y = grads.gy - sy
    alpha_term = (dev_x ** 2).mean() / 2 + (dev_y ** 2).mean() / 2

    grid = identity_grid(h, w_, dtype=fld.phi.dtype, device=fld.phi.device)
    diff = fld.phi - grid
    eps = 1e-8
    norm = torch.sqrt((diff ** 2).sum(dim=-1) + eps * eps) - eps
    beta_term = norm.mean()
    return w.alpha * alpha_term + w.beta * beta_term


def loss_appearance(disc_out_real, disc_out_fake, recon_out, recon_target):
    """(generator GAN loss, discriminator loss, supervised L1) for the
    appearance stage; recon pairs are (G_I of a real silhouette, real image)."""
    if recon_out.shape != recon_target.shape:
        raise ValueError(f"reconstruction shape mismatch: "
                         f"{tuple(recon_out.shape)} vs {tuple(recon_target.shape)}")
    sup = (recon_out - recon_target).abs().mean()
    return gan_gen_loss(disc_out_fake), gan_disc_loss(disc_out_real, disc_out_fake), sup


# ---------------------------------------------------------------------------
# Field construction helpers
# ---------------------------------------------------------------------------


def batched_affine_grid(theta: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, 2, 3) affines -> (B, h, w, 2) sampling grids over normalized coords."""
    base = identity_grid(h, w, dtype=theta.dtype, device=theta.device)
    return torch.einsum("hwk,bik->bhwi", base, theta[:, :, :2]) + theta[:, None, None, :, 2]


def apply_theta_pointwise(theta: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Compose a batch of affines into a batch of fields: theta(phi(c))."""
    return torch.einsum("bhwk,bik->bhwi", phi, theta[:, :, :2]) + theta[:, None, None, :, 2]


def generator_fields(stn, gd, images: torch.Tensor):
    """Run the shape pipeline on a batch of source images.

    Returns (theta (B,2,3), grads GradientField, local field, composed field):
    the local field comes from integrating the clamped output of the
    deformation generator applied to the globally transformed image; the
    composed field bakes the affine in pointwise, matching two-stage sampling.
    """
    theta = stn(images)
    h, w = images.shape[-2:]
    glob = F.grid_sample(images, batched_affine_grid(theta, h, w), mode="bilinear",
                         padding_mode="zeros", align_corners=True)
    raw = gd(glob)
    grads = clamp_gradients(raw.permute(0, 2, 3, 1))
    local = integrate_gradients(grads)
    composed = DeformationField(apply_theta_pointwise(theta, local.phi),
                                provenance="composed")
    return theta, grads, local, composed


def _sample(src, phi):
    return F.grid_sample(src, phi.to(src.dtype), mode="bilinear",
                         padding_mode="zeros", align_corners=True)


# ---------------------------------------------------------------------------
# Identity pretraining
# ---------------------------------------------------------------------------


def field_identity_deviation(phi: torch.Tensor) -> float:
    """Mean |phi - identity grid| in normalized units."""
    h, w = phi.shape[-3:-1]
    grid = identity_grid(h, w, dtype=phi.dtype, device=phi.device)
    return (phi - grid).abs().mean().item()


def pretrain_identity(gd, stn, images: torch.Tensor, steps: int = 500,
                      lr: float = 1e-4, weights: RegularizerWeights | None = None,
                      tol: float = 1e-3, log_path=None):
    """Train the deformation generator on the regularizer alone until its
    integrated field is the identity (mean deviation < tol on held-out data).

    The global regressor is untouched: it is identity by construction at
    initialization. Raises NumericalError when the tolerance is not met.
    """
    weights = weights or RegularizerWeights()
    opt = torch.optim.Adam(gd.parameters(), lr=lr, betas=ADAM_BETAS)
    rows = []
    for step in range(steps):
        # linear decay to zero: Adam's fixed-size steps otherwise dither
        # around the optimum at the lr scale and miss tight tolerances
        for group in opt.param_groups:
            group["lr"] = lr * (1.0 - step / steps)
        raw = gd(images)
        grads = clamp_gradients(raw.permute(0, 2, 3, 1))
        fld = integrate_gradients(grads)
        loss = loss_regularizer(fld, grads, weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"step": step, "reg": loss.item()})

    with torch.no_grad():
        raw = gd(images)
        grads = clamp_gradients(raw.permute(0, 2, 3, 1))
        deviation = field_identity_deviation(integrate_gradients(grads).phi)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "reg"])
            for r in rows:
                w.writerow([r["step"], f"{r['reg']:.10g}"])
            w.writerow(["final_deviation", f"{deviation:.10g}"])
    if deviation >= tol:
        raise NumericalError(
            f"identity pretraining did not converge: mean |phi - id| = "
            f"{deviation:.3e} >= {tol} after {steps} steps")
    return deviation, rows


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TranslationConfig:
    size: int = 64
    seed: int = 0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    reg: RegularizerWeights = field(default_factory=RegularizerWeights)
    w_shape_gan: float = 1.0
    w_image_gan: float = 1.0
    w_sup: float = 1.0
    detach_shape_from_image: bool = False
    stn_isotropic: bool = False
    width_gd: int = 32
    width_gi: int = 32
    width_ds: int = 32
    width_di: int = 32
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-4
    pretrain_tol: float = 1e-3
    steps_per_epoch: int = 0  # 0: one pass over the source set
    checkpoint_every: int = 0  # epochs; 0: only final
    sample_every: int = 0      # epochs; 0: never
    log_every: int = 1         # steps

    def network_specs(self):
        return {
            "stn": NetworkSpec("stn", in_size=self.size, base_width=64,
                               isotropic_affine=self.stn_isotropic),
            "gd": NetworkSpec("deform_gen", in_size=self.size, base_width=self.width_gd),
            "gi": NetworkSpec("unet_gen", in_size=self.size, base_width=self.width_gi),
            "ds": NetworkSpec("patch_disc_shape", in_size=self.size, base_width=self.width_ds),
            "di": NetworkSpec("patch_disc_image", in_size=self.size, base_width=self.width_di),
        }


LOG_COLUMNS = ["step", "loss_DS", "loss_DI", "loss_GS", "loss_GI", "reg", "sup"]


def _assert_binary(x: torch.Tensor, what: str):
    if not torch.logical_or(x == 0, x == 1).all():
        raise NumericalError(f"{what} must be binary-valued before the shape discriminator")


class TranslationTrainer:
    """Owns the five networks and the alternating update loop.

    Per batch: the shape and image discriminators update on detached
    generator outputs, then the generators update jointly on the adversarial
    terms, the deformation regularizer and the supervised reconstruction.
    The shape discriminator only ever sees binary masks (real, or
    straight-through binarized fakes).
    """

    def __init__(self, cfg: TranslationConfig, run_dir,
                 source_images, source_masks, target_images, target_masks):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)

        def to_batch(arrs):
            return torch.as_tensor(np.stack(arrs), dtype=torch.float32)[:, None]

        self.src_images = to_batch(source_images)
        self.src_masks = to_batch(source_masks)
        self.tgt_images = to_batch(target_images)
        self.tgt_masks = to_batch(target_masks)
        _assert_binary(self.src_masks, "source masks")
        _assert_binary(self.tgt_masks, "target masks")

        specs = cfg.network_specs()
        self.nets = {name: build_network(s, seed=cfg.seed + i)
                     for i, (name, s) in enumerate(specs.items())}
        self.specs = specs

        sched = cfg.schedule
        self.opt_g = torch.optim.Adam([
            {"params": self.nets["stn"].parameters(), "lr": sched.lr_stn},
            {"params": self.nets["gd"].parameters(), "lr": sched.lr_gd},
            {"params": self.nets["gi"].parameters(), "lr": sched.lr_gi},
        ], betas=ADAM_BETAS)
        self.opt_ds = torch.optim.Adam(self.nets["ds"].parameters(),
                                       lr=sched.lr_ds, betas=ADAM_BETAS)
        self.opt_di = torch.optim.Adam(self.nets["di"].parameters(),
                                       lr=sched.lr_di, betas=ADAM_BETAS)
        self.base_lrs = {"g": [g["lr"] for g in self.opt_g.param_groups],
                         "ds": sched.lr_ds, "di": sched.lr_di}

        self.data_rng = np.random.RandomState(cfg.seed)
        self.epoch = 0
        self.global_step = 0
        self.log_rows = []

    # -- learning-rate schedule ------------------------------------------------

    def _apply_lr(self):
        f = self.cfg.schedule.factor(self.epoch)
        for group, base in zip(self.opt_g.param_groups, self.base_lrs["g"]):
            group["lr"] = base * f
        for group in self.opt_ds.param_groups:
            group["lr"] = self.base_lrs["ds"] * f
        for group in self.opt_di.param_groups:
            group["lr"] = self.base_lrs["di"] * f

    def current_lrs(self):
        return {"stn": self.opt_g.param_groups[0]["lr"],
                "gd": self.opt_g.param_groups[1]["lr"],
                "gi": self.opt_g.param_groups[2]["lr"],
                "ds": self.opt_ds.param_groups[0]["lr"],
                "di": self.opt_di.param_groups[0]["lr"]}

    # -- core updates ----------------------------------------------------------

    def pretrain(self):
        n = min(8, self.src_images.shape[0])
        deviation, _ = pretrain_identity(
            self.nets["gd"], self.nets["stn"], self.src_images[:n],
            steps=self.cfg.pretrain_steps, lr=self.cfg.pretrain_lr,
            weights=self.cfg.reg, tol=self.cfg.pretrain_tol,
            log_path=self.run_dir / "pretrain_log.csv")
        return deviation

    def _forward_generator(self, img_a, mask_a):
        theta, grads, local, composed = generator_fields(
            self.nets["stn"], self.nets["gd"], img_a)
        soft = _sample(mask_a, composed.phi)
        s_hat = threshold_ste(soft, 0.5)
        gi_in = s_hat.detach() if self.cfg.detach_shape_from_image else s_hat
        i_hat = self.nets["gi"](gi_in)
        return theta, grads, local, composed, s_hat, i_hat

    def _update_shape_disc(self, mask_b, s_hat_detached):
        _assert_binary(s_hat_detached, "binarized fake masks")
        loss = gan_disc_loss(self.nets["ds"](mask_b), self.nets["ds"](s_hat_detached))
        self.opt_ds.zero_grad()
        loss.backward()
        self.opt_ds.step()
        return loss.item()

    def _update_image_disc(self, img_b, i_hat_detached):
        loss = gan_disc_loss(self.nets["di"](img_b), self.nets["di"](i_hat_detached))
        self.opt_di.zero_grad()
        loss.backward()
        self.opt_di.step()
        return loss.item()

    def _update_generators(self, grads, local, s_hat, i_hat, img_b, mask_b):
        cfg = self.cfg
        gen_s = gan_gen_loss(self.nets["ds"](s_hat))
        gen_i = gan_gen_loss(self.nets["di"](i_hat))
        reg = loss_regularizer(local, grads, cfg.reg)
        recon = self.nets["gi"](mask_b)
        sup = (recon - img_b).abs().mean()
        total = (cfg.w_shape_gan * gen_s + cfg.w_image_gan * gen_i
                 + reg + cfg.w_sup * sup)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return gen_s.item(), gen_i.item(), reg.item(), sup.item()

    def train_step(self, img_a, mask_a, img_b, mask_b):
        theta, grads, local, composed, s_hat, i_hat = self._forward_generator(img_a, mask_a)
        # fixed update order: D_S, D_I, then the joint generator step
        loss_ds = self._update_shape_disc(mask_b, s_hat.detach())
        loss_di = self._update_image_disc(img_b, i_hat.detach())
        gen_s, gen_i, reg, sup = self._update_generators(
            grads, local, s_hat, i_hat, img_b, mask_b)

        row = {"step": self.global_step, "loss_DS": loss_ds,
               "loss_DI": loss_di, "loss_GS": gen_s,
               "loss_GI": gen_i, "reg": reg, "sup": sup}
        if not all(np.isfinite(v) for v in row.values()):
            self._dump_batch(img_a, mask_a, img_b, mask_b)
            raise NumericalError(f"non-finite loss at step {self.global_step}: {row}")
        self.global_step += 1
        return row

    def _dump_batch(self, *tensors):
        np.savez(self.run_dir / "nan_dump.npz",
                 **{f"t{i}": t.detach().numpy() for i, t in enumerate(tensors)})

    def _batches(self, n_items, n_steps, batch_size):
        for _ in range(n_steps):
            a = self.data_rng.randint(0, self.src_images.shape[0], size=batch_size)
            b = self.data_rng.randint(0, n_items, size=batch_size)
            yield a, b

    def train(self, sample_hook=None):
        cfg = self.cfg
        sched = cfg.schedule
        steps = cfg.steps_per_epoch or max(1, self.src_images.shape[0] // sched.batch_size)
        log_path = self.run_dir / "log.csv"
        new_log = not log_path.exists()
        with open(log_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_log:
                writer.writerow(LOG_COLUMNS)
            while self.epoch < sched.epochs:
                self._apply_lr()
                for a_idx, b_idx in self._batches(self.tgt_images.shape[0], steps,
                                                  sched.batch_size):
                    row = self.train_step(
                        self.src_images[a_idx], self.src_masks[a_idx],
                        self.tgt_images[b_idx], self.tgt_masks[b_idx])
                    self.log_rows.append(row)
                    if row["step"] % cfg.log_every == 0:
                        writer.writerow([row["step"]] +
                                        [f"{row[c]:.10g}" for c in LOG_COLUMNS[1:]])
                self.epoch += 1
                if sample_hook and cfg.sample_every and self.epoch % cfg.sample_every == 0:
                    sample_hook(self)
                if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                    self.save_state(self.run_dir / "checkpoints" / f"state_ep{self.epoch}.pt")
        self.save_state(self.run_dir / "checkpoints" / "state_latest.pt")
        self.export_network_checkpoints()

    # -- persistence -----------------------------------------------------------

    def save_state(self, path):
        torch.save({
            "format_version": TRAINER_STATE_VERSION,
            "config": asdict(self.cfg),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "nets": {k: v.state_dict() for k, v in self.nets.items()},
            "opts": {"g": self.opt_g.state_dict(), "ds": self.opt_ds.state_dict(),
                     "di": self.opt_di.state_dict()},
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.data_rng.get_state(),
        }, path)

    def load_state(self, path):
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format_version") != TRAINER_STATE_VERSION:
            raise ValueError("unsupported trainer state version")
        for k, net in self.nets.items():
            net.load_state_dict(payload["nets"][k])
        self.opt_g.load_state_dict(payload["opts"]["g"])
        self.opt_ds.load_state_dict(payload["opts"]["ds"])
        self.opt_di.load_state_dict(payload["opts"]["di"])
        self.epoch = payload["epoch"]
        self.global_step = payload["global_step"]
        torch.set_rng_state(payload["torch_rng"])
        self.data_rng.set_state(payload["numpy_rng"])

    def export_network_checkpoints(self):
        for i, (name, spec) in enumerate(self.specs.items()):
            save_checkpoint(self.run_dir / "checkpoints" / f"{name}.pt",
                            self.nets[name], spec, self.cfg.seed + i, self.global_step)


# ---------------------------------------------------------------------------
# Batch translation and global-transform recovery
# ---------------------------------------------------------------------------


def translate_batch(trainer: TranslationTrainer, images, masks, keypoint_sets,
                    batch_size: int = 16):
    """Emit the translated training set: images through the full generator,
    masks through STE binarization, and keypoints through warp_keypoints with
    the exact composed field applied to each image."""
    for net in trainer.nets.values():
        net.eval()
    out_images, out_masks, out_kps, fields = [], [], [], []
    imgs = torch.as_tensor(np.stack(images), dtype=torch.float32)[:, None]
    msks = torch.as_tensor(np.stack(masks), dtype=torch.float32)[:, None]
    with torch.no_grad():
        for start in range(0, imgs.shape[0], batch_size):
            img_a = imgs[start:start + batch_size]
            mask_a = msks[start:start + batch_size]
            theta, grads, local, composed, s_hat, i_hat = \
                trainer._forward_generator(img_a, mask_a)
            for i in range(img_a.shape[0]):
                fld = DeformationField(
                    composed.phi[i], AffineParams(theta[i].numpy().astype(np.float64)),
                    "composed")
                fields.append(fld)
                out_images.append(i_hat[i, 0].numpy())
                out_masks.append(s_hat[i, 0].numpy())
                out_kps.append(warp_keypoints(keypoint_sets[start + i], fld))
    for net in trainer.nets.values():
        net.train()
    return out_images, out_masks, out_kps, fields


def estimate_global_transform(stn, images, batch_size: int = 32) -> dict:
    """Average the regressed affines over a set and report them in the
    forward (source content -> target content) convention.

    The regressor outputs sampling transforms (output coords -> source
    coords), i.e. the inverse of the content motion, so the forward estimate
    is scale 1/s and rotation -r of the per-image decompositions.
    """
    stn.eval()
    imgs = torch.as_tensor(np.stack(images), dtype=torch.float32)[:, None]
    scales, rotations = [], []
    with torch.no_grad():
        for start in range(0, imgs.shape[0], batch_size):
            theta = stn(imgs[start:start + batch_size])
            for i in range(theta.shape[0]):
                s, r = AffineParams(theta[i].numpy().astype(np.float64)).scale_rotation()
                scales.append(s)
                rotations.append(r)
    stn.train()
    return {"scale": 1.0 / float(np.mean(scales)),
            "rotation_deg": -float(np.mean(rotations)),
            "sampling_scale": float(np.mean(scales)),
            "sampling_rotation_deg": float(np.mean(rotations))}
