import hashlib
import math

import numpy as np
import pytest
import torch

from morphpose.data import SyntheticSpec, extract_silhouette, gen_synthetic
from morphpose.errors import NumericalError
from morphpose.networks import NetworkSpec, build_network
from morphpose.translation import (
    GanLossSpec,
    RegularizerWeights,
    ScheduleSpec,
    TranslationConfig,
    TranslationTrainer,
    batched_affine_grid,
    estimate_global_transform,
    field_identity_deviation,
    gan_disc_loss,
    gan_gen_loss,
    loss_appearance,
    loss_regularizer,
    loss_shape,
    pretrain_identity,
    translate_batch,
)
from morphpose.warp import (
    DeformationField,
    GradientField,
    identity_grid,
    identity_spacing,
    integrate_gradients,
)


# ---------------------------------------------------------------------------
# GAN losses
# ---------------------------------------------------------------------------


def test_loss_shape_closed_form_extremes():
    real = torch.full((2, 1, 4, 4), 10.0)
    fake = torch.full((2, 1, 4, 4), -10.0)
    gen, disc = loss_shape(real, fake)
    # stable log-sigmoid values: softplus(-10)*2 and softplus(10)
    assert disc.item() == pytest.approx(2 * math.log1p(math.exp(-10)), rel=1e-5)
    assert disc.item() == pytest.approx(9.1e-5, abs=5e-6)
    assert gen.item() == pytest.approx(10.0 + math.log1p(math.exp(-10)), rel=1e-6)


def test_loss_shape_symmetric_zero_logits():
    zeros = torch.zeros(3, 1, 5, 5)
    gen, disc = loss_shape(zeros, zeros)
    assert disc.item() == pytest.approx(math.log(4), rel=1e-6)
    assert gen.item() == pytest.approx(math.log(2), rel=1e-6)


def test_loss_shape_batch_size_invariance():
    rng = np.random.RandomState(0)
    real = torch.tensor(rng.randn(2, 1, 6, 6), dtype=torch.float32)
    fake = torch.tensor(rng.randn(2, 1, 6, 6), dtype=torch.float32)
    gen1, disc1 = loss_shape(real, fake)
    gen2, disc2 = loss_shape(real.repeat(2, 1, 1, 1), fake.repeat(2, 1, 1, 1))
    assert gen1.item() == pytest.approx(gen2.item(), rel=1e-6)
    assert disc1.item() == pytest.approx(disc2.item(), rel=1e-6)


def test_gan_losses_reject_nonfinite():
    with pytest.raises(NumericalError):
        gan_gen_loss(torch.tensor([float("inf")]))
    with pytest.raises(NumericalError):
        gan_disc_loss(torch.tensor([1.0]), torch.tensor([float("nan")]))


def test_gen_loss_decreases_as_fake_logits_rise():
    lo = gan_gen_loss(torch.tensor([-1.0]))
    hi = gan_gen_loss(torch.tensor([2.0]))
    assert hi < lo


def test_gan_loss_spec_default():
    assert GanLossSpec().variant == "nonsaturating-logistic"


# ---------------------------------------------------------------------------
# deformation regularizer
# ---------------------------------------------------------------------------


def identity_gradient_field(n):
    s = identity_spacing(n)
    g = torch.full((n, n), s, dtype=torch.float64)
    return GradientField(g, g.clone())


def test_regularizer_zero_at_identity():
    g = identity_gradient_field(64)
    w = RegularizerWeights(alpha=10.0, beta=1.0)
    exact = DeformationField.identity(64, 64, dtype=torch.float64)
    assert loss_regularizer(exact, g, w).item() == 0.0
    # reconstructing the grid by integration leaves only float roundoff
    assert loss_regularizer(integrate_gradients(g), g, w).item() < 1e-12


def test_regularizer_uniform_stretch_hand_value():
    # both spacings doubled on a 64 grid: each entry deviates by s, so the
    # alpha term is exactly s^2; hand-compute the beta term from the phi grid
    n = 64
    s = identity_spacing(n)
    g = GradientField(torch.full((n, n), 2 * s, dtype=torch.float64),
                      torch.full((n, n), 2 * s, dtype=torch.float64))
    fld = integrate_gradients(g)
    grid = identity_grid(n, n, dtype=torch.float64).numpy()
    expected_beta = np.sqrt((grid[..., 0] ** 2 + grid[..., 1] ** 2)).mean()  # |2g - g| = |g|

    alpha_only = loss_regularizer(fld, g, RegularizerWeights(alpha=1.0, beta=0.0)).item()
    beta_only = loss_regularizer(fld, g, RegularizerWeights(alpha=0.0, beta=1.0)).item()
    assert alpha_only == pytest.approx(s ** 2, rel=1e-9)
    assert beta_only == pytest.approx(expected_beta, rel=1e-6)


def test_regularizer_alpha_linearity():
    rng = np.random.RandomState(1)
    raw = torch.tensor(rng.uniform(0.01, 0.1, size=(16, 16, 2)))
    g = GradientField(raw[..., 0], raw[..., 1])
    fld = integrate_gradients(g)
    a1 = loss_regularizer(fld, g, RegularizerWeights(alpha=1.0, beta=0.0)).item()
    a2 = loss_regularizer(fld, g, RegularizerWeights(alpha=2.0, beta=0.0)).item()
    assert a2 == pytest.approx(2 * a1, rel=1e-9)


def test_regularizer_weights_validated():
    with pytest.raises(ValueError):
        RegularizerWeights(alpha=-1.0)


# ---------------------------------------------------------------------------
# appearance losses
# ---------------------------------------------------------------------------


def test_loss_appearance_sup_values():
    logits = torch.zeros(1, 1, 3, 3)
    target = torch.full((1, 1, 8, 8), 1.0)
    _, _, sup0 = loss_appearance(logits, logits, target.clone(), target)
    assert sup0.item() == 0.0
    half = torch.full((1, 1, 8, 8), 0.5)
    _, _, sup = loss_appearance(logits, logits, half, target)
    assert sup.item() == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(ValueError):
        loss_appearance(logits, logits, half, torch.zeros(1, 1, 4, 4))


def test_loss_appearance_sup_gradient_is_sign_over_n():
    rng = np.random.RandomState(2)
    out = torch.tensor(rng.rand(1, 1, 5, 5), requires_grad=True)
    target = torch.tensor(rng.rand(1, 1, 5, 5))
    logits = torch.zeros(1, 1, 2, 2)
    _, _, sup = loss_appearance(logits, logits, out, target)
    sup.backward()
    n = out.numel()
    expected = torch.sign(out.detach() - target) / n
    assert torch.allclose(out.grad, expected, atol=1e-9)
    # cross-check one entry against central finite differences
    eps = 1e-4
    with torch.no_grad():
        base = out[0, 0, 2, 2].item()
        out[0, 0, 2, 2] = base + eps
        up = (out - target).abs().mean().item()
        out[0, 0, 2, 2] = base - eps
        down = (out - target).abs().mean().item()
        out[0, 0, 2, 2] = base
    fd = (up - down) / (2 * eps)
    assert out.grad[0, 0, 2, 2].item() == pytest.approx(fd, rel=1e-3)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_schedule_linear_decay_profile():
    sched = ScheduleSpec(decay_start=50, decay_end=100)
    assert sched.factor(0) == 1.0
    assert sched.factor(50) == 1.0
    assert sched.factor(75) == 0.5
    assert sched.factor(100) == 0.0
    with pytest.raises(ValueError):
        ScheduleSpec(decay_start=10, decay_end=5)
    with pytest.raises(ValueError):
        ScheduleSpec(lr_gd=0.0)


# ---------------------------------------------------------------------------
# identity pretraining
# ---------------------------------------------------------------------------


def _pretrain_fixtures(size=32, n=4, width=16, seed=0):
    samples = gen_synthetic(SyntheticSpec(animal="worm", size=size, seed=seed), n)
    imgs = torch.as_tensor(np.stack([s.image for s in samples]))[:, None]
    gd = build_network(NetworkSpec("deform_gen", in_size=size, base_width=width), seed=1)
    stn = build_network(NetworkSpec("stn", in_size=size), seed=2)
    return imgs, gd, stn


def test_pretrain_zero_steps_fails_as_designed():
    imgs, gd, stn = _pretrain_fixtures()
    with pytest.raises(NumericalError):
        pretrain_identity(gd, stn, imgs, steps=0, lr=1e-4, tol=1e-3)


def test_pretrain_converges_and_leaves_stn_untouched(tmp_path):
    imgs, gd, stn = _pretrain_fixtures(size=64)
    before = hashlib.sha256(
        b"".join(p.detach().numpy().tobytes() for p in stn.parameters())).hexdigest()
    dev, rows = pretrain_identity(gd, stn, imgs, steps=200, lr=2e-4, tol=2e-3,
                                  log_path=tmp_path / "pre.csv")
    assert dev < 2e-3
    assert rows[-1]["reg"] < rows[0]["reg"]
    after = hashlib.sha256(
        b"".join(p.detach().numpy().tobytes() for p in stn.parameters())).hexdigest()
    assert before == after
    assert (tmp_path / "pre.csv").read_text().splitlines()[0] == "step,reg"


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def make_trainer(tmp_path, seed=0, epochs=2, steps_per_epoch=5, n=16, size=64,
                 **cfg_kw):
    src = gen_synthetic(SyntheticSpec(animal="worm", size=size, seed=seed), n)
    tgt = gen_synthetic(SyntheticSpec(animal="worm", size=size, seed=seed + 100,
                                      appearance="shaded",
                                      half_width_frac=0.048,
                                      affine=(1.15, 10.0, 0.05, -0.03)), n)
    defaults = dict(
        size=size, seed=seed, width_gd=12, width_gi=12, width_ds=12, width_di=12,
        schedule=ScheduleSpec(lr_stn=1e-4, lr_gd=1e-4, lr_gi=1e-3, lr_ds=1e-5,
                              lr_di=1e-3, decay_start=epochs, decay_end=epochs,
                              batch_size=4, epochs=epochs),
        pretrain_steps=0, steps_per_epoch=steps_per_epoch)
    defaults.update(cfg_kw)
    cfg = TranslationConfig(**defaults)
    return TranslationTrainer(
        cfg, tmp_path,
        [s.image for s in src], [s.mask for s in src],
        [t.image for t in tgt], [extract_silhouette(t.image) for t in tgt]), src


def params_digest(net):
    return hashlib.sha256(
        b"".join(p.detach().numpy().tobytes() for p in net.parameters())).hexdigest()


def test_trainer_smoke_finite_losses_and_log(tmp_path):
    trainer, _ = make_trainer(tmp_path / "run", epochs=2, steps_per_epoch=5)
    trainer.train()
    assert len(trainer.log_rows) == 10
    for row in trainer.log_rows:
        assert all(np.isfinite(v) for v in row.values())
    log = (tmp_path / "run" / "log.csv").read_text().splitlines()
    assert log[0] == "step,loss_DS,loss_DI,loss_GS,loss_GI,reg,sup"
    assert len(log) == 11
    assert (tmp_path / "run" / "checkpoints" / "state_latest.pt").exists()
    for name in ("stn", "gd", "gi", "ds", "di"):
        assert (tmp_path / "run" / "checkpoints" / f"{name}.pt").exists()


def test_update_isolation_between_discriminators_and_generators(tmp_path):
    trainer, _ = make_trainer(tmp_path / "run", epochs=1, steps_per_epoch=1)
    img_a = trainer.src_images[:4]
    mask_a = trainer.src_masks[:4]
    img_b = trainer.tgt_images[:4]
    mask_b = trainer.tgt_masks[:4]
    theta, grads, local, composed, s_hat, i_hat = trainer._forward_generator(img_a, mask_a)

    gen_before = {k: params_digest(trainer.nets[k]) for k in ("stn", "gd", "gi")}
    trainer._update_shape_disc(mask_b, s_hat.detach())
    trainer._update_image_disc(img_b, i_hat.detach())
    assert {k: params_digest(trainer.nets[k]) for k in ("stn", "gd", "gi")} == gen_before

    disc_before = {k: params_digest(trainer.nets[k]) for k in ("ds", "di")}
    trainer._update_generators(grads, local, s_hat, i_hat, img_b, mask_b)
    assert {k: params_digest(trainer.nets[k]) for k in ("ds", "di")} == disc_before
    # and the generators did change
    assert params_digest(trainer.nets["gd"]) != gen_before["gd"]


def test_shape_disc_rejects_nonbinary_input(tmp_path):
    trainer, _ = make_trainer(tmp_path / "run", epochs=1, steps_per_epoch=1)
    soft = torch.full((2, 1, 64, 64), 0.4)
    with pytest.raises(NumericalError):
        trainer._update_shape_disc(trainer.tgt_masks[:2], soft)


def test_trainer_lr_decay_applied(tmp_path):
    trainer, _ = make_trainer(
        tmp_path / "run", epochs=4, steps_per_epoch=1,
        schedule=ScheduleSpec(lr_stn=1e-4, lr_gd=1e-4, lr_gi=1e-3, lr_ds=1e-5,
                              lr_di=1e-3, decay_start=2, decay_end=4,
                              batch_size=4, epochs=4))
    trainer.epoch = 3
    trainer._apply_lr()
    lrs = trainer.current_lrs()
    assert lrs["gd"] == pytest.approx(1e-4 * 0.5)
    assert lrs["ds"] == pytest.approx(1e-5 * 0.5)


def test_ablation_supervised_only_decreases(tmp_path):
    trainer, _ = make_trainer(tmp_path / "run", epochs=6, steps_per_epoch=8,
                              w_shape_gan=0.0, w_image_gan=0.0)
    trainer.train()
    sup = np.array([r["sup"] for r in trainer.log_rows])
    per_epoch = sup.reshape(6, 8).mean(axis=1)
    assert per_epoch[-1] < per_epoch[0]
    smooth = np.convolve(per_epoch, np.ones(3) / 3, mode="valid")
    assert smooth[-1] < smooth[0]


def test_resume_reproduces_next_steps_bitwise(tmp_path):
    full, _ = make_trainer(tmp_path / "full", epochs=4, steps_per_epoch=3, seed=5)
    full.train()
    full_rows = full.log_rows

    part, _ = make_trainer(tmp_path / "part", epochs=2, steps_per_epoch=3, seed=5)
    part.train()
    state = tmp_path / "part" / "checkpoints" / "state_latest.pt"

    resumed, _ = make_trainer(tmp_path / "resumed", epochs=4, steps_per_epoch=3, seed=5)
    resumed.load_state(state)
    assert resumed.epoch == 2
    resumed.train()
    tail = resumed.log_rows
    assert len(tail) == 6
    for got, want in zip(tail, full_rows[6:]):
        assert got == want  # bitwise-equal floats


def test_translate_batch_identity_generator(tmp_path):
    trainer, src = make_trainer(tmp_path / "run", epochs=1, steps_per_epoch=1)
    # force the local generator to the exact identity field
    gd = trainer.nets["gd"]
    with torch.no_grad():
        gd.out.weight.zero_()
        gd.out.bias.fill_(identity_spacing(64))
    imgs = [s.image for s in src[:6]]
    masks = [s.mask for s in src[:6]]
    kps = [s.keypoints for s in src[:6]]
    out_imgs, out_masks, out_kps, fields = translate_batch(trainer, imgs, masks, kps)
    assert len(out_imgs) == 6
    for i in range(6):
        np.testing.assert_array_equal(out_masks[i], masks[i])  # STE recovers binary
        # inverse lookup lands on the nearest pixel: within half a pixel each axis
        np.testing.assert_allclose(out_kps[i].xy, kps[i].xy, atol=0.5 + 1e-6)
        assert field_identity_deviation(fields[i].phi) < 1e-6
        assert fields[i].provenance == "composed"


def test_translate_batch_deterministic(tmp_path):
    t1, src = make_trainer(tmp_path / "a", epochs=1, steps_per_epoch=2, seed=9)
    t2, _ = make_trainer(tmp_path / "b", epochs=1, steps_per_epoch=2, seed=9)
    t1.train()
    t2.train()
    imgs = [s.image for s in src[:4]]
    masks = [s.mask for s in src[:4]]
    kps = [s.keypoints for s in src[:4]]
    a = translate_batch(t1, imgs, masks, kps)
    b = translate_batch(t2, imgs, masks, kps)
    for x, y in zip(a[0], b[0]):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(a[2], b[2]):
        np.testing.assert_array_equal(x.xy, y.xy)


def test_estimate_global_transform_reports_forward_convention():
    stn = build_network(NetworkSpec("stn", in_size=64, isotropic_affine=True), seed=0)
    # plant a known sampling transform: rotation -10 deg, scale 1/1.15
    with torch.no_grad():
        target_rot = math.atanh(math.radians(-10.0) / stn.MAX_ROTATION)
        target_scale = math.atanh(math.log(1 / 1.15) / stn.MAX_LOG_SCALE)
        stn.head[-1].bias.copy_(torch.tensor([target_rot, target_scale, 0.0, 0.0]))
    imgs = np.random.RandomState(0).rand(8, 64, 64).astype(np.float32)
    est = estimate_global_transform(stn, list(imgs))
    assert est["scale"] == pytest.approx(1.15, abs=1e-3)
    assert est["rotation_deg"] == pytest.approx(10.0, abs=1e-3)


def test_batched_affine_grid_matches_identity():
    theta = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                          [[1.0, 0.0, 0.25], [0.0, 1.0, 0.0]]])
    grid = batched_affine_grid(theta, 4, 4)
    base = identity_grid(4, 4)
    assert torch.allclose(grid[0], base, atol=1e-7)
    assert torch.allclose(grid[1, ..., 0], base[..., 0] + 0.25, atol=1e-7)
