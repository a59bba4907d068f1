"""Learnable components: global affine regressor, local deformation-gradient
generator, silhouette-to-image U-Net, patch discriminators, and the stacked
hourglass pose network.

Each architecture is pinned by its conv schedule; receptive fields and logit
map resolutions are computed from the schedule rather than hard-coded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError
from .warp import check_finite

KINDS = ("stn", "deform_gen", "unet_gen", "patch_disc_shape", "patch_disc_image", "hourglass")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class NetworkSpec:
    """Architecture contract: kind, channel counts, width multiplier, and the
    input resolution the network is staged for (64 or 128)."""

    kind: str
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    in_size: int = 128
    num_stacks: int = 2          # hourglass only
    isotropic_affine: bool = False  # stn only: single scale instead of (sx, sy, shear)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.in_size not in (32, 64, 128, 256):
            raise ValueError(f"unsupported input size {self.in_size}")
        if self.kind == "hourglass" and self.num_stacks < 1:
            raise ValueError("hourglass needs at least one stack")

    def conv_schedule(self):
        """Layer list [(op, kernel, stride, dilation)] for RF/map arithmetic."""
        if self.kind == "deform_gen":
            sched = [("conv", 4, 2, 1), ("conv", 4, 2, 1)]
            sched += [("conv", 3, 1, 1)] * 6  # 3 residual blocks, 2 convs each
            sched += [("up", 2, 0, 0), ("conv", 3, 1, 1),
                      ("up", 2, 0, 0), ("conv", 3, 1, 1), ("conv", 1, 1, 1)]
            return sched
        if self.kind == "patch_disc_shape":
            return [("conv", 4, 2, 1), ("conv", 4, 2, 2), ("conv", 4, 2, 2),
                    ("conv", 4, 1, 1), ("conv", 4, 1, 1)]
        if self.kind == "patch_disc_image":
            return [("conv", 4, 2, 1), ("conv", 4, 2, 1), ("conv", 4, 1, 1)]
        return None

    @property
    def receptive_field_px(self) -> int:
        """One output unit's dependence span in input pixels. Encoder-decoder
        nets (stn/unet/hourglass) see the whole frame via their bottleneck."""
        sched = self.conv_schedule()
        if sched is None:
            return self.in_size
        return receptive_field(sched)

    def map_resolution(self, in_size: int | None = None) -> int:
        """Spatial size of a discriminator's patch-logit map:
        out = floor((in + 2p - d*(k-1) - 1) / s) + 1 per conv layer."""
        if self.kind not in ("patch_disc_shape", "patch_disc_image"):
            raise ValueError("map_resolution applies to patch discriminators")
        n = in_size or self.in_size
        for op, k, s, d in self.conv_schedule():
            p = _padding(k, d)
            n = (n + 2 * p - d * (k - 1) - 1) // s + 1
        return n


def receptive_field(schedule) -> int:
    rf, jump = 1.0, 1.0
    for op, k, s, d in schedule:
        if op == "up":
            jump /= k
        else:
            rf += d * (k - 1) * jump
            jump *= s
    return int(round(rf))


def _padding(k, d):
    return d * (k - 1) // 2


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class GlobalAffineRegressor(nn.Module):
    """Regresses one 2x3 affine per image from raw params
    (rotation, log-scales, shear, translation), so any parameter value yields
    a positive-determinant 2x2 block. The zero-initialized final layer makes
    the output exactly the identity transform at step 0. Raw params are
    tanh-bounded so adversarial updates cannot push the transform into
    degenerate regimes (zero scale, wild rotation).
    """

    MAX_ROTATION = math.pi / 4
    MAX_LOG_SCALE = math.log(1.5)
    MAX_SHEAR = 0.3
    MAX_TRANSLATION = 0.5

    def __init__(self, in_channels=1, width=16, isotropic=False):
        super().__init__()
        self.isotropic = isotropic
        chans = [in_channels, width, width * 2, width * 4, width * 4, width * 4]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, 1, 1), nn.SELU(inplace=True),
                       nn.MaxPool2d(2)]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        n_params = 4 if isotropic else 6
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(width * 4 * 16, 32), nn.SELU(inplace=True),
            nn.Linear(32, n_params),
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, img):
        raw = self.head(self.pool(self.features(img)))
        check_finite(raw, "stn raw params")
        return self.compose(raw)

    def compose(self, raw):
        rot = self.MAX_ROTATION * torch.tanh(raw[:, 0])
        if self.isotropic:
            log_sx = log_sy = self.MAX_LOG_SCALE * torch.tanh(raw[:, 1])
            shear = torch.zeros_like(rot)
            t = self.MAX_TRANSLATION * torch.tanh(raw[:, 2:4])
        else:
            log_sx = self.MAX_LOG_SCALE * torch.tanh(raw[:, 1])
            log_sy = self.MAX_LOG_SCALE * torch.tanh(raw[:, 2])
            shear = self.MAX_SHEAR * torch.tanh(raw[:, 3])
            t = self.MAX_TRANSLATION * torch.tanh(raw[:, 4:6])
        cos, sin = torch.cos(rot), torch.sin(rot)
        sx, sy = torch.exp(log_sx), torch.exp(log_sy)
        # R(rot) @ [[sx, shear], [0, sy]]; det = sx * sy > 0 always
        a00 = cos * sx
        a01 = cos * shear - sin * sy
        a10 = sin * sx
        a11 = sin * shear + cos * sy
        row0 = torch.stack([a00, a01, t[:, 0]], dim=1)
        row1 = torch.stack([a10, a11, t[:, 1]], dim=1)
        return torch.stack([row0, row1], dim=1)


class DeformationGradientGenerator(nn.Module):
    """Fully convolutional map from an image to raw spacing pre-activations
    (B, 2, H, W); clamp + integration live in warp. 64 px receptive field at
    full resolution. The final layer starts near (but not at) a constant
    output so the identity-pretraining phase has visible work to do while
    keeping every unit inside the clamp's linear region.
    """

    def __init__(self, in_channels=1, width=64):
        super().__init__()
        w = width
        self.down = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, 2, 1), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, w * 2, 4, 2, 1), nn.InstanceNorm2d(w * 2), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(w * 2) for _ in range(3)])
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w * 2, w, 3, 1, 1), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w // 2, 3, 1, 1), nn.InstanceNorm2d(w // 2), nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(w // 2, 2, 1)
        with torch.no_grad():
            self.out.weight.mul_(0.01)
            self.out.bias.fill_(0.03)  # clamp interior, distinct from identity spacing

    def forward(self, img):
        x = self.up(self.blocks(self.down(img)))
        return check_finite(self.out(x), "deform_gen pre-activations")


class UNetGenerator(nn.Module):
    """Mask-to-image generator with skip connections; depth log2(in_size) so
    the bottleneck is 1x1. Resize-convolutions upsample; sigmoid output keeps
    values in [0, 1].
    """

    def __init__(self, in_channels=1, out_channels=1, base_width=64, in_size=128):
        super().__init__()
        depth = int(math.log2(in_size))
        if 2 ** depth != in_size:
            raise ValueError(f"U-Net input size must be a power of two, got {in_size}")
        widths = [min(base_width * 2 ** i, 512) for i in range(depth)]
        self.downs = nn.ModuleList()
        cin = in_channels
        for i, wd in enumerate(widths):
            block = [nn.Conv2d(cin, wd, 4, 2, 1)]
            if 0 < i < depth - 1:  # no norm on the first layer or the 1x1 bottleneck
                block += [nn.InstanceNorm2d(wd)]
            block += [nn.LeakyReLU(0.2, inplace=True)]
            self.downs.append(nn.Sequential(*block))
            cin = wd
        self.ups = nn.ModuleList()
        for i in reversed(range(depth)):
            wd = widths[i]
            cout = widths[i - 1] if i > 0 else base_width
            cat = wd if i == depth - 1 else wd * 2
            block = [nn.Upsample(scale_factor=2, mode="nearest"),
                     nn.Conv2d(cat, cout, 3, 1, 1)]
            if i > 0:
                block += [nn.InstanceNorm2d(cout)]
            block += [nn.ReLU(inplace=True)]
            self.ups.append(nn.Sequential(*block))
        self.final = nn.Conv2d(base_width, out_channels, 3, 1, 1)

    def forward(self, x):
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        x = self.ups[0](skips[-1])
        for i, up in enumerate(self.ups[1:], start=2):
            x = up(torch.cat([x, skips[-i]], dim=1))
        return check_finite(torch.sigmoid(self.final(x)), "unet output")


class PatchDiscriminator(nn.Module):
    """Patch-logit discriminator. The shape variant is a five-layer stack with
    dilation 2 in layers 2-3 (wide view of binary silhouettes); the image
    variant is the small three-layer stack that judges local texture only.
    """

    def __init__(self, kind, in_channels=1, base_width=64):
        super().__init__()
        w = base_width
        if kind == "patch_disc_shape":
            cfg = [(in_channels, w, 2, 1, False), (w, w * 2, 2, 2, True),
                   (w * 2, w * 4, 2, 2, True), (w * 4, min(w * 8, 512), 1, 1, True)]
            last_in = min(w * 8, 512)
        elif kind == "patch_disc_image":
            cfg = [(in_channels, w, 2, 1, False), (w, w * 2, 2, 1, True)]
            last_in = w * 2
        else:
            raise ValueError(f"not a discriminator kind: {kind}")
        layers = []
        for cin, cout, stride, dil, norm in cfg:
            layers.append(nn.Conv2d(cin, cout, 4, stride, _padding(4, dil), dilation=dil))
            if norm:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        layers.append(nn.Conv2d(last_in, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return check_finite(self.model(x), "discriminator logits")


class _HgResidual(nn.Module):
    def __init__(self, ch):
        super().__init__()
        half = ch // 2
        self.body = nn.Sequential(
            nn.BatchNorm2d(ch), nn.ReLU(inplace=True), nn.Conv2d(ch, half, 1),
            nn.BatchNorm2d(half), nn.ReLU(inplace=True), nn.Conv2d(half, half, 3, 1, 1),
            nn.BatchNorm2d(half), nn.ReLU(inplace=True), nn.Conv2d(half, ch, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class _Hourglass(nn.Module):
    def __init__(self, ch, depth):
        super().__init__()
        self.depth = depth
        self.up = nn.ModuleList([_HgResidual(ch) for _ in range(depth)])
        self.low_in = nn.ModuleList([_HgResidual(ch) for _ in range(depth)])
        self.low_out = nn.ModuleList([_HgResidual(ch) for _ in range(depth)])
        self.bottom = _HgResidual(ch)

    def forward(self, x):
        return self._level(x, 0)

    def _level(self, x, d):
        up = self.up[d](x)
        low = self.low_in[d](F.max_pool2d(x, 2))
        low = self.bottom(low) if d == self.depth - 1 else self._level(low, d + 1)
        low = self.low_out[d](low)
        return up + F.interpolate(low, scale_factor=2, mode="nearest")


class StackedHourglass(nn.Module):
    """Two-stack hourglass pose network: input H x W, heatmaps at H/4 x W/4.

    Returns one heatmap stack per hourglass module so training can apply
    intermediate supervision; the last entry is the final prediction.
    """

    def __init__(self, in_channels=1, num_joints=30, width=64, num_stacks=2, in_size=128):
        super().__init__()
        w = width
        hm_res = in_size // 4
        depth = min(4, int(math.log2(hm_res)) - 1)
        self.front = nn.Sequential(
            nn.Conv2d(in_channels, w, 7, 2, 3), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            _HgResidual(w), nn.MaxPool2d(2), _HgResidual(w),
        )
        self.stacks = nn.ModuleList([_Hourglass(w, depth) for _ in range(num_stacks)])
        self.features = nn.ModuleList([
            nn.Sequential(_HgResidual(w), nn.Conv2d(w, w, 1),
                          nn.BatchNorm2d(w), nn.ReLU(inplace=True))
            for _ in range(num_stacks)])
        self.heads = nn.ModuleList([nn.Conv2d(w, num_joints, 1) for _ in range(num_stacks)])
        self.merge_feat = nn.ModuleList([nn.Conv2d(w, w, 1) for _ in range(num_stacks - 1)])
        self.merge_pred = nn.ModuleList([nn.Conv2d(num_joints, w, 1) for _ in range(num_stacks - 1)])

    def forward(self, img):
        x = self.front(img)
        outputs = []
        for i, (hg, feat, head) in enumerate(zip(self.stacks, self.features, self.heads)):
            y = feat(hg(x))
            pred = head(y)
            outputs.append(check_finite(pred, f"hourglass stack {i} heatmaps"))
            if i < len(self.stacks) - 1:
                x = x + self.merge_feat[i](y) + self.merge_pred[i](pred)
        return outputs


# ---------------------------------------------------------------------------
# Factory & checkpoints
# ---------------------------------------------------------------------------


def build_network(spec: NetworkSpec, seed: int = 0) -> nn.Module:
    """Deterministically seeded construction of the module for a spec."""
    torch.manual_seed(seed)
    if spec.kind == "stn":
        return GlobalAffineRegressor(spec.in_channels, max(spec.base_width // 4, 8),
                                     isotropic=spec.isotropic_affine)
    if spec.kind == "deform_gen":
        return DeformationGradientGenerator(spec.in_channels, spec.base_width)
    if spec.kind == "unet_gen":
        return UNetGenerator(spec.in_channels, spec.out_channels,
                             spec.base_width, spec.in_size)
    if spec.kind in ("patch_disc_shape", "patch_disc_image"):
        return PatchDiscriminator(spec.kind, spec.in_channels, spec.base_width)
    if spec.kind == "hourglass":
        return StackedHourglass(spec.in_channels, spec.out_channels,
                                spec.base_width, spec.num_stacks, spec.in_size)
    raise ValueError(f"unknown network kind {spec.kind!r}")


def save_checkpoint(path, module: nn.Module, spec: NetworkSpec, seed: int,
                    step: int, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": asdict(spec),
        "seed": seed,
        "step": step,
        "state": module.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (module, meta) with meta holding spec/seed/step/extra."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    spec = NetworkSpec(**payload["spec"])
    module = build_network(spec, payload["seed"])
    module.load_state_dict(payload["state"])
    meta = {"spec": spec, "seed": payload["seed"], "step": payload["step"],
            "extra": payload["extra"]}
    return module, meta
