"""Differentiable geometric core: affine transforms, foldover-free deformation
fields built by integrating clamped spatial gradients, bilinear sampling,
straight-through thresholding, and consistent warping of images, heatmaps and
keypoints.

Coordinate convention (used everywhere in this package): normalized
coordinates in [-1, 1], pixel center i of an N-long axis sits at
-1 + 2*i/(N-1), so the identity spacing between neighbouring pixels is
2/(N-1). Deformation fields store absolute *source* coordinates: output pixel
(i, j) reads the source image at phi[i, j] = (x, y).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError

# Clamp range for spatial gradients: strictly positive spacings no larger
# than G_MAX normalized units per pixel step. At 128 px the identity spacing
# is 2/127 ~ 0.0157, so G_MAX allows up to ~6.35x local stretch.
G_MAX = 0.1
G_EPS = 1e-6


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        return t.to(dtype)
    return t if t.is_floating_point() else t.to(torch.float32)


def identity_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(h, w, 2) grid of normalized pixel-center coordinates, x before y."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def identity_spacing(n: int) -> float:
    """Distance between neighbouring pixel centers on an n-long axis."""
    return 2.0 / (n - 1)


@dataclass(frozen=True)
class AffineParams:
    """Global 2x3 affine mapping normalized output coords to source coords.

    The 2x2 block must have strictly positive determinant (orientation
    preserving: rotation/scale/shear but no reflection).
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if not det > 0:
            raise ValueError(f"affine 2x2 block must have positive determinant, got {det}")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def determinant(self) -> float:
        m = self.matrix
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])

    def scale_rotation(self) -> tuple[float, float]:
        """(isotropic scale, rotation in degrees) via polar-style decomposition.

        Scale is sqrt(det); rotation is the angle of the orthogonal factor.
        """
        m = self.matrix[:, :2]
        angle = np.degrees(np.arctan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1]))
        return float(np.sqrt(self.determinant)), float(angle)

    def tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.matrix, dtype=dtype, device=device)


@dataclass
class GradientField:
    """Strictly positive per-pixel spacings of a monotone deformation field.

    gx, gy: (..., H, W) tensors, every entry in (0, G_MAX]. Integrating gx
    along a row gives a strictly increasing x-coordinate sequence; same for
    gy along columns.
    """

    gx: torch.Tensor
    gy: torch.Tensor

    def __post_init__(self):
        self.gx = _as_tensor(self.gx)
        self.gy = _as_tensor(self.gy)
        if self.gx.shape != self.gy.shape:
            raise ValueError("gx and gy must share a shape")
        with torch.no_grad():
            if not torch.isfinite(self.gx).all() or not torch.isfinite(self.gy).all():
                raise ValueError("gradient field entries must be finite")
            lo = min(self.gx.min().item(), self.gy.min().item())
            hi = max(self.gx.max().item(), self.gy.max().item())
        if lo <= 0:
            raise ValueError(f"gradient field entries must be > 0, found {lo}")
        if hi > G_MAX + 1e-7:  # small headroom for float32 rounding of the cap
            raise ValueError(f"gradient field entries must be <= {G_MAX}, found {hi}")

    @property
    def shape(self):
        return self.gx.shape


@dataclass
class DeformationField:
    """Per-pixel absolute source coordinates plus the global affine.

    phi: (..., H, W, 2) tensor of normalized source coordinates, x before y.
    theta records the global component baked into phi (identity if none).
    provenance is one of {"identity", "integrated", "composed"}.
    """

    phi: torch.Tensor
    theta: AffineParams = dc_field(default_factory=AffineParams.identity)
    provenance: str = "identity"

    def __post_init__(self):
        self.phi = _as_tensor(self.phi)
        if self.phi.shape[-1] != 2:
            raise ValueError(f"phi must have a trailing (x, y) axis, got {tuple(self.phi.shape)}")
        if self.provenance not in ("identity", "integrated", "composed"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.phi.shape[-3:-1])

    @classmethod
    def identity(cls, h: int, w: int, dtype=torch.float32, device=None) -> "DeformationField":
        return cls(identity_grid(h, w, dtype, device))

    def detach(self) -> "DeformationField":
        return DeformationField(self.phi.detach(), self.theta, self.provenance)

    def numpy_phi(self) -> np.ndarray:
        return self.phi.detach().cpu().numpy()

    def at_resolution(self, h: int, w: int) -> "DeformationField":
        """Resample phi onto an h x w grid (coordinates are resolution-free)."""
        sh, sw = self.spatial_shape
        if (sh, sw) == (h, w):
            return self
        p = self.phi
        squeeze = p.dim() == 3
        if squeeze:
            p = p.unsqueeze(0)
        p = p.permute(0, 3, 1, 2)  # (B, 2, H, W)
        p = F.interpolate(p, size=(h, w), mode="bilinear", align_corners=True)
        p = p.permute(0, 2, 3, 1)
        if squeeze:
            p = p.squeeze(0)
        return DeformationField(p, self.theta, self.provenance)


@dataclass
class HeatmapStack:
    """J-channel stack of nonnegative per-joint probability maps.

    maps: (J, h, w) array; sigma2 is the Gaussian variance used at rendering
    (heatmap-pixel units); scale is image resolution / heatmap resolution.
    """

    maps: np.ndarray
    sigma2: float = 0.5
    scale: int = 4

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3:
            raise ValueError(f"heatmap stack must be (J, h, w), got {self.maps.shape}")
        if (self.maps < 0).any():
            raise ValueError("heatmap values must be nonnegative")

    @property
    def num_joints(self) -> int:
        return self.maps.shape[0]

    def argmax_px(self) -> np.ndarray:
        """(J, 2) array of (x, y) peak locations in heatmap pixels, row-major tie-break."""
        j, h, w = self.maps.shape
        flat = self.maps.reshape(j, -1).argmax(axis=1)
        return np.stack([flat % w, flat // w], axis=1).astype(np.float64)


@dataclass
class KeypointSet:
    """Ordered named 2D keypoints in image-pixel units with visibility flags."""

    names: list[str]
    xy: np.ndarray
    visible: np.ndarray = None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(len(self.names), 2)
        if not np.isfinite(self.xy).all():
            raise ValueError("keypoint coordinates must be finite")
        if self.visible is None:
            self.visible = np.ones(len(self.names), dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool).reshape(len(self.names))

    def __len__(self):
        return len(self.names)


# ---------------------------------------------------------------------------
# Gradient-field parameterization
# ---------------------------------------------------------------------------


def clamp_gradients(raw) -> GradientField:
    """Clamp raw (..., H, W, 2) pre-activations into valid positive spacings.

    Hard saturation at both ends: values are forced into [G_EPS, G_MAX]; the
    tiny positive floor keeps cells from collapsing to zero width. Gradients
    flow only through the linear interior (hardtanh-style).
    """
    raw = _as_tensor(raw)
    if raw.shape[-1] != 2:
        raise ValueError(f"expected trailing (x, y) axis, got shape {tuple(raw.shape)}")
    clamped = torch.clamp(raw, min=G_EPS, max=G_MAX)
    return GradientField(gx=clamped[..., 0], gy=clamped[..., 1])


def integrate_gradients(g: GradientField, anchor: Sequence[float] = (0.0, 0.0)) -> DeformationField:
    """Recover a monotone deformation field by cumulative summation of spacings.

    phi.x[i, j] is the inclusive cumulative sum of gx along row i, phi.y the
    cumulative sum of gy down column j. The raw sums are then shifted so that
    the mean of phi equals `anchor` (default: the identity-grid mean, which
    keeps global translation out of the local field). For constant spacings
    equal to the identity spacing this reproduces the identity grid exactly.
    """
    phi_x = torch.cumsum(g.gx, dim=-1)
    phi_y = torch.cumsum(g.gy, dim=-2)
    phi_x = phi_x - phi_x.mean(dim=(-2, -1), keepdim=True) + anchor[0]
    phi_y = phi_y - phi_y.mean(dim=(-2, -1), keepdim=True) + anchor[1]
    phi = torch.stack([phi_x, phi_y], dim=-1)
    return DeformationField(phi, AffineParams.identity(), "integrated")


def apply_affine(theta, target):
    """Apply a global affine to coordinates or compose it into a field.

    theta maps normalized output coordinates c to source coordinates
    A @ c + t. Accepts an AffineParams or a raw (2, 3) array. `target` may be
    an (..., 2) coordinate array (returns mapped coordinates of the same kind)
    or a DeformationField (returns a composed field with phi updated
    pointwise, matching the two-stage pipeline: local warp of the globally
    transformed image).
    """
    if not isinstance(theta, AffineParams):
        theta = AffineParams(np.asarray(theta, dtype=np.float64))
    if isinstance(target, DeformationField):
        m = theta.tensor(target.phi.dtype, target.phi.device)
        phi = target.phi @ m[:, :2].T + m[:, 2]
        return DeformationField(phi, theta, "composed")
    want_numpy = not isinstance(target, torch.Tensor)
    coords = _as_tensor(target, dtype=torch.float64 if want_numpy else None)
    m = theta.tensor(coords.dtype, coords.device)
    out = coords @ m[:, :2].T + m[:, 2]
    return out.numpy() if want_numpy else out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def bilinear_sample(src, field, padding: str = "zero"):
    """Warp a raster by a deformation field with bilinear interpolation.

    out[i, j] interpolates src at the normalized source coordinate
    phi[i, j]; samples falling outside [-1, 1] read zero. Differentiable in
    both the source values and the field. src may be (H, W), (C, H, W) or
    (B, C, H, W); numpy in gives numpy out. The field's spatial shape fixes
    the output resolution.
    """
    if padding != "zero":
        raise ValueError("only zero padding is supported")
    phi = field.phi if isinstance(field, DeformationField) else _as_tensor(field)
    want_numpy = not isinstance(src, torch.Tensor)
    x = _as_tensor(src)

    ndim = x.dim()
    if ndim == 2:
        xb = x.unsqueeze(0).unsqueeze(0)
    elif ndim == 3:
        xb = x.unsqueeze(0)
    elif ndim == 4:
        xb = x
    else:
        raise ValueError(f"source must be 2D-4D, got {ndim}D")

    if phi.dim() == 3:
        grid = phi.unsqueeze(0).expand(xb.shape[0], -1, -1, -1)
    elif phi.dim() == 4:
        grid = phi
        if grid.shape[0] != xb.shape[0]:
            raise ValueError(
                f"batch mismatch: source {xb.shape[0]} vs field {grid.shape[0]}")
    else:
        raise ValueError(f"field must be (H, W, 2) or (B, H, W, 2), got {tuple(phi.shape)}")

    common = torch.promote_types(xb.dtype, grid.dtype)
    out = F.grid_sample(xb.to(common), grid.to(common), mode="bilinear",
                        padding_mode="zeros", align_corners=True)

    if ndim == 2:
        out = out.squeeze(0).squeeze(0)
    elif ndim == 3:
        out = out.squeeze(0)
    return out.detach().numpy() if want_numpy else out


class _ThresholdSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft, tau):
        return (soft > tau).to(soft.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        # straight-through: the threshold acts as identity for gradients
        return grad_output, None


def threshold_ste(soft, tau: float = 0.5):
    """Binarize with a straight-through backward pass.

    Forward: 1 where soft > tau else 0 (strict: values exactly at tau map to
    0). Backward: incoming gradients pass to `soft` unchanged.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if isinstance(soft, torch.Tensor):
        return _ThresholdSTE.apply(soft, tau)
    return (np.asarray(soft) > tau).astype(np.float32)


# ---------------------------------------------------------------------------
# Consistent warping of annotations
# ---------------------------------------------------------------------------


def warp_heatmaps(h: HeatmapStack, field: DeformationField) -> HeatmapStack:
    """Warp every heatmap channel with the field that warped the image.

    The field lives at image resolution; it is resampled down by the
    heatmap's scale factor so annotation and image stay in correspondence.
    """
    fh, fw = field.spatial_shape
    j, hh, hw = h.maps.shape
    if (fh, fw) != (hh, hw):
        if fh != hh * h.scale or fw != hw * h.scale:
            raise ValueError(
                f"field {fh}x{fw} does not match heatmaps {hh}x{hw} at scale {h.scale}")
        field = field.at_resolution(hh, hw)
    warped = bilinear_sample(h.maps, field)
    warped = np.clip(warped, 0.0, None) if isinstance(warped, np.ndarray) else warped.clamp(min=0)
    return HeatmapStack(maps=np.asarray(warped), sigma2=h.sigma2, scale=h.scale)


def warp_keypoints(k: KeypointSet, field: DeformationField,
                   miss_distance: float = G_MAX) -> KeypointSet:
    """Transfer keypoints through a field by inverse lookup.

    phi stores output->source correspondence, so each keypoint (a source
    location) moves to the output pixel whose phi entry is nearest to it in
    normalized coordinates. Exact for monotone fields. Keypoints whose source
    location lies outside the image, or farther than `miss_distance` from
    every phi entry (the field never samples near them), are marked invisible
    rather than dropped.
    """
    phi = field.phi
    if phi.dim() != 3:
        raise ValueError("warp_keypoints expects an unbatched (H, W, 2) field")
    h, w = field.spatial_shape
    phi_np = field.numpy_phi().reshape(-1, 2)

    # image px -> normalized
    kx = 2.0 * k.xy[:, 0] / (w - 1) - 1.0
    ky = 2.0 * k.xy[:, 1] / (h - 1) - 1.0
    inside = (np.abs(kx) <= 1.0) & (np.abs(ky) <= 1.0)

    d2 = (phi_np[None, :, 0] - kx[:, None]) ** 2 + (phi_np[None, :, 1] - ky[:, None]) ** 2
    idx = d2.argmin(axis=1)
    hit = np.sqrt(d2[np.arange(len(idx)), idx]) <= miss_distance

    out_xy = np.stack([(idx % w).astype(np.float64), (idx // w).astype(np.float64)], axis=1)
    visible = k.visible & inside & hit
    return KeypointSet(names=list(k.names), xy=out_xy, visible=visible)


# ---------------------------------------------------------------------------
# Serialization (used by the CLI's --dump-fields)
# ---------------------------------------------------------------------------

_FIELD_MAGIC = b"MPDF"
_FIELD_VERSION = 1


def save_field(path, field: DeformationField) -> None:
    """Binary dump: magic, version, H, W, theta row-major (f64), phi row-major
    float32 with x before y per pixel."""
    phi = field.numpy_phi()
    if phi.ndim != 3:
        raise ValueError("save_field expects an unbatched field")
    h, w, _ = phi.shape
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<III", _FIELD_VERSION, h, w))
        fh.write(field.theta.matrix.astype("<f8").tobytes())
        fh.write(phi.astype("<f4").tobytes())


def load_field(path) -> DeformationField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FIELD_MAGIC:
            raise ValueError(f"not a deformation-field file: bad magic {magic!r}")
        version, h, w = struct.unpack("<III", fh.read(12))
        if version != _FIELD_VERSION:
            raise ValueError(f"unsupported field file version {version}")
        theta = np.frombuffer(fh.read(6 * 8), dtype="<f8").reshape(2, 3)
        phi = np.frombuffer(fh.read(h * w * 2 * 4), dtype="<f4").reshape(h, w, 2)
    return DeformationField(torch.from_numpy(phi.copy()), AffineParams(theta.copy()), "composed")


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    """Fail fast with a diagnostic when activations go non-finite."""
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NumericalError(f"{what}: {bad}/{t.numel()} non-finite values")
    return t
