"""Procedural synthetic sources, silhouette extraction, dataset layout, and
the sim2sim verification benchmark with sealed ground truth.

On-disk layout: <root>/<domain>/<split>/{images,masks,annotations.txt} with a
manifest.json at the root recording seeds, counts and content hashes. Images
are 8-bit grayscale PNGs mapped linearly to [0, 1]; masks 0/255 PNGs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ConfigError
from .pose import skeleton_for
from .warp import KeypointSet

log = logging.getLogger(__name__)

ANNOTATION_HEADER = "morphpose-annotations v1"
SEALED_MARKER = "sealed"


# ---------------------------------------------------------------------------
# Synthetic specs and generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Template + pose-sampler description for one synthetic domain.

    Geometry is parameterized in fractions of the image size so specs work at
    any resolution. `affine` (scale, rotation_deg, tx, ty in normalized
    coordinates) is applied to the sampled geometry before rasterization;
    the benchmark uses it as the hidden source->target transform.
    """

    animal: str
    size: int = 128
    seed: int = 0
    length_frac: float = 0.55          # worm body length / image size
    half_width_frac: float = 0.032     # worm half-width / image size
    curvature_range: tuple = (-0.8, 0.8)   # total bend angle, radians
    rotation_range_deg: tuple = (-25.0, 25.0)
    translation_frac: float = 0.08     # max |offset| of body center, per axis
    appearance: str = "flat"           # flat | shaded
    intensity: float = 0.8
    affine: tuple | None = None        # (scale, rotation_deg, tx, ty), normalized
    source_dir: str | None = None      # fly ingestion directory

    def __post_init__(self):
        if self.animal not in ("worm", "fish", "fly"):
            raise ValueError(f"unknown animal class {self.animal!r}")
        if self.appearance not in ("flat", "shaded"):
            raise ValueError(f"unknown appearance {self.appearance!r}")
        if self.length_frac <= 0:
            raise ValueError("degenerate template: body length must be positive")


@dataclass
class SyntheticSample:
    image: np.ndarray
    mask: np.ndarray
    keypoints: KeypointSet


def _item_rng(seed: int, index: int) -> np.random.RandomState:
    # stable per-item stream so generation can shard by index
    return np.random.RandomState((seed * 1000003 + index) % (2 ** 32))


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk so save/load round-trips exactly."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


OPENING_STRUCTURE = np.ones((3, 3), dtype=bool)


def _rasterize_capsules(size, points, half_widths):
    """Distance-to-polyline rasterization; returns (mask, distance, local hw).

    points: (P, 2) pixel coordinates; half_widths: per-point radius in px.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    best = np.full(pix.shape[0], np.inf)
    best_hw = np.zeros(pix.shape[0])
    for i in range(len(points) - 1):
        a, b = points[i], points[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip((pix - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(pix))
        proj = a + t[:, None] * ab
        d = np.linalg.norm(pix - proj, axis=1)
        hw = half_widths[i] + t * (half_widths[i + 1] - half_widths[i])
        closer = d - hw < best - best_hw
        best[closer] = d[closer]
        best_hw[closer] = hw[closer]
    dist = best.reshape(size, size)
    hw = best_hw.reshape(size, size)
    mask = dist <= hw
    # keep masks invariant under the 3x3 opening used by silhouette cleanup
    mask = ndimage.binary_opening(mask, structure=OPENING_STRUCTURE)
    return mask, dist, hw


def _shade(mask, dist, hw, spec: SyntheticSpec) -> np.ndarray:
    if spec.appearance == "flat":
        img = mask * spec.intensity
    else:
        rel = np.clip(1.0 - dist / np.maximum(hw, 1e-9), 0.0, 1.0)
        img = mask * (0.35 + 0.6 * rel)
    return _quantize(img)


def _apply_spec_affine(spec, pts_norm, half_width_norm):
    if spec.affine is None:
        return pts_norm, half_width_norm
    s, rot_deg, tx, ty = spec.affine
    a = np.radians(rot_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return pts_norm @ (s * rot).T + np.array([tx, ty]), half_width_norm * s


def _norm_to_px(pts_norm, size):
    return (pts_norm + 1.0) / 2.0 * (size - 1)


def _gen_worm(spec: SyntheticSpec, rng) -> SyntheticSample:
    n_seg = 48
    skel = skeleton_for("worm")
    curv = rng.uniform(*spec.curvature_range)
    rot = np.radians(rng.uniform(*spec.rotation_range_deg))
    off = rng.uniform(-spec.translation_frac, spec.translation_frac, size=2) * 2.0

    # constant-curvature centerline in normalized coords, centered at origin
    s = np.linspace(0.0, 1.0, n_seg + 1)
    angles = rot + curv * (s - 0.5)
    step = 2.0 * spec.length_frac / n_seg  # length_frac of the [-1,1] span
    dirs = np.stack([np.cos(angles[:-1]), np.sin(angles[:-1])], axis=1) * step
    pts = np.vstack([[0.0, 0.0], np.cumsum(dirs, axis=0)])
    pts -= pts.mean(axis=0)
    pts += off

    hw_norm = spec.half_width_frac * 2.0
    pts, hw_norm = _apply_spec_affine(spec, pts, hw_norm)

    pts_px = _norm_to_px(pts, spec.size)
    hw_px = np.full(len(pts_px), hw_norm / 2.0 * (spec.size - 1))
    mask, dist, hw = _rasterize_capsules(spec.size, pts_px, hw_px)
    img = _shade(mask, dist, hw, spec)

    # 7 keypoints equispaced in arc length: endpoints + 5 interior
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts_px, axis=0), axis=1))])
    targets = np.linspace(0.0, arc[-1], skel.num_joints)
    kp_xy = np.stack([np.interp(targets, arc, pts_px[:, 0]),
                      np.interp(targets, arc, pts_px[:, 1])], axis=1)
    kps = KeypointSet(names=list(skel.joint_names), xy=kp_xy)
    return SyntheticSample(image=img, mask=mask.astype(np.uint8), keypoints=kps)


def _gen_fish(spec: SyntheticSpec, rng) -> SyntheticSample:
    skel = skeleton_for("fish")
    rot = np.radians(rng.uniform(*spec.rotation_range_deg))
    off = rng.uniform(-spec.translation_frac, spec.translation_frac, size=2) * 2.0
    bend = rng.uniform(*spec.curvature_range)

    body_len = spec.length_frac * 0.9
    body_hw = spec.half_width_frac * 4.0
    tail_len = spec.length_frac * 0.8

    # template along +x: ellipse-ish head tapering into a curved tail polyline
    n = 24
    t = np.linspace(0.0, 1.0, n)
    body_x = t * body_len
    body_y = np.zeros(n)
    body_w = body_hw * np.sqrt(np.clip(1.0 - ((t - 0.35) / 0.65) ** 2, 0.04, 1.0))
    ang = bend * np.linspace(0.0, 1.0, n)
    tail_x = body_len + np.cumsum(np.cos(ang)) * (tail_len / n)
    tail_y = np.cumsum(np.sin(ang)) * (tail_len / n)
    tail_w = np.linspace(body_w[-1], 0.004, n)

    pts = np.stack([np.concatenate([body_x, tail_x]),
                    np.concatenate([body_y, tail_y])], axis=1)
    widths = np.concatenate([body_w, tail_w])
    eye_span = body_hw * 0.55
    eyes = np.array([[body_len * 0.18, -eye_span], [body_len * 0.18, eye_span]])
    tail_tip = pts[-1]

    rotm = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    center = pts.mean(axis=0)
    pts = (pts - center) @ rotm.T + off
    eyes = (eyes - center) @ rotm.T + off
    tail_tip = (tail_tip - center) @ rotm.T + off

    hw_scale = 1.0
    if spec.affine is not None:
        s, rot_deg, tx, ty = spec.affine
        a = np.radians(rot_deg)
        m = s * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        pts = pts @ m.T + [tx, ty]
        eyes = eyes @ m.T + [tx, ty]
        tail_tip = tail_tip @ m.T + [tx, ty]
        hw_scale = s

    pts_px = _norm_to_px(pts, spec.size)
    widths_px = widths * hw_scale / 2.0 * (spec.size - 1)
    mask, dist, hw = _rasterize_capsules(spec.size, pts_px, widths_px)
    img = _shade(mask, dist, hw, spec)

    kp_xy = _norm_to_px(np.vstack([eyes, tail_tip[None]]), spec.size)
    kps = KeypointSet(names=list(skel.joint_names), xy=kp_xy)
    return SyntheticSample(image=img, mask=mask.astype(np.uint8), keypoints=kps)


def _ingest_fly(spec: SyntheticSpec, n: int):
    if spec.source_dir is None:
        raise ConfigError("fly generation ingests pre-rendered frames; set source_dir")
    root = Path(spec.source_dir)
    records = read_annotations(root / "annotations.txt")
    if len(records) < n:
        raise ConfigError(f"fly source directory holds {len(records)} items, need {n}")
    out = []
    for rec in records[:n]:
        img = load_image(root / rec["image"])
        mask_path = root / "masks" / Path(rec["image"]).name
        mask = (load_image(mask_path) > 0.5).astype(np.uint8)
        out.append(SyntheticSample(image=img, mask=mask, keypoints=rec["keypoints"]))
    return out


def gen_synthetic(spec: SyntheticSpec, n: int):
    """Deterministically generate n samples (same seed -> bitwise outputs)."""
    if spec.animal == "fly":
        return _ingest_fly(spec, n)
    gen = _gen_worm if spec.animal == "worm" else _gen_fish
    return [gen(spec, _item_rng(spec.seed, i)) for i in range(n)]


# ---------------------------------------------------------------------------
# Silhouette extraction
# ---------------------------------------------------------------------------


def extract_silhouette(img: np.ndarray, bg="black", tol: float = 0.02,
                       roi: np.ndarray | None = None) -> np.ndarray:
    """Foreground mask by background keying plus a 3x3 morphological opening.

    bg is "black" or ("keyed", value) for a non-zero constant background.
    An empty result is returned as-is after a warning; callers skip such
    items from training.
    """
    img = np.asarray(img, dtype=np.float32)
    if bg == "black":
        raw = img > tol
    elif isinstance(bg, tuple) and bg[0] == "keyed":
        raw = np.abs(img - float(bg[1])) > tol
    else:
        raise ValueError(f"unknown background spec {bg!r}")
    if roi is not None:
        raw &= np.asarray(roi, dtype=bool)
    mask = ndimage.binary_opening(raw, structure=OPENING_STRUCTURE)
    if not mask.any():
        log.warning("silhouette extraction produced an empty mask; item should be skipped")
    return mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG / annotation IO
# ---------------------------------------------------------------------------


def save_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img, dtype=np.float32), 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0)


def save_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return (np.asarray(im, dtype=np.uint8) > 127).astype(np.uint8)


def write_annotations(path, records, animal: str, sealed: bool = False) -> None:
    """records: iterable of (image_relpath, KeypointSet)."""
    lines = [ANNOTATION_HEADER]
    if sealed:
        lines.append(SEALED_MARKER)
    for rel, kps in records:
        joints = ";".join(
            f"{name},{float(x)!r},{float(y)!r},{int(v)}"
            for name, (x, y), v in zip(kps.names, kps.xy, kps.visible))
        lines.append(f"{rel}\t{animal}\t{joints}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_annotations(path, allow_sealed: bool = False):
    """Parse an annotation file into [{image, animal, keypoints}].

    Sealed files (held-out evaluation ground truth) refuse to load unless
    allow_sealed is set, so training code cannot touch them by accident.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ANNOTATION_HEADER:
        raise ConfigError(f"{path}: not a recognized annotation file")
    body = lines[1:]
    if body and body[0] == SEALED_MARKER:
        if not allow_sealed:
            raise ConfigError(
                f"{path} is sealed evaluation ground truth; refusing to load during training")
        body = body[1:]
    records = []
    for line in body:
        if not line.strip():
            continue
        rel, animal, joints = line.split("\t")
        names, xy, vis = [], [], []
        for item in joints.split(";"):
            name, x, y, v = item.split(",")
            names.append(name)
            xy.append((float(x), float(y)))
            vis.append(bool(int(v)))
        records.append({"image": rel, "animal": animal,
                        "keypoints": KeypointSet(names=names, xy=np.array(xy), visible=vis)})
    return records


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Domain sets on disk
# ---------------------------------------------------------------------------


@dataclass
class DomainSplit:
    """Read-only view of <root>/<domain>/<split>."""

    root: Path
    domain: str
    split: str

    @property
    def dir(self) -> Path:
        return Path(self.root) / self.domain / self.split

    def image_names(self):
        return sorted(p.name for p in (self.dir / "images").glob("*.png"))

    def load_images(self):
        return [load_image(self.dir / "images" / n) for n in self.image_names()]

    def load_masks(self):
        mdir = self.dir / "masks"
        if not mdir.exists():
            return None
        return [load_mask(mdir / n) for n in self.image_names()]

    def load_annotations(self, allow_sealed: bool = False):
        path = self.dir / "annotations.txt"
        if not path.exists():
            return None
        return read_annotations(path, allow_sealed=allow_sealed)


def write_split(root, domain, split, samples, animal, with_masks=True,
                with_annotations=True) -> None:
    base = Path(root) / domain / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (base / "masks").mkdir(exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = f"{animal}_{i:05d}.png"
        save_image(base / "images" / name, s.image)
        if with_masks:
            save_mask(base / "masks" / name, s.mask)
        records.append((f"images/{name}", s.keypoints))
    if with_annotations:
        write_annotations(base / "annotations.txt", records, animal)


# ---------------------------------------------------------------------------
# sim2sim benchmark
# ---------------------------------------------------------------------------

SIM2SIM_AFFINE = {"scale": 1.15, "rotation_deg": 10.0, "translation": [0.05, -0.03]}
SIM2SIM_WIDTH_GAIN = 1.6
SIM2SIM_COUNTS = {"source_train": 200, "target_train": 200, "target_test": 100}


def sim2sim_specs(seed: int, size: int = 64):
    """Source worm spec A (thin, straight-biased, flat) and target spec B
    (fresh draws, +60% width, wider curvature, shaded) behind a fixed hidden
    affine."""
    aff = SIM2SIM_AFFINE
    source = SyntheticSpec(
        animal="worm", size=size, seed=seed, appearance="flat",
        half_width_frac=0.030, curvature_range=(-0.7, 0.7),
        rotation_range_deg=(-25.0, 25.0), translation_frac=0.06)
    target = SyntheticSpec(
        animal="worm", size=size, seed=seed + 104729, appearance="shaded",
        half_width_frac=0.030 * SIM2SIM_WIDTH_GAIN,
        curvature_range=(-1.5, 1.5), rotation_range_deg=(-25.0, 25.0),
        translation_frac=0.06,
        affine=(aff["scale"], aff["rotation_deg"], *aff["translation"]))
    return source, target


def build_sim2sim_benchmark(root, seed: int = 7, size: int = 64) -> dict:
    """Generate the self-contained verification benchmark.

    Source split carries masks and keypoints; target train carries images
    only (unpaired); target test images are public while their ground-truth
    keypoints and the true affine live under sealed/ for evaluation only.
    Returns the manifest (also written to <root>/manifest.json).
    """
    root = Path(root)
    source_spec, target_spec = sim2sim_specs(seed, size)

    src = gen_synthetic(source_spec, SIM2SIM_COUNTS["source_train"])
    tgt_train = gen_synthetic(target_spec, SIM2SIM_COUNTS["target_train"])
    # test draws continue the target stream past the training items
    tgt_all = gen_synthetic(target_spec,
                            SIM2SIM_COUNTS["target_train"] + SIM2SIM_COUNTS["target_test"])
    tgt_test = tgt_all[SIM2SIM_COUNTS["target_train"]:]

    write_split(root, "source", "unpaired_train", src, "worm")
    write_split(root, "target", "unpaired_train", tgt_train, "worm",
                with_masks=False, with_annotations=False)
    write_split(root, "target", "test", tgt_test, "worm",
                with_masks=False, with_annotations=False)

    sealed_dir = root / "sealed"
    sealed_dir.mkdir(parents=True, exist_ok=True)
    sealed_annotations = sealed_dir / "target_test_annotations.txt"
    write_annotations(
        sealed_annotations,
        [(f"images/worm_{i:05d}.png", s.keypoints) for i, s in enumerate(tgt_test)],
        "worm", sealed=True)
    affine_path = sealed_dir / "true_affine.json"
    affine_path.write_text(json.dumps(SIM2SIM_AFFINE, sort_keys=True) + "\n")

    manifest = {
        "benchmark": "sim2sim",
        "format_version": 1,
        "seed": seed,
        "size": size,
        "animal": "worm",
        "counts": dict(SIM2SIM_COUNTS),
        "unpaired": True,
        "hashes": {
            "sealed_annotations": file_sha256(sealed_annotations),
            "sealed_affine": file_sha256(affine_path),
            "source_annotations": file_sha256(
                root / "source" / "unpaired_train" / "annotations.txt"),
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_sealed_affine(root) -> dict:
    return json.loads((Path(root) / "sealed" / "true_affine.json").read_text())
