"""Keypoint and image-quality evaluation: RMSE, PCK over threshold ranges,
AUC, permutation-invariant variants, and SSIM."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

# SSIM window constants, recorded in every report for comparability.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0


def _stack(pred, gt, visible):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
        gt = gt[None]
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"prediction/gt shape mismatch: {pred.shape} vs {gt.shape}")
    if visible is None:
        visible = np.ones(pred.shape[:2], dtype=bool)
    else:
        visible = np.asarray(visible, dtype=bool).reshape(pred.shape[:2])
    return pred, gt, visible


def _errors(pred, gt):
    return np.linalg.norm(pred - gt, axis=-1)


def rmse(pred, gt, visible=None) -> float:
    """Root mean squared Euclidean error in pixels over visible GT joints."""
    pred, gt, vis = _stack(pred, gt, visible)
    err = _errors(pred, gt)[vis]
    if err.size == 0:
        raise ValueError("no visible joints to evaluate")
    return float(np.sqrt(np.mean(err ** 2)))


def pck(pred, gt, threshold_px: float, visible=None) -> float:
    """Percentage of visible joints with error strictly below the threshold."""
    pred, gt, vis = _stack(pred, gt, visible)
    err = _errors(pred, gt)[vis]
    if err.size == 0:
        raise ValueError("no visible joints to evaluate")
    return float(100.0 * np.mean(err < threshold_px))


def auc(pred, gt, t_min: int, t_max: int, step: int = 1, visible=None) -> float:
    """Mean PCK over integer thresholds in [t_min, t_max]."""
    thresholds = list(range(int(t_min), int(t_max) + 1, step))
    return float(np.mean([pck(pred, gt, t, visible) for t in thresholds]))


def _apply_perm(pred, perm):
    return pred[:, np.asarray(perm, dtype=int), :]


def pi_metric(pred, gt, skel, base: str = "pck", threshold_px=None,
              t_min=None, t_max=None, visible=None) -> float:
    """Best-permutation variant of a base metric.

    For every sample independently the prediction channels are re-ordered by
    each permutation in the skeleton's symmetry group (whole limb groups) and
    the ordering that optimizes the base criterion is kept: max for pck,
    min for rmse. The group always contains the identity, so PI-PCK >= PCK
    and PI-RMSE <= RMSE.
    """
    pred, gt, vis = _stack(pred, gt, visible)
    perms = [np.asarray(p, dtype=int) for p in skel.symmetry_permutations()]
    n = pred.shape[0]

    if base == "rmse":
        # per sample: permutation minimizing that sample's sum of squares
        best = np.full(n, np.inf)
        for p in perms:
            err = _errors(_apply_perm(pred, p), gt)
            ss = np.where(vis, err ** 2, 0.0).sum(axis=1)
            best = np.minimum(best, ss)
        total_vis = vis.sum()
        if total_vis == 0:
            raise ValueError("no visible joints to evaluate")
        return float(np.sqrt(best.sum() / total_vis))

    if base == "pck":
        if threshold_px is None:
            raise ValueError("pck base requires threshold_px")
        best = np.zeros(n)
        for p in perms:
            err = _errors(_apply_perm(pred, p), gt)
            hits = np.where(vis, err < threshold_px, False).sum(axis=1)
            best = np.maximum(best, hits)
        total_vis = vis.sum()
        return float(100.0 * best.sum() / total_vis)

    if base == "auc":
        if t_min is None or t_max is None:
            raise ValueError("auc base requires t_min and t_max")
        values = [pi_metric(pred, gt, skel, "pck", threshold_px=t, visible=vis)
                  for t in range(int(t_min), int(t_max) + 1)]
        return float(np.mean(values))

    raise ValueError(f"unknown base metric {base!r}")


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a, b) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 1.0; uniform mean over the valid region.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim expects two equal-shape 2D images, got {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}px ssim window")
    win = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2

    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_against_random_references(generated, references, seed: int = 0):
    """Per-generated-image SSIM against a pseudo-randomly drawn reference.

    Returns (per-image values, mean). One reference is drawn per generated
    image with a seeded RNG so the protocol is reproducible.
    """
    rng = np.random.RandomState(seed)
    refs = list(references)
    values = [ssim(g, refs[rng.randint(len(refs))]) for g in generated]
    return values, float(np.mean(values))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Aggregate pose-evaluation result over a test set."""

    joint_names: list
    per_joint_rmse: np.ndarray
    mean_rmse: float
    thresholds: list
    pck_values: list
    auc_value: float
    auc_range: tuple
    pi: bool
    n_samples: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.pck_values, dtype=float)
        if (np.diff(p) < -1e-9).any():
            raise ValueError("PCK must be nondecreasing in the threshold")
        if not 0.0 <= self.auc_value <= 100.0:
            raise ValueError(f"AUC must lie in [0, 100], got {self.auc_value}")

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "pi": self.pi,
            "mean_rmse_px": self.mean_rmse,
            "per_joint_rmse_px": {n: float(v) for n, v in
                                  zip(self.joint_names, self.per_joint_rmse)},
            "auc": self.auc_value,
            "auc_range_px": list(self.auc_range),
            "pck": {str(t): float(v) for t, v in zip(self.thresholds, self.pck_values)},
            "ssim_constants": {
                "window": SSIM_WINDOW, "sigma": SSIM_SIGMA,
                "k1": SSIM_K1, "k2": SSIM_K2, "dynamic_range": SSIM_DYNAMIC_RANGE,
            },
            **self.extras,
        }

    def write_csv(self, path) -> None:
        """One row per threshold; this is also the accumulated-error-curve data."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_px", "pck"])
            for t, v in zip(self.thresholds, self.pck_values):
                w.writerow([t, f"{v:.10g}"])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_keypoints(pred_sets, gt_sets, skel=None, t_min=2, t_max=45,
                       extras=None) -> EvalReport:
    """Build an EvalReport from lists of predicted and ground-truth KeypointSets.

    When `skel` provides a nontrivial symmetry group the permutation-invariant
    variants are reported (per-sample optimal re-ordering).
    """
    if len(pred_sets) != len(gt_sets) or not pred_sets:
        raise ValueError("need equally many (and at least one) predictions and ground truths")
    names = list(gt_sets[0].names)
    pred = np.stack([p.xy for p in pred_sets])
    gt = np.stack([g.xy for g in gt_sets])
    vis = np.stack([g.visible for g in gt_sets])

    use_pi = skel is not None and len(skel.symmetry_permutations()) > 1
    thresholds = list(range(int(t_min), int(t_max) + 1))
    if use_pi:
        pck_values = [pi_metric(pred, gt, skel, "pck", threshold_px=t, visible=vis)
                      for t in thresholds]
        mean_rmse = pi_metric(pred, gt, skel, "rmse", visible=vis)
        # per-sample best ordering (by squared error) for the per-joint stats
        perms = [np.asarray(p, dtype=int) for p in skel.symmetry_permutations()]
        ss = np.stack([np.where(vis, _errors(_apply_perm(pred, p), gt) ** 2, 0).sum(axis=1)
                       for p in perms])
        choice = ss.argmin(axis=0)
        best_pred = np.stack([pred[i, perms[choice[i]]] for i in range(pred.shape[0])])
    else:
        pck_values = [pck(pred, gt, t, visible=vis) for t in thresholds]
        mean_rmse = rmse(pred, gt, visible=vis)
        best_pred = pred
    auc_value = float(np.mean(pck_values))

    err = _errors(best_pred, gt)
    per_joint = np.array([
        np.sqrt(np.mean(err[vis[:, j], j] ** 2)) if vis[:, j].any() else np.nan
        for j in range(err.shape[1])
    ])
    return EvalReport(
        joint_names=names, per_joint_rmse=per_joint, mean_rmse=mean_rmse,
        thresholds=thresholds, pck_values=pck_values, auc_value=auc_value,
        auc_range=(t_min, t_max), pi=use_pi, n_samples=len(pred_sets),
        extras=extras or {},
    )
