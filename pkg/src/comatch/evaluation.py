"""Keypoint transfer and co-segmentation metrics, plus mask binarization."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import apply_transform

DEFAULT_ALPHAS = (0.05, 0.1, 0.15)
OTSU_BINS = 256


def keypoint_errors(T, keypoints_a, keypoints_b, image_hw):
    """Transfer errors in pixels of image B for normalized keypoints."""
    if len(keypoints_a) == 0:
        raise ValueError("no keypoints to evaluate")
    pts = torch.as_tensor(np.asarray(keypoints_a), dtype=torch.float64)
    mapped = apply_transform(T.to(torch.float64), pts).detach().numpy().reshape(-1, 2)
    h, w = image_hw
    # normalized units -> pixels: half the axis length per unit
    delta = (mapped - np.asarray(keypoints_b)) * np.array([w / 2.0, h / 2.0])
    return np.hypot(delta[:, 0], delta[:, 1])


def pck(T, keypoints_a, keypoints_b, image_hw, alpha, bbox_hw=None):
    """Fraction of keypoints transferred within ``alpha * max(H, W)`` pixels.

    ``(H, W)`` is the target bounding box when given, else the image size.
    """
    errors = keypoint_errors(T, keypoints_a, keypoints_b, image_hw)
    ref = max(bbox_hw) if bbox_hw is not None else max(image_hw)
    return float(np.mean(errors <= alpha * ref))


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def precision(pred, gt):
    """Fraction of correctly labelled pixels."""
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(pred == gt))


def jaccard(pred, gt):
    """Intersection over union of the foregrounds; two empty masks score 1."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def otsu_threshold(values, bins=OTSU_BINS):
    """Histogram bin index ``t`` maximizing the between-class variance.

    Bin ``i`` covers ``[i / bins, (i + 1) / bins)`` of the unit interval;
    pixels in bins ``>= t`` are foreground.  Returns ``None`` if no split
    separates the histogram (all mass in one bin).
    """
    idx = np.clip((np.asarray(values, dtype=np.float64).ravel() * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    centres = (np.arange(bins) + 0.5) / bins
    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centres)[:-1]
    s1 = (hist * centres).sum() - s0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(valid, w0 * w1 * (s0 / w0 - s1 / w1) ** 2, -1.0)
    return int(np.argmax(between)) + 1


def binarize(soft, method="otsu", tau=0.5):
    """Hard mask from a soft mask in ``[0, 1]``.

    ``method`` is ``"otsu"`` or ``"fixed"`` (``soft > tau``).  A mask whose
    values all fall in one histogram bin cannot be split by Otsu and falls
    back to the fixed threshold ``tau``.
    """
    soft = np.asarray(soft, dtype=np.float64)
    if method == "fixed":
        return soft > tau
    if method == "otsu":
        t = otsu_threshold(soft)
        if t is None:
            return soft > tau
        idx = np.clip((soft * OTSU_BINS).astype(np.int64), 0, OTSU_BINS - 1)
        return idx >= t
    if method in ("grabcut", "densecrf"):
        raise NotImplementedError(f"{method} post-processing is not available")
    raise ValueError(f"unknown binarization method {method!r}")


@dataclass
class PckReport:
    alphas: tuple
    values: dict
    per_class: dict = field(default_factory=dict)
    n_keypoints: int = 0
    n_pairs: int = 0
    mean_error_px: float = float("nan")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "n_pairs", "n_keypoints"] + [f"pck@{a:g}" for a in self.alphas] + ["mean_error_px"])
        writer.writerow(["all", self.n_pairs, self.n_keypoints] + [f"{self.values[a]:.6f}" for a in self.alphas] + [f"{self.mean_error_px:.6f}"])
        for name, vals in sorted(self.per_class.items()):
            writer.writerow([name, vals["n_pairs"], vals["n_keypoints"]] + [f"{vals[a]:.6f}" for a in self.alphas] + [f"{vals['mean_error_px']:.6f}"])
        return buf.getvalue()

    def table(self):
        head = "  ".join(f"PCK@{a:<5g}" for a in self.alphas)
        row = "  ".join(f"{self.values[a]:<9.4f}" for a in self.alphas)
        return f"pairs={self.n_pairs} keypoints={self.n_keypoints} mean_err={self.mean_error_px:.3f}px\n{head}\n{row}\n"


@dataclass
class CosegReport:
    precision: float
    jaccard: float
    per_class: dict = field(default_factory=dict)
    n_masks: int = 0

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "n_masks", "precision", "jaccard"])
        writer.writerow(["all", self.n_masks, f"{self.precision:.6f}", f"{self.jaccard:.6f}"])
        for name, vals in sorted(self.per_class.items()):
            writer.writerow([name, vals["n_masks"], f"{vals['precision']:.6f}", f"{vals['jaccard']:.6f}"])
        return buf.getvalue()

    def table(self):
        return f"masks={self.n_masks}\nP        J\n{self.precision:<8.4f} {self.jaccard:.4f}\n"


def _summarize_pck(errors, refs, alphas):
    errors, refs = np.concatenate(errors), np.concatenate(refs)
    vals = {a: float(np.mean(errors <= a * refs)) for a in alphas}
    return vals, float(errors.mean()), len(errors)


def pck_report(transforms, samples, alphas=DEFAULT_ALPHAS, classes=None):
    """Aggregate PCK over pairs; ``transforms[i]`` maps sample ``i`` from A to B."""
    alphas = tuple(alphas)
    groups = {}
    for i, (T, s) in enumerate(zip(transforms, samples)):
        if s.keypoints_a is None or len(s.keypoints_a) == 0:
            continue
        hw = s.image_b.shape[:2]
        err = keypoint_errors(T, s.keypoints_a, s.keypoints_b, hw)
        ref = max(s.bbox_b) if s.bbox_b is not None else max(hw)
        name = classes[i] if classes is not None else None
        g = groups.setdefault(name, ([], [], 0))
        g[0].append(err)
        g[1].append(np.full(len(err), float(ref)))
        groups[name] = (g[0], g[1], g[2] + 1)
    if not groups:
        raise ValueError("no keypoints to evaluate")
    all_err = [e for g in groups.values() for e in g[0]]
    all_ref = [r for g in groups.values() for r in g[1]]
    vals, mean_err, n_kp = _summarize_pck(all_err, all_ref, alphas)
    per_class = {}
    if classes is not None:
        for name, (err, ref, n) in groups.items():
            v, m, k = _summarize_pck(err, ref, alphas)
            per_class[name] = dict(v, n_pairs=n, n_keypoints=k, mean_error_px=m)
    n_pairs = sum(g[2] for g in groups.values())
    return PckReport(alphas, vals, per_class, n_kp, n_pairs, mean_err)


def coseg_report(pred_masks, gt_masks, classes=None):
    """Mean precision and Jaccard over binary masks."""
    if len(pred_masks) == 0:
        raise ValueError("no masks to evaluate")
    ps = np.array([precision(p, g) for p, g in zip(pred_masks, gt_masks)])
    js = np.array([jaccard(p, g) for p, g in zip(pred_masks, gt_masks)])
    per_class = {}
    if classes is not None:
        labels = np.asarray(classes)
        for name in sorted(set(classes)):
            sel = labels == name
            per_class[name] = dict(n_masks=int(sel.sum()), precision=float(ps[sel].mean()), jaccard=float(js[sel].mean()))
    return CosegReport(float(ps.mean()), float(js.mean()), per_class, len(ps))
