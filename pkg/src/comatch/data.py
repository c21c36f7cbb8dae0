"""Synthetic pairs with known ground truth, manifest I/O and augmentation.

A synthetic dataset renders one object *category*: a template shape with a
fixed texture, seen under a random pose on an independent cluttered
background in every image.  Any two images of a dataset therefore form a
valid weakly-supervised pair, and each generated pair additionally records
its exact ground-truth transform, masks and keypoints.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .geometry import Transform, affine_from_matrix, apply_transform, to_normalized, to_pixel

MANIFEST_COLUMNS = ("image_a", "image_b", "mask_a", "mask_b", "keypoints_a", "keypoints_b", "bbox")
DATASET_VERSION = "v1"


class ManifestError(ValueError):
    pass


@dataclass
class PairSample:
    """An image pair with optional ground truth.

    Images are ``(H, W, 3)`` float32 arrays in ``[0, 1]``, masks are boolean
    ``(H, W)`` arrays and keypoints are ``(K, 2)`` float64 arrays of
    normalized ``(x, y)`` coordinates.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    gt_transform: Transform | None = None
    gt_mask_a: np.ndarray | None = None
    gt_mask_b: np.ndarray | None = None
    keypoints_a: np.ndarray | None = None
    keypoints_b: np.ndarray | None = None
    bbox_b: tuple | None = None

    @property
    def size(self):
        return self.image_a.shape[:2]


@dataclass
class SyntheticConfig:
    size: int = 48
    shape: str = "blob"
    category_seed: int = 0
    object_scale: tuple = (0.42, 0.52)
    pose_rotation: float = 25.0
    pose_translation: float = 0.12
    # ground-truth A -> B transform, about the object centre
    rotation: float = 15.0
    scale: tuple = (0.85, 1.15)
    shear: float = 0.1
    translation: float = 0.2
    tps_jitter: float = 0.0
    clutter: int = 10
    noise: float = 0.02
    n_keypoints: int = 10
    min_inbounds: float = 0.6

    @classmethod
    def identity(cls, **kwargs):
        """Configuration whose ground truth is always the identity transform."""
        base = dict(rotation=0.0, scale=(1.0, 1.0), shear=0.0, translation=0.0, tps_jitter=0.0)
        base.update(kwargs)
        return cls(**base)


# ---------------------------------------------------------------------------
# category template


@dataclass
class _Template:
    shape: str
    radial: list
    waves: list
    keypoints: np.ndarray
    interior: np.ndarray = field(repr=False)

    def inside(self, u):
        x, y = u[..., 0], u[..., 1]
        if self.shape == "ellipse":
            return x**2 + (y / 0.7) ** 2 <= 1.0
        if self.shape == "rectangle":
            return (np.abs(x) <= 1.0) & (np.abs(y) <= 0.7)
        r = np.hypot(x, y)
        theta = np.arctan2(y, x)
        bound = np.ones_like(r)
        for k, amp, phase in self.radial:
            bound = bound + amp * np.cos(k * theta + phase)
        return r <= bound

    def color(self, u):
        chans = []
        for waves in self.waves:
            s = np.zeros(u.shape[:-1])
            for fx, fy, phase in waves:
                s = s + np.sin(math.pi * (fx * u[..., 0] + fy * u[..., 1]) + phase)
            chans.append(np.tanh(s / math.sqrt(len(waves))))
        hue = 0.03 + 0.06 * chans[0]
        sat = 0.75 + 0.2 * chans[1]
        val = 0.7 + 0.25 * chans[2]
        return hsv_to_rgb(np.stack([hue % 1.0, sat, val], axis=-1))


def _make_template(shape, seed, n_keypoints):
    if shape not in ("blob", "ellipse", "rectangle"):
        raise ValueError(f"unknown shape family {shape!r}")
    rng = np.random.default_rng(seed)
    radial = [
        (2, rng.uniform(0.12, 0.18), rng.uniform(0, 2 * math.pi)),
        (3, rng.uniform(0.10, 0.16), rng.uniform(0, 2 * math.pi)),
        (5, rng.uniform(0.03, 0.06), rng.uniform(0, 2 * math.pi)),
    ]
    waves = [
        [(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0, 2 * math.pi)) for _ in range(4)]
        for _ in range(3)
    ]
    tmpl = _Template(shape, radial, waves, np.zeros((0, 2)), np.zeros((0, 2)))
    lin = np.linspace(-1.5, 1.5, 61)
    cand = np.stack(np.meshgrid(lin, lin, indexing="xy"), axis=-1).reshape(-1, 2)
    tmpl.interior = cand[tmpl.inside(cand)]
    # Keypoints sit well inside the silhouette.
    shrunk = cand[tmpl.inside(cand / 0.75)]
    tmpl.keypoints = shrunk[rng.choice(len(shrunk), size=n_keypoints, replace=False)]
    return tmpl


_TEMPLATES = {}


def _template(cfg):
    key = (cfg.shape, cfg.category_seed, cfg.n_keypoints)
    if key not in _TEMPLATES:
        _TEMPLATES[key] = _make_template(*key)
    return _TEMPLATES[key]


# ---------------------------------------------------------------------------
# rendering


def _rotation(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _affine(linear, offset):
    m = np.zeros((3, 3))
    m[:2, :2] = linear
    m[:2, 2] = offset
    m[2, 2] = 1.0
    return m


def _apply(m, pts):
    return pts @ m[:2, :2].T + m[:2, 2]


def _pixel_centres(size):
    c = to_normalized(np.arange(size, dtype=np.float64), size)
    return np.stack(np.meshgrid(c, c, indexing="xy"), axis=-1)


def _background(size, rng, cfg):
    xy = _pixel_centres(size)
    hue = rng.uniform(0.3, 0.7) + 0.08 * np.sin(math.pi * (xy @ rng.uniform(-1.5, 1.5, 2)))
    sat = np.full_like(hue, rng.uniform(0.2, 0.6))
    val = 0.35 + 0.25 * (0.5 + 0.5 * np.sin(math.pi * (xy @ rng.uniform(-1.0, 1.0, 2)) + rng.uniform(0, 6)))
    img = hsv_to_rgb(np.stack([hue % 1.0, sat, val], axis=-1))
    for _ in range(cfg.clutter):
        centre = rng.uniform(-1.1, 1.1, 2)
        axes = rng.uniform(0.08, 0.35, 2)
        rot = _rotation(rng.uniform(0, 180))
        local = (xy - centre) @ rot
        if rng.random() < 0.5:
            blob = ((local / axes) ** 2).sum(-1) <= 1.0
        else:
            blob = (np.abs(local) <= axes).all(-1)
        colour = hsv_to_rgb(np.array([rng.uniform(0.3, 0.85), rng.uniform(0.1, 0.7), rng.uniform(0.2, 0.9)]))
        img[blob] = colour
    return img


def _render(template, pose, background, rng, noise):
    size = background.shape[0]
    xy = _pixel_centres(size)
    u = _apply(np.linalg.inv(pose), xy.reshape(-1, 2)).reshape(xy.shape)
    mask = template.inside(u)
    img = background.copy()
    img[mask] = template.color(u[mask])
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _inbounds_fraction(template, pose):
    pts = _apply(pose, template.interior)
    return float((np.abs(pts) <= 1.0).all(-1).mean())


def _sample_pose(rng, cfg):
    scale = rng.uniform(*cfg.object_scale)
    rot = _rotation(rng.uniform(-cfg.pose_rotation, cfg.pose_rotation))
    return _affine(scale * rot, rng.uniform(-cfg.pose_translation, cfg.pose_translation, 2))


def _sample_gt(rng, cfg, centre):
    scale = rng.uniform(*cfg.scale)
    aspect = math.exp(rng.uniform(-0.5, 0.5) * cfg.shear)
    shear = np.array([[1.0, rng.uniform(-cfg.shear, cfg.shear)], [0.0, 1.0]])
    linear = _rotation(rng.uniform(-cfg.rotation, cfg.rotation)) @ shear @ np.diag([scale * aspect, scale / aspect])
    offset = rng.uniform(-cfg.translation, cfg.translation, 2)
    return _affine(linear, centre - linear @ centre + offset)


def gen_synthetic_pair(cfg, rng):
    """Render one pair whose B image shows A's object moved by a random transform."""
    template = _template(cfg)
    for _ in range(100):
        pose_a = _sample_pose(rng, cfg)
        gt = _sample_gt(rng, cfg, pose_a[:2, 2])
        pose_b = gt @ pose_a
        if min(_inbounds_fraction(template, pose_a), _inbounds_fraction(template, pose_b)) >= cfg.min_inbounds:
            break
    else:
        raise RuntimeError("could not keep the object in bounds; reduce the transform ranges")

    T = affine_from_matrix(torch.from_numpy(gt[:2].copy()))
    tps_offsets = None
    if cfg.tps_jitter > 0:
        tps_offsets = torch.from_numpy(rng.normal(0.0, cfg.tps_jitter, (1, 18)))
        T = Transform("cascade", affine=T.affine, tps=tps_offsets)

    img_a, mask_a = _render(template, pose_a, _background(cfg.size, rng, cfg), rng, cfg.noise)
    kp_a = _apply(pose_a, template.keypoints)
    if tps_offsets is None:
        img_b, mask_b = _render(template, pose_b, _background(cfg.size, rng, cfg), rng, cfg.noise)
        kp_b = _apply(pose_b, template.keypoints)
    else:
        img_b, mask_b = _render_warped(template, pose_a, T, _background(cfg.size, rng, cfg), rng, cfg.noise)
        kp_b = apply_transform(T, torch.from_numpy(kp_a)).numpy()
    keep = (np.abs(kp_a) <= 1.0).all(-1) & (np.abs(kp_b) <= 1.0).all(-1)
    return PairSample(
        image_a=img_a,
        image_b=img_b,
        gt_transform=T,
        gt_mask_a=mask_a,
        gt_mask_b=mask_b,
        keypoints_a=kp_a[keep],
        keypoints_b=kp_b[keep],
    )


def _render_warped(template, pose_a, T, background, rng, noise):
    # Non-affine ground truth has no closed-form inverse: locate each B pixel's
    # template coordinate by Newton iterations on T(x) = y.
    size = background.shape[0]
    y = torch.from_numpy(_pixel_centres(size).reshape(-1, 2))
    x = y.clone()
    for _ in range(20):
        x = x.detach().requires_grad_(True)
        fx = apply_transform(T, x)
        jac = torch.stack(
            [torch.autograd.grad(fx[:, i].sum(), x, retain_graph=True)[0] for i in range(2)], dim=1
        )
        step = torch.linalg.solve(jac, (fx - y).unsqueeze(-1)).squeeze(-1)
        x = x - step
    u = _apply(np.linalg.inv(pose_a), x.detach().numpy()).reshape(size, size, 2)
    mask = template.inside(u)
    img = background.copy()
    img[mask] = template.color(u[mask])
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def gen_synthetic_dataset(n, cfg, seed):
    rng = np.random.default_rng(seed)
    return [gen_synthetic_pair(cfg, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# batching


def stack_images(samples, which):
    arr = np.stack([getattr(s, f"image_{which}") for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def pairs_to_array(samples):
    """``(n, 2, H, W, 3)`` array of the pairs' images."""
    return np.stack([np.stack([s.image_a, s.image_b]) for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest I/O


def _load_image(path, size, mask=False):
    if not path.is_file():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        orig = (im.height, im.width)
        im = im.convert("L" if mask else "RGB")
        if size is not None and (im.height, im.width) != (size, size):
            im = im.resize((size, size), Image.NEAREST if mask else Image.BILINEAR)
        arr = np.asarray(im)
    if mask:
        return arr > 127, orig
    return arr.astype(np.float32) / 255.0, orig


def _parse_keypoints(text, orig_hw, new_hw, row):
    pts = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        try:
            x, y = (float(v) for v in item.split(","))
        except ValueError as exc:
            raise ManifestError(f"row {row}: malformed keypoint {item!r}") from exc
        if not (0 <= x <= orig_hw[1] - 1 and 0 <= y <= orig_hw[0] - 1):
            raise ManifestError(f"row {row}: keypoint ({x}, {y}) outside the {orig_hw[1]}x{orig_hw[0]} image")
        sx, sy = new_hw[1] / orig_hw[1], new_hw[0] / orig_hw[0]
        pts.append((to_normalized(x * sx, new_hw[1]), to_normalized(y * sy, new_hw[0])))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _parse_bbox(text, orig_hw, new_hw, row):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ManifestError(f"row {row}: malformed bbox {text!r}") from exc
    if len(vals) == 4:
        vals = [vals[3] - vals[1], vals[2] - vals[0]]
    if len(vals) != 2:
        raise ManifestError(f"row {row}: bbox needs 'h,w' or 'x1,y1,x2,y2'")
    return (vals[0] * new_hw[0] / orig_hw[0], vals[1] * new_hw[1] / orig_hw[1])


def load_pairs(manifest_path, size=None):
    """Read a manifest CSV; relative paths resolve against its directory.

    Images and masks are resized to ``size x size`` when given, with
    keypoints and bounding boxes scaled to match.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(manifest_path)
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return samples
        missing = {"image_a", "image_b"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"manifest lacks columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            if row.get("image_a") in (None, "") or row.get("image_b") in (None, ""):
                raise ManifestError(f"row {i}: image paths are required")
            img_a, orig_a = _load_image(root / row["image_a"], size)
            img_b, orig_b = _load_image(root / row["image_b"], size)
            sample = PairSample(img_a, img_b)
            if row.get("mask_a"):
                sample.gt_mask_a = _load_image(root / row["mask_a"], size, mask=True)[0]
            if row.get("mask_b"):
                sample.gt_mask_b = _load_image(root / row["mask_b"], size, mask=True)[0]
            kp_a, kp_b = row.get("keypoints_a") or "", row.get("keypoints_b") or ""
            if kp_a or kp_b:
                sample.keypoints_a = _parse_keypoints(kp_a, orig_a, img_a.shape[:2], i)
                sample.keypoints_b = _parse_keypoints(kp_b, orig_b, img_b.shape[:2], i)
                if len(sample.keypoints_a) != len(sample.keypoints_b):
                    raise ManifestError(f"row {i}: keypoint counts differ")
            if row.get("bbox"):
                sample.bbox_b = _parse_bbox(row["bbox"], orig_b, img_b.shape[:2], i)
            samples.append(sample)
    return samples


def _format_keypoints(pts, hw):
    if pts is None:
        return ""
    px = to_pixel(pts[:, 0], hw[1])
    py = to_pixel(pts[:, 1], hw[0])
    return ";".join(f"{x:.4f},{y:.4f}" for x, y in zip(px, py))


def save_pairs(samples, directory, cfg=None, seed=None):
    """Write images, masks and ``manifest.csv`` (plus provenance) to ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        row = dict.fromkeys(MANIFEST_COLUMNS, "")
        for side in ("a", "b"):
            img = getattr(s, f"image_{side}")
            name = f"images/{i:05d}_{side}.png"
            Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(directory / name)
            row[f"image_{side}"] = name
            mask = getattr(s, f"gt_mask_{side}")
            if mask is not None:
                name = f"images/{i:05d}_{side}_mask.png"
                Image.fromarray(mask.astype(np.uint8) * 255).save(directory / name)
                row[f"mask_{side}"] = name
        row["keypoints_a"] = _format_keypoints(s.keypoints_a, s.image_a.shape[:2])
        row["keypoints_b"] = _format_keypoints(s.keypoints_b, s.image_b.shape[:2])
        if s.bbox_b is not None:
            row["bbox"] = f"{s.bbox_b[0]},{s.bbox_b[1]}"
        rows.append(row)
    with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if cfg is not None:
        gt = [None if s.gt_transform is None else s.gt_transform.vector()[0].tolist() for s in samples]
        provenance = {"version": DATASET_VERSION, "seed": seed, "config": asdict(cfg), "gt_transforms": gt}
        (directory / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n", encoding="utf-8")
    return directory / "manifest.csv"


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    min_crop: float = 0.8
    max_tries: int = 10


def _flip_crop_matrix(flip, box):
    """Affine map original -> augmented normalized coordinates.

    ``box`` is ``(x0, y0, x1, y1)`` in normalized coordinates of the
    (possibly flipped) image; the crop is stretched back to full size.
    """
    m = np.eye(3)
    if flip:
        m[0, 0] = -1.0
    x0, y0, x1, y1 = box
    crop = np.array([[2 / (x1 - x0), 0, -(x1 + x0) / (x1 - x0)], [0, 2 / (y1 - y0), -(y1 + y0) / (y1 - y0)], [0, 0, 1]])
    return crop @ m


def _resample(arr, m, nearest):
    # Output x reads input at m^{-1}(x).
    size = arr.shape[0]
    xy = _pixel_centres(size).reshape(-1, 2)
    src = torch.from_numpy(_apply(np.linalg.inv(m), xy).reshape(1, size, size, 2))
    t = torch.from_numpy(np.asarray(arr, dtype=np.float64))
    t = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
    out = torch.nn.functional.grid_sample(
        t, src, mode="nearest" if nearest else "bilinear", padding_mode="border", align_corners=False
    )[0]
    return out[0].numpy() if arr.ndim == 2 else out.permute(1, 2, 0).numpy()


def _augment_side(img, mask, m):
    if np.allclose(m, np.diag([-1.0, 1.0, 1.0])):
        out = img[:, ::-1].copy()
        return out, None if mask is None else mask[:, ::-1].copy()
    out = _resample(img, m, nearest=False).astype(np.float32)
    return out, None if mask is None else _resample(mask.astype(np.float64), m, nearest=True) > 0.5


def _sample_box(rng, cfg):
    if rng.random() >= cfg.crop_prob:
        return (-1.0, -1.0, 1.0, 1.0)
    frac = rng.uniform(cfg.min_crop, 1.0)
    w = 2.0 * frac
    x0 = rng.uniform(-1.0, 1.0 - w)
    y0 = rng.uniform(-1.0, 1.0 - w)
    return (x0, y0, x0 + w, y0 + w)


def apply_augmentation(sample, m_a, m_b):
    """Apply fixed augmentation matrices to both sides of ``sample``."""
    img_a, mask_a = _augment_side(sample.image_a, sample.gt_mask_a, m_a)
    img_b, mask_b = _augment_side(sample.image_b, sample.gt_mask_b, m_b)
    kp_a = kp_b = None
    if sample.keypoints_a is not None:
        kp_a = _apply(m_a, sample.keypoints_a)
        kp_b = _apply(m_b, sample.keypoints_b)
        keep = (np.abs(kp_a) <= 1.0).all(-1) & (np.abs(kp_b) <= 1.0).all(-1)
        kp_a, kp_b = kp_a[keep], kp_b[keep]
    gt = None
    if sample.gt_transform is not None and sample.gt_transform.kind == "affine":
        g = np.eye(3)
        g[:2] = sample.gt_transform.affine.detach().double().reshape(2, 3).numpy()
        composed = m_b @ g @ np.linalg.inv(m_a)
        gt = affine_from_matrix(torch.from_numpy(composed[:2].copy()))
    bbox = sample.bbox_b
    if bbox is not None:
        bbox = (bbox[0] * abs(m_b[1, 1]), bbox[1] * abs(m_b[0, 0]))
    return replace(
        sample,
        image_a=img_a,
        image_b=img_b,
        gt_transform=gt,
        gt_mask_a=mask_a,
        gt_mask_b=mask_b,
        keypoints_a=kp_a,
        keypoints_b=kp_b,
        bbox_b=bbox,
    )


def augment(sample, rng, cfg=None):
    """Random horizontal flip and crop, drawn independently for each image.

    Masks and keypoints follow the images; an affine ground truth is updated
    by composition, any other ground truth is dropped.  Keypoints leaving a
    crop are removed; if a crop removes all of them the draw is repeated, and
    after ``max_tries`` failures the sample is returned unchanged.
    """
    cfg = cfg or AugmentConfig()
    for _ in range(cfg.max_tries):
        mats = []
        for _side in range(2):
            flip = rng.random() < cfg.flip_prob
            mats.append(_flip_crop_matrix(flip, _sample_box(rng, cfg)))
        out = apply_augmentation(sample, *mats)
        if sample.keypoints_a is None or len(sample.keypoints_a) == 0 or len(out.keypoints_a) > 0:
            return out
    return sample
