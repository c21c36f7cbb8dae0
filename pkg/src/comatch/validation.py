"""Input checks shared by the estimator and the command line."""

import numpy as np

from .data import PairSample


def check_image(image, name="image"):
    """Return ``image`` as a float32 ``(H, W, 3)`` array with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_mask(mask, shape, name="mask"):
    arr = np.asarray(mask)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr.astype(bool)


def check_pairs(X, stride=1, min_pairs=1):
    """Normalize ``X`` to a list of :class:`PairSample`.

    Accepts a sequence of samples, a sequence of ``(image_a, image_b)`` tuples
    or an array of shape ``(N, 2, H, W, 3)``.  All images must share one size
    divisible by ``stride``.
    """
    if isinstance(X, PairSample):
        X = [X]
    if isinstance(X, np.ndarray):
        if X.ndim != 5 or X.shape[1] != 2:
            raise ValueError(f"pair arrays must have shape (N, 2, H, W, 3), got {X.shape}")
        X = [(x[0], x[1]) for x in X]
    samples = []
    for i, item in enumerate(X):
        if isinstance(item, PairSample):
            s = item
            check_image(s.image_a, f"pair {i} image_a")
            check_image(s.image_b, f"pair {i} image_b")
        else:
            try:
                a, b = item
            except (TypeError, ValueError):
                raise ValueError(f"pair {i} is neither a PairSample nor an (image_a, image_b) tuple") from None
            s = PairSample(check_image(a, f"pair {i} image_a"), check_image(b, f"pair {i} image_b"))
        samples.append(s)
    if len(samples) < min_pairs:
        raise ValueError(f"need at least {min_pairs} pairs, got {len(samples)}")
    sizes = {s.image_a.shape for s in samples} | {s.image_b.shape for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"all images must share one size, got {sorted(sizes)}")
    h, w, _ = sizes.pop()
    if h % stride or w % stride:
        raise ValueError(f"image size {h}x{w} is not divisible by {stride}")
    return samples


def check_alphas(alphas):
    alphas = tuple(float(a) for a in alphas)
    if not alphas or any(a < 0 for a in alphas):
        raise ValueError("alphas must be a nonempty list of nonnegative thresholds")
    return alphas
