"""Dense cosine correlation between two feature maps."""

import torch

EPS = 1e-8

# Above this many multiply-adds the broadcast product is replaced by a matmul.
_BROADCAST_LIMIT = 1 << 24


def correlate(f_a, f_b, eps=EPS):
    """Normalized inner product of every position pair.

    ``f_a`` is ``(B, d, hA, wA)`` and ``f_b`` is ``(B, d, hB, wB)``.  Returns
    ``(B, hA, wA, hB * wB)`` where the last axis enumerates positions of
    ``f_b`` in row-major order.  ``correlate(a, b)[p, q]`` and
    ``correlate(b, a)[q, p]`` are bit-identical for maps small enough to use
    the broadcast product.
    """
    if f_a.dim() != 4 or f_b.dim() != 4:
        raise ValueError("feature maps must be (B, d, h, w)")
    if f_a.shape[1] != f_b.shape[1]:
        raise ValueError(f"channel mismatch: {f_a.shape[1]} vs {f_b.shape[1]}")
    b, d, ha, wa = f_a.shape
    a = f_a.reshape(b, d, ha * wa)
    c = f_b.reshape(b, d, -1)
    if d * a.shape[-1] * c.shape[-1] * b <= _BROADCAST_LIMIT:
        # Channel-by-channel accumulation fixes the summation order, so
        # swapping the arguments reproduces every entry bit for bit.
        dots = a[:, 0, :, None] * c[:, 0, None, :]
        for k in range(1, d):
            dots = dots + a[:, k, :, None] * c[:, k, None, :]
    else:
        dots = a.transpose(1, 2) @ c
    na = torch.linalg.vector_norm(a, dim=1)
    nc = torch.linalg.vector_norm(c, dim=1)
    scores = dots / (na[:, :, None] * nc[:, None, :] + eps)
    return scores.reshape(b, ha, wa, -1)


def as_channels(corr):
    """``(B, hA, wA, N)`` correlation to channel-first ``(B, N, hA, wA)``."""
    return corr.permute(0, 3, 1, 2)
