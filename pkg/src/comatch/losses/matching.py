"""Foreground-guided matching loss and geometric cycle losses."""

import math

import torch
import torch.nn.functional as F

from ..geometry import CoordGrid, apply_transform


def _points(grid):
    return grid.points if isinstance(grid, CoordGrid) else grid


def correspondence_mask(T, grid_a, grid_b, phi=1.0, soft=False):
    """Indicator of pairs ``(p, q)`` with ``||T(p) - q|| <= phi``.

    Distances are measured in cells of ``grid_b`` (one cell is the spacing
    between neighbouring points).  Returns ``(B, |A|, |B|)``.  The hard mask
    carries no gradient; ``soft=True`` returns ``2 ** -(dist / phi) ** 2``,
    which is differentiable in ``T`` and equals 0.5 at the threshold.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    dx, dy = grid_b.spacing
    scale = torch.tensor([1.0 / dx, 1.0 / dy], dtype=grid_b.points.dtype)
    proj = apply_transform(T, _points(grid_a))
    if proj.dim() == 2:
        proj = proj.unsqueeze(0)
    diff = (proj[:, :, None, :] - _points(grid_b).to(proj.dtype)[None, None]) * scale.to(proj.dtype)
    sq = (diff**2).sum(-1)
    if soft:
        return torch.exp(-math.log(2.0) * sq / phi**2)
    # Relative slack absorbs rounding so points exactly phi away count.
    eps = max(torch.finfo(proj.dtype).eps, torch.finfo(_points(grid_b).dtype).eps)
    slack = 1 + 64 * eps
    return (sq.detach() <= phi**2 * slack).to(proj.dtype)


def match_score(S, m):
    """Per-position score ``s(p) = sum_q m(p, q) S(p, q)``.

    ``S`` is ``(B, h, w, N)``; ``m`` is ``(B, h*w, N)`` or the same shape as
    ``S``.  Returns ``(B, h, w)``.
    """
    if m.numel() != S.numel() or m.shape[-1] != S.shape[-1]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match scores {tuple(S.shape)}")
    return (S * m.reshape(S.shape)).sum(-1)


def resize_mask(mask, hw):
    """Area-average a ``(B, H, W)`` mask down to the feature resolution."""
    if tuple(mask.shape[-2:]) == tuple(hw):
        return mask
    return F.adaptive_avg_pool2d(mask.unsqueeze(1), hw)[:, 0]


def matching_loss(s_a, s_b, m_a, m_b, detach_masks=True):
    """``-(sum_p s_A(p) M_A(p) + sum_q s_B(q) M_B(q))``, averaged over the batch.

    Masks at image resolution are resized to the score resolution first.
    """
    m_a = resize_mask(m_a, s_a.shape[-2:])
    m_b = resize_mask(m_b, s_b.shape[-2:])
    if detach_masks:
        m_a, m_b = m_a.detach(), m_b.detach()
    per_pair = (s_a * m_a).flatten(1).sum(1) + (s_b * m_b).flatten(1).sum(1)
    return -per_pair.mean()


def _mean_residual(mapped, ref):
    return torch.linalg.vector_norm(mapped - ref, dim=-1).mean(-1)


def cycle_loss(T_ab, T_ba, grid_a, grid_b):
    """Forward-backward re-projection error, averaged over each grid and the batch."""
    pa, pb = _points(grid_a), _points(grid_b)
    there_back = apply_transform(T_ba, apply_transform(T_ab, pa))
    back_there = apply_transform(T_ab, apply_transform(T_ba, pb))
    return (_mean_residual(there_back, pa) + _mean_residual(back_there, pb)).mean()


def trans_loss(T_ab, T_bc, T_ca, grid_a):
    """Re-projection error around the loop A -> B -> C -> A."""
    pa = _points(grid_a)
    loop = apply_transform(T_ca, apply_transform(T_bc, apply_transform(T_ab, pa)))
    return _mean_residual(loop, pa).mean()
