"""Perceptual contrastive loss and cross-network mask consistency."""

from typing import NamedTuple

import torch
from torch import Tensor

from ..geometry import warp

BCE_EPS = 1e-6


class FigureGround(NamedTuple):
    object_image: Tensor
    background_image: Tensor


def figure_ground_split(images, masks):
    """Split ``(B, 3, H, W)`` images by ``(B, H, W)`` soft masks."""
    if images.shape[-2:] != masks.shape[-2:]:
        raise ValueError("mask resolution does not match the image")
    m = masks.unsqueeze(1)
    return FigureGround(m * images, (1 - m) * images)


class ContrastTerms(NamedTuple):
    positive: Tensor
    negative: Tensor

    @property
    def total(self):
        return self.positive + self.negative


def contrastive_terms(img_a, img_b, m_a, m_b, extractor, margin=2.0, dim=None):
    """Batch-averaged ``(d+, d-)`` of the perceptual contrastive loss."""
    dim = extractor.dim if dim is None else dim
    n = img_a.shape[0]
    if hasattr(extractor, "figure_ground"):
        fg, bg = extractor.figure_ground(torch.cat([img_a, img_b]), torch.cat([m_a, m_b]))
        feats = torch.cat([fg, bg])
    else:
        obj_a, bg_a = figure_ground_split(img_a, m_a)
        obj_b, bg_b = figure_ground_split(img_b, m_b)
        feats = extractor(torch.cat([obj_a, obj_b, bg_a, bg_b]))
    if feats.shape[-1] != dim:
        raise ValueError(f"extractor produces {feats.shape[-1]}-d features, expected {dim}")
    fo_a, fo_b, fb_a, fb_b = feats.split(n)
    d_pos = ((fo_a - fo_b) ** 2).sum(-1) / dim
    spread = (((fo_a - fb_a) ** 2).sum(-1) + ((fo_b - fb_b) ** 2).sum(-1)) / (2 * dim)
    d_neg = torch.clamp(margin - spread, min=0.0)
    return ContrastTerms(d_pos.mean(), d_neg.mean())


def contrastive_loss(img_a, img_b, m_a, m_b, extractor, margin=2.0, dim=None):
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    return contrastive_terms(img_a, img_b, m_a, m_b, extractor, margin, dim).total


def bce(target, pred, eps=BCE_EPS):
    """Pixel-mean binary cross-entropy with soft targets, averaged over the batch."""
    pred = pred.clamp(eps, 1 - eps)
    per_pixel = target * torch.log(pred) + (1 - target) * torch.log(1 - pred)
    return -per_pixel.flatten(1).mean(1).mean()


def task_consistency_loss(m_a, m_b, T_ab, T_ba, detach_targets=False):
    """Symmetric BCE between each mask warped into the other image and that image's mask.

    ``M_A`` is carried into B's frame by backward sampling through ``T_ba``
    and vice versa.  ``detach_targets`` stops the gradient through the mask
    values being warped (the transforms still receive it), which removes the
    pull of each target towards a binary, and possibly empty, mask.
    """
    src_a, src_b = (m_a.detach(), m_b.detach()) if detach_targets else (m_a, m_b)
    warped_a = warp(src_a.unsqueeze(1), T_ba)[:, 0]
    warped_b = warp(src_b.unsqueeze(1), T_ab)[:, 0]
    return bce(warped_a, m_b) + bce(warped_b, m_a)
