"""Central finite-difference checks of analytic gradients for every loss."""

from dataclasses import dataclass

import torch

from .correlation import correlate
from .geometry import Transform, apply_transform, coord_grid, identity_params, warp
from .losses import (
    contrastive_loss,
    correspondence_mask,
    cycle_loss,
    match_score,
    matching_loss,
    task_consistency_loss,
    trans_loss,
)
from .networks import SemanticExtractor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    rel_error: float
    n_params: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.rel_error < self.tolerance


def numeric_grad(fn, inputs, step=STEP):
    """Central differences of scalar ``fn(*inputs)`` for every input entry."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(*inputs))
            flat[i] = orig - step
            lo = float(fn(*inputs))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    return list(torch.autograd.grad(out, leaves, allow_unused=True))


def relative_error(analytic, numeric):
    """``max |a - n|`` over the largest gradient magnitude of either side."""
    num = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    den = max(max(float(a.abs().max()), float(n.abs().max())) for a, n in zip(analytic, numeric))
    return num / max(den, 1e-12)


def check(name, fn, inputs, step=STEP, tolerance=TOLERANCE):
    inputs = [x.detach().clone().to(torch.float64) for x in inputs]
    ana = analytic_grad(fn, inputs)
    ana = [torch.zeros_like(x) if a is None else a for a, x in zip(ana, inputs)]
    with torch.no_grad():
        num = numeric_grad(fn, inputs, step)
    return GradResult(name, relative_error(ana, num), sum(x.numel() for x in inputs), tolerance)


def _random_cascade(gen, scale=0.1):
    aff = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    aff = aff + scale * torch.randn(6, generator=gen, dtype=torch.float64)
    tps = scale * torch.randn(18, generator=gen, dtype=torch.float64)
    return aff[None], tps[None]


def _cascade(aff, tps):
    return Transform("cascade", affine=aff, tps=tps)


def gradient_suite(seed=0, size=6, tolerance=TOLERANCE):
    """Check every differentiable operation on random ``size x size`` inputs."""
    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64

    def rnd(*shape, scale=1.0):
        return scale * torch.randn(*shape, generator=gen, dtype=dt)

    grid = coord_grid(size, size, inclusive=False)
    pts = grid.points
    weights = rnd(*pts.shape)
    results = []

    aff, tps = _random_cascade(gen)
    results.append(check("apply_affine", lambda a, p: (apply_transform(Transform("affine", affine=a), p) * weights).sum(), [aff, pts], tolerance=tolerance))
    results.append(check("apply_tps", lambda t, p: (apply_transform(Transform("tps", tps=t), p) * weights).sum(), [tps, pts], tolerance=tolerance))
    results.append(check("apply_cascade", lambda a, t: (apply_transform(_cascade(a, t), pts) * weights).sum(), [aff, tps], tolerance=tolerance))

    field = torch.rand(1, 1, size, size, generator=gen, dtype=dt)
    wfield = rnd(1, 1, size, size)
    results.append(check("warp", lambda f, a, t: (warp(f, _cascade(a, t)) * wfield).sum(), [field, aff, tps], tolerance=tolerance))

    d = 4
    f_a, f_b = rnd(1, d, size, size), rnd(1, d, size, size)
    wcorr = rnd(1, size, size, size * size)
    results.append(check("correlate", lambda x, y: (correlate(x, y) * wcorr).sum(), [f_a, f_b], tolerance=tolerance))

    m_a = torch.rand(1, size, size, generator=gen, dtype=dt) * 0.8 + 0.1
    m_b = torch.rand(1, size, size, generator=gen, dtype=dt) * 0.8 + 0.1
    aff_ab, tps_ab = _random_cascade(gen)
    aff_ba, tps_ba = _random_cascade(gen)
    T_ab, T_ba = _cascade(aff_ab, tps_ab), _cascade(aff_ba, tps_ba)
    hard_ab = correspondence_mask(T_ab, grid, grid, 1.0)
    hard_ba = correspondence_mask(T_ba, grid, grid, 1.0)

    def l_match(x, y, ma, mb):
        s_a = match_score(correlate(x, y), hard_ab)
        s_b = match_score(correlate(y, x), hard_ba)
        return matching_loss(s_a, s_b, ma, mb, detach_masks=False)

    results.append(check("matching", l_match, [f_a, f_b, m_a, m_b], tolerance=tolerance))

    s_ab, s_ba = correlate(f_a, f_b), correlate(f_b, f_a)

    def l_match_soft(a1, t1, a2, t2):
        s_a = match_score(s_ab, correspondence_mask(_cascade(a1, t1), grid, grid, 1.0, soft=True))
        s_b = match_score(s_ba, correspondence_mask(_cascade(a2, t2), grid, grid, 1.0, soft=True))
        return matching_loss(s_a, s_b, m_a, m_b)

    results.append(check("matching_soft", l_match_soft, [aff_ab, tps_ab, aff_ba, tps_ba], tolerance=tolerance))

    cyc_grid = coord_grid(size, size)
    results.append(check("cycle", lambda a1, t1, a2, t2: cycle_loss(_cascade(a1, t1), _cascade(a2, t2), cyc_grid, cyc_grid), [aff_ab, tps_ab, aff_ba, tps_ba], tolerance=tolerance))

    aff_c, tps_c = _random_cascade(gen)
    results.append(check("trans", lambda a1, t1, a2, t2, a3, t3: trans_loss(_cascade(a1, t1), _cascade(a2, t2), _cascade(a3, t3), cyc_grid), [aff_ab, tps_ab, aff_ba, tps_ba, aff_c, tps_c], tolerance=tolerance))

    extractor = SemanticExtractor(dim=32, channels=(8, 16, 32), seed=seed).double()
    img_a = torch.rand(1, 3, size, size, generator=gen, dtype=dt)
    img_b = torch.rand(1, 3, size, size, generator=gen, dtype=dt)
    results.append(check("contrast", lambda ma, mb: contrastive_loss(img_a, img_b, ma, mb, extractor, margin=10.0), [m_a, m_b], tolerance=tolerance))

    results.append(check("task", lambda ma, mb, a1, a2: task_consistency_loss(ma, mb, _cascade(a1, tps_ab), _cascade(a2, tps_ba)), [m_a, m_b, aff_ab, aff_ba], tolerance=tolerance))
    return results


def identity_displacement(predictor, f_a, f_b, k=10):
    """Largest displacement of a ``k x k`` grid under ``predictor(f_a, f_b)``."""
    grid = coord_grid(k, k, dtype=f_a.dtype)
    with torch.no_grad():
        T = predictor(f_a, f_b)
        moved = apply_transform(T, grid.points)
    ref = apply_transform(identity_params("cascade", T.batch_size, f_a.dtype), grid.points)
    return float((moved - ref).abs().max())
