"""Affine and thin-plate-spline transforms over normalized image coordinates.

All coordinates live in ``[-1, 1]^2`` with ``x`` horizontal and ``y``
vertical, using the ``align_corners=False`` convention of
:func:`torch.nn.functional.grid_sample`: pixel ``u`` of an axis with ``n``
samples sits at ``(2u + 1) / n - 1``.  Point sets are tensors of shape
``(N, 2)`` or batched ``(B, N, 2)``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

KINDS = ("affine", "tps", "cascade")

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
TPS_GRID = 3
TPS_REG = 1e-6


class NonFiniteTransformError(ValueError):
    """Transform coefficients contain NaN or infinity."""


@dataclass(frozen=True)
class CoordGrid:
    """Row-major regular grid of points (``y`` outer, ``x`` inner)."""

    points: Tensor
    rows: int
    cols: int

    def __post_init__(self):
        if self.points.shape[-2] != self.rows * self.cols:
            raise ValueError("points do not match rows * cols")

    @property
    def spacing(self):
        """Distance between horizontally and vertically adjacent points."""
        pts = self.points.reshape(-1, self.rows, self.cols, 2)[0]
        dx = float(pts[0, 1, 0] - pts[0, 0, 0]) if self.cols > 1 else 2.0
        dy = float(pts[1, 0, 1] - pts[0, 0, 1]) if self.rows > 1 else 2.0
        return dx, dy

    def __len__(self):
        return self.rows * self.cols


def coord_grid(rows, cols, inclusive=True, dtype=torch.float64):
    """Regular ``rows x cols`` grid over ``[-1, 1]^2``.

    With ``inclusive=True`` the grid touches the square's border; otherwise
    points sit at pixel centres of a ``rows x cols`` raster.
    """
    if inclusive:
        ys = torch.linspace(-1.0, 1.0, rows, dtype=dtype)
        xs = torch.linspace(-1.0, 1.0, cols, dtype=dtype)
    else:
        ys = (2 * torch.arange(rows, dtype=dtype) + 1) / rows - 1
        xs = (2 * torch.arange(cols, dtype=dtype) + 1) / cols - 1
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return CoordGrid(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1), rows, cols)


def pixel_grid(height, width, dtype=torch.float64):
    """Normalized coordinates of every pixel centre, shape ``(H, W, 2)``."""
    return coord_grid(height, width, inclusive=False, dtype=dtype).points.reshape(height, width, 2)


def to_normalized(u, size):
    return (2.0 * u + 1.0) / size - 1.0


def to_pixel(x, size):
    return ((x + 1.0) * size - 1.0) / 2.0


@dataclass
class Transform:
    """Batched transformation parameters.

    ``affine`` holds ``(B, 6)`` row-major 2x3 matrices; ``tps`` holds
    ``(B, 2K)`` control-point displacements, interleaved as
    ``dx_0, dy_0, dx_1, ...`` over the row-major 3x3 control lattice.  A
    cascade carries both and applies the affine first.
    """

    kind: str
    affine: Tensor | None = None
    tps: Tensor | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        need_affine = self.kind in ("affine", "cascade")
        need_tps = self.kind in ("tps", "cascade")
        if need_affine != (self.affine is not None) or need_tps != (self.tps is not None):
            raise ValueError(f"{self.kind} transform needs affine={need_affine}, tps={need_tps}")
        if self.affine is not None and self.affine.shape[-1] != 6:
            raise ValueError("affine coefficients must have 6 entries")
        if self.tps is not None and self.tps.shape[-1] != 2 * TPS_GRID**2:
            raise ValueError(f"tps offsets must have {2 * TPS_GRID ** 2} entries")

    @property
    def batch_size(self):
        return self._tensors()[0].shape[0]

    def _tensors(self):
        return [t for t in (self.affine, self.tps) if t is not None]

    def vector(self):
        """Concatenated ``(B, P)`` parameter vector."""
        return torch.cat(self._tensors(), dim=-1)

    def index(self, idx):
        """Select batch entries, keeping the batch dimension."""
        return Transform(
            self.kind,
            None if self.affine is None else self.affine[idx],
            None if self.tps is None else self.tps[idx],
        )

    def detach(self):
        return Transform(
            self.kind,
            None if self.affine is None else self.affine.detach(),
            None if self.tps is None else self.tps.detach(),
        )

    def to(self, *args, **kwargs):
        return Transform(
            self.kind,
            None if self.affine is None else self.affine.to(*args, **kwargs),
            None if self.tps is None else self.tps.to(*args, **kwargs),
        )

    @classmethod
    def cat(cls, transforms):
        kinds = {t.kind for t in transforms}
        if len(kinds) != 1:
            raise ValueError("cannot concatenate transforms of different kinds")
        kind = kinds.pop()
        aff = [t.affine for t in transforms]
        tps = [t.tps for t in transforms]
        return cls(
            kind,
            None if aff[0] is None else torch.cat(aff),
            None if tps[0] is None else torch.cat(tps),
        )


def identity_params(kind, batch_size=1, dtype=torch.float64, device=None):
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    affine = tps = None
    if kind in ("affine", "cascade"):
        affine = torch.tensor(IDENTITY_AFFINE, dtype=dtype, device=device).repeat(batch_size, 1)
    if kind in ("tps", "cascade"):
        tps = torch.zeros(batch_size, 2 * TPS_GRID**2, dtype=dtype, device=device)
    return Transform(kind, affine, tps)


def affine_from_matrix(matrix):
    """Build an affine :class:`Transform` from ``(2, 3)`` or ``(B, 2, 3)`` matrices."""
    m = torch.as_tensor(matrix)
    if m.dtype not in (torch.float32, torch.float64):
        m = m.to(torch.float64)
    return Transform("affine", affine=m.reshape(-1, 6))


def translation(tx, ty, dtype=torch.float64):
    return affine_from_matrix(torch.tensor([[1.0, 0.0, tx], [0.0, 1.0, ty]], dtype=dtype))


def invert_affine(params):
    """Analytic inverse of an affine transform (or the affine part of a cascade)."""
    m = params.affine.reshape(-1, 2, 3)
    a, b, tx = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    c, d, ty = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    det = a * d - b * c
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    return Transform("affine", affine=torch.stack([ia, ib, itx, ic, id_, ity], dim=-1))


def tps_control_points(dtype=torch.float64):
    return coord_grid(TPS_GRID, TPS_GRID, inclusive=True, dtype=dtype).points


def _tps_kernel(sq_dist):
    # U(r) = r^2 log r^2, with U(0) = 0 and a finite gradient there.
    positive = sq_dist > 0
    safe = torch.where(positive, sq_dist, torch.ones_like(sq_dist))
    return torch.where(positive, sq_dist * torch.log(safe), torch.zeros_like(sq_dist))


@lru_cache(maxsize=None)
def _tps_solver_np():
    ctrl = tps_control_points().numpy()
    k = len(ctrl)
    sq = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = np.where(sq > 0, sq * np.log(np.where(sq > 0, sq, 1.0)), 0.0)
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = kern + TPS_REG * np.eye(k)
    system[:k, k] = 1.0
    system[:k, k + 1 :] = ctrl
    system[k, :k] = 1.0
    system[k + 1 :, :k] = ctrl.T
    # Only the columns acting on the K displacement targets are needed.
    return np.linalg.inv(system)[:, :k]


def _tps_solver(dtype, device):
    return torch.as_tensor(_tps_solver_np(), dtype=dtype, device=device)


def tps_coefficients(offsets):
    """Kernel weights ``(B, K, 2)`` and affine part ``(B, 3, 2)`` of the TPS."""
    b = offsets.shape[0]
    k = TPS_GRID**2
    disp = offsets.reshape(b, k, 2)
    solver = _tps_solver(offsets.dtype, offsets.device)
    coeffs = torch.einsum("ik,bkc->bic", solver, disp)
    return coeffs[:, :k], coeffs[:, k:]


def _apply_affine(coeffs, points):
    m = coeffs.reshape(-1, 2, 3)
    return points @ m[:, :, :2].transpose(1, 2) + m[:, None, :, 2]


def _apply_tps(offsets, points):
    weights, lin = tps_coefficients(offsets)
    ctrl = tps_control_points(points.dtype).to(points.device)
    sq = ((points[:, :, None, :] - ctrl[None, None]) ** 2).sum(-1)
    disp = _tps_kernel(sq) @ weights
    disp = disp + lin[:, None, 0] + points[..., :1] * lin[:, None, 1] + points[..., 1:] * lin[:, None, 2]
    return points + disp


def apply_transform(params, points):
    """Map points through ``params``.

    ``points`` may be a :class:`CoordGrid`, an ``(N, 2)`` tensor shared by
    every batch entry, or a ``(B, N, 2)`` tensor.  Returns ``(B, N, 2)``, or
    ``(N, 2)`` when both the input points and the transform are unbatched
    (batch size one).
    """
    if isinstance(points, CoordGrid):
        points = points.points
    for t in params._tensors():
        if not torch.isfinite(t).all():
            raise NonFiniteTransformError("transform parameters must be finite")
    squeeze = points.dim() == 2
    b = params.batch_size
    pts = points.to(params._tensors()[0].dtype)
    if squeeze:
        pts = pts.unsqueeze(0).expand(b, -1, -1)
    if params.affine is not None:
        pts = _apply_affine(params.affine, pts)
    if params.tps is not None:
        pts = _apply_tps(params.tps, pts)
    if squeeze and b == 1:
        return pts[0]
    return pts


def projection_error(params, p, q):
    """Euclidean distance between ``T(p)`` and ``q``."""
    p = torch.as_tensor(p, dtype=params._tensors()[0].dtype).reshape(-1, 2)
    q = torch.as_tensor(q, dtype=p.dtype)
    return torch.linalg.vector_norm(apply_transform(params, p) - q, dim=-1).squeeze()


def warp(field, params, mode="bilinear"):
    """Backward-sample ``field`` through ``params``.

    Output location ``x`` reads ``field`` at ``T(x)``, so to move content
    from image A into the frame of image B pass the B->A transform.  Samples
    falling outside the field read zero.

    ``field`` is ``(B, C, H, W)``, a single ``(H, W)`` scalar map, or a single
    ``(H, W, 3)`` colour image; the output matches the input layout.
    """
    if field.dim() == 2:
        return warp(field[None, None], params, mode)[0, 0]
    if field.dim() == 3:
        if field.shape[-1] != 3:
            raise ValueError("3-D fields must be (H, W, 3) images")
        return warp(field.permute(2, 0, 1)[None], params, mode)[0].permute(1, 2, 0)
    b, _, h, w = field.shape
    grid = pixel_grid(h, w, dtype=field.dtype).to(field.device).reshape(-1, 2)
    if params.batch_size != b:
        if params.batch_size != 1:
            raise ValueError("transform batch does not match field batch")
        params = Transform(
            params.kind,
            None if params.affine is None else params.affine.expand(b, -1),
            None if params.tps is None else params.tps.expand(b, -1),
        )
    src = apply_transform(params, grid.unsqueeze(0).expand(b, -1, -1)).to(field.dtype)
    return F.grid_sample(
        field, src.reshape(b, h, w, 2), mode=mode, padding_mode="zeros", align_corners=False
    )
