"""Brute-force reference implementations used by the oracle tests.

Everything here is written with explicit Python loops over plain floats
and shares no code with the package beyond the conventions it pins:
normalized coordinates with ``align_corners=False`` pixel centres, a 3x3
TPS control lattice over ``[-1, 1]^2`` and zero padding outside the field.
"""

import math

import numpy as np

TPS_REG = 1e-6


def cosine(u, v, eps=1e-8):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv + eps)


def correlate(fa, fb):
    """``fa``: (d, hA, wA), ``fb``: (d, hB, wB) -> (hA, wA, hB*wB)."""
    d, ha, wa = fa.shape
    _, hb, wb = fb.shape
    out = np.zeros((ha, wa, hb * wb))
    for i in range(ha):
        for j in range(wa):
            u = [float(fa[c, i, j]) for c in range(d)]
            for k in range(hb):
                for l in range(wb):
                    v = [float(fb[c, k, l]) for c in range(d)]
                    out[i, j, k * wb + l] = cosine(u, v)
    return out


def match_score(S, m):
    """``S``, ``m``: (h, w, N) -> (h, w)."""
    h, w, n = S.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            total = 0.0
            for q in range(n):
                total += float(m[i, j, q]) * float(S[i, j, q])
            out[i, j] = total
    return out


def matching_loss(s_a, s_b, m_a, m_b):
    """Single pair at feature resolution."""
    total = 0.0
    for s, m in ((s_a, m_a), (s_b, m_b)):
        for i in range(s.shape[0]):
            for j in range(s.shape[1]):
                total += float(s[i, j]) * float(m[i, j])
    return -total


def affine_point(coeffs, x, y):
    a, b, c, d, e, f = (float(v) for v in coeffs)
    return a * x + b * y + c, d * x + e * y + f


def _solve(matrix, rhs):
    """Gauss-Jordan elimination with partial pivoting on lists of floats."""
    n = len(matrix)
    aug = [list(map(float, matrix[i])) + list(map(float, rhs[i])) for i in range(n)]
    cols = len(aug[0])
    for c in range(n):
        piv = max(range(c, n), key=lambda r: abs(aug[r][c]))
        aug[c], aug[piv] = aug[piv], aug[c]
        p = aug[c][c]
        aug[c] = [v / p for v in aug[c]]
        for r in range(n):
            if r != c and aug[r][c] != 0.0:
                f = aug[r][c]
                aug[r] = [vr - f * vc for vr, vc in zip(aug[r], aug[c])]
    return [row[n:cols] for row in aug]


def _u(r2):
    return r2 * math.log(r2) if r2 > 0 else 0.0


CONTROL = [(x, y) for y in (-1.0, 0.0, 1.0) for x in (-1.0, 0.0, 1.0)]


def tps_point(offsets, x, y):
    """Interpolate control displacements ``offsets`` (18 values) at ``(x, y)``."""
    k = len(CONTROL)
    n = k + 3
    system = [[0.0] * n for _ in range(n)]
    for i, (xi, yi) in enumerate(CONTROL):
        for j, (xj, yj) in enumerate(CONTROL):
            system[i][j] = _u((xi - xj) ** 2 + (yi - yj) ** 2) + (TPS_REG if i == j else 0.0)
        system[i][k] = system[k][i] = 1.0
        system[i][k + 1] = system[k + 1][i] = xi
        system[i][k + 2] = system[k + 2][i] = yi
    rhs = [[float(offsets[2 * i]), float(offsets[2 * i + 1])] for i in range(k)] + [[0.0, 0.0]] * 3
    coef = _solve(system, rhs)
    dx = coef[k][0] + coef[k + 1][0] * x + coef[k + 2][0] * y
    dy = coef[k][1] + coef[k + 1][1] * x + coef[k + 2][1] * y
    for i, (xi, yi) in enumerate(CONTROL):
        u = _u((x - xi) ** 2 + (y - yi) ** 2)
        dx += coef[i][0] * u
        dy += coef[i][1] * u
    return x + dx, y + dy


def bilinear(field, x, y):
    """Sample an (H, W) array at normalized ``(x, y)``; outside reads 0."""
    h, w = field.shape
    u = ((x + 1.0) * w - 1.0) / 2.0
    v = ((y + 1.0) * h - 1.0) / 2.0
    u0, v0 = math.floor(u), math.floor(v)
    total = 0.0
    for du in (0, 1):
        for dv in (0, 1):
            uu, vv = u0 + du, v0 + dv
            wt = (1.0 - abs(u - uu)) * (1.0 - abs(v - vv))
            if 0 <= uu < w and 0 <= vv < h:
                total += wt * float(field[vv, uu])
    return total


def pixel_centre(i, n):
    return (2.0 * i + 1.0) / n - 1.0


def warp_affine(field, coeffs):
    """Output pixel reads ``field`` at the affine image of its centre."""
    h, w = field.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            sx, sy = affine_point(coeffs, pixel_centre(j, w), pixel_centre(i, h))
            out[i, j] = bilinear(field, sx, sy)
    return out


def bce(target, pred, eps=1e-6):
    total = 0.0
    h, w = target.shape
    for i in range(h):
        for j in range(w):
            t = float(target[i, j])
            p = min(max(float(pred[i, j]), eps), 1.0 - eps)
            total += t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
    return -total / (h * w)


def task_consistency(m_a, m_b, coeffs_ab, coeffs_ba):
    """Affine-only version of the symmetric warped-mask BCE."""
    return bce(warp_affine(m_a, coeffs_ba), m_b) + bce(warp_affine(m_b, coeffs_ab), m_a)


def precision(pred, gt):
    hits = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        hits += int(bool(p) == bool(g))
    return hits / np.asarray(pred).size


def jaccard(pred, gt):
    inter = union = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        inter += int(bool(p) and bool(g))
        union += int(bool(p) or bool(g))
    return 1.0 if union == 0 else inter / union


def otsu_scan(values, bins=256):
    """Exhaustive scan: every split ``t`` (bins ``>= t`` foreground).

    Returns ``(best_t, best_variance, variances)``; ``best_t`` is ``None``
    when no split leaves both classes nonempty.
    """
    counts = [0] * bins
    for v in np.asarray(values, dtype=np.float64).ravel():
        counts[min(max(int(v * bins), 0), bins - 1)] += 1
    total = sum(counts)
    best_t, best, variances = None, -1.0, {}
    for t in range(1, bins):
        n0 = sum(counts[:t])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = sum(counts[i] * (i + 0.5) / bins for i in range(t)) / n0
        mu1 = sum(counts[i] * (i + 0.5) / bins for i in range(t, bins)) / n1
        var = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
        variances[t] = var
        if var > best:
            best_t, best = t, var
    return best_t, best, variances


def correspondence_table(points_a, points_b, spacing, phi):
    """Hard mask by explicit distance computation in grid-cell units."""
    dx, dy = spacing
    out = np.zeros((len(points_a), len(points_b)))
    for i, (xa, ya) in enumerate(points_a):
        for j, (xb, yb) in enumerate(points_b):
            d = math.hypot((xa - xb) / dx, (ya - yb) / dy)
            out[i, j] = 1.0 if d <= phi + 1e-9 else 0.0
    return out


def contrastive(fo_a, fo_b, fb_a, fb_b, margin):
    c = len(fo_a)
    d_pos = sum((a - b) ** 2 for a, b in zip(fo_a, fo_b)) / c
    spread = (sum((a - b) ** 2 for a, b in zip(fo_a, fb_a)) + sum((a - b) ** 2 for a, b in zip(fo_b, fb_b))) / (2 * c)
    return d_pos, max(0.0, margin - spread)
