"""Minimal absolute pose solver for a generalized (multi-center) camera.

Three rays ``o_i + l_i f_i`` (rig frame) must reach three world points
``X_i``.  Rigidity gives three quadrics in the depths ``l_i``::

    |o_i - o_j + l_i f_i - l_j f_j|^2 = |X_i - X_j|^2

``l3`` is eliminated from the (1,3) and (2,3) quadrics with a resultant,
the result is reduced modulo the (1,2) quadric, and what remains is an
octic in ``l1``.  Real positive roots are back-substituted, polished with
Newton steps on the original quadrics, and the pose follows from aligning
the three rig-frame points onto the world points.

Everything is vectorized over a leading sample axis so RANSAC can solve a
whole batch of minimal samples at once.
"""

from __future__ import annotations

import numpy as np

from mcloc.pose import Pose

_PAIRS = ((0, 1), (0, 2), (1, 2))


class DegenerateConfigurationError(ValueError):
    """Collinear world points or duplicated rays."""


# -- batched bivariate polynomials: arrays (n, deg1 + 1, deg2 + 1) -------------

def _bmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, a1, a2 = a.shape
    _, b1, b2 = b.shape
    out = np.zeros((n, a1 + b1 - 1, a2 + b2 - 1))
    for i in range(a1):
        for j in range(a2):
            coef = a[:, i, j]
            if not np.any(coef):
                continue
            out[:, i:i + b1, j:j + b2] += coef[:, None, None] * b
    return out


def _badd(a: np.ndarray, b: np.ndarray, sign: float = 1.0) -> np.ndarray:
    n = a.shape[0]
    out = np.zeros((n, max(a.shape[1], b.shape[1]), max(a.shape[2], b.shape[2])))
    out[:, :a.shape[1], :a.shape[2]] += a
    out[:, :b.shape[1], :b.shape[2]] += sign * b
    return out


def _umul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched univariate product, coefficients low to high."""
    n, da = a.shape
    db = b.shape[1]
    out = np.zeros((n, da + db - 1))
    for i in range(da):
        out[:, i:i + db] += a[:, i:i + 1] * b
    return out


def _uadd(*polys: np.ndarray) -> np.ndarray:
    n = polys[0].shape[0]
    out = np.zeros((n, max(p.shape[1] for p in polys)))
    for p in polys:
        out[:, :p.shape[1]] += p
    return out


def _quadric_coefficients(o: np.ndarray, f: np.ndarray, X: np.ndarray):
    """Per pair (i, j): b = f_i.f_j, ci = c.f_i, cj = c.f_j, e = |c|^2 - d^2."""
    coeffs = {}
    for i, j in _PAIRS:
        c = o[:, i] - o[:, j]
        d2 = np.sum((X[:, i] - X[:, j]) ** 2, axis=1)
        coeffs[i, j] = (
            np.sum(f[:, i] * f[:, j], axis=1),
            np.sum(c * f[:, i], axis=1),
            np.sum(c * f[:, j], axis=1),
            np.sum(c * c, axis=1) - d2,
        )
    return coeffs


def _residuals(lam: np.ndarray, coeffs: dict, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadric residuals (k, 3) and Jacobian (k, 3, 3) at depths ``lam``."""
    k = lam.shape[0]
    F = np.zeros((k, 3))
    J = np.zeros((k, 3, 3))
    for row, (i, j) in enumerate(_PAIRS):
        b, ci, cj, e = (v[idx] for v in coeffs[i, j])
        li, lj = lam[:, i], lam[:, j]
        F[:, row] = li**2 + lj**2 - 2 * b * li * lj + 2 * ci * li - 2 * cj * lj + e
        J[:, row, i] = 2 * li - 2 * b * lj + 2 * ci
        J[:, row, j] = 2 * lj - 2 * b * li - 2 * cj
    return F, J


def _octic(coeffs: dict) -> np.ndarray:
    """Octic coefficients in l1 (n, 9), low to high."""
    b12, c12i, c12j, e12 = coeffs[0, 1]
    b13, c13i, c13j, e13 = coeffs[0, 2]
    b23, c23i, c23j, e23 = coeffs[1, 2]
    n = b12.shape[0]
    zero = np.zeros(n)
    one = np.ones(n)

    # E13 as x^2 + p1 x + p0 in x = l3, coefficients are polynomials in l1.
    # E23 likewise with q1, q0 polynomials in l2.  Bivariate layout [l1, l2].
    p1 = np.stack([-2 * c13j, -2 * b13], axis=1)[:, :, None]
    p0 = np.stack([e13, 2 * c13i, one], axis=1)[:, :, None]
    q1 = np.stack([-2 * c23j, -2 * b23], axis=1)[:, None, :]
    q0 = np.stack([e23, 2 * c23i, one], axis=1)[:, None, :]

    # Res = (p0 - q0)^2 + (p1 - q1)(p1 q0 - p0 q1)
    dp0 = _badd(p0, q0, -1.0)
    dp1 = _badd(p1, q1, -1.0)
    cross = _badd(_bmul(p1, q0), _bmul(p0, q1), -1.0)
    res = _badd(_bmul(dp0, dp0), _bmul(dp1, cross))  # (n, 5, 5)

    # E12: l2^2 = A l2 + B with A, B polynomials in l1
    A = np.stack([2 * c12j, 2 * b12], axis=1)
    B = np.stack([-e12, -2 * c12i, -one], axis=1)
    # l2^k = u_k l2 + v_k
    u = [np.stack([zero], 1), np.stack([one], 1)]
    v = [np.stack([one], 1), np.stack([zero], 1)]
    for _ in range(2, res.shape[2]):
        uk, vk = u[-1], v[-1]
        u.append(_uadd(_umul(uk, A), vk))
        v.append(_umul(uk, B))
    C = _uadd(*[_umul(res[:, :, k], u[k]) for k in range(res.shape[2])])
    D = _uadd(*[_umul(res[:, :, k], v[k]) for k in range(res.shape[2])])
    # D^2 + A C D - B C^2 = 0
    poly = _uadd(_umul(D, D), _umul(_umul(A, C), D), -_umul(B, _umul(C, C)))
    out = np.zeros((n, 9))
    out[:, :min(9, poly.shape[1])] = poly[:, :9]
    return out


def _real_roots(poly: np.ndarray) -> list[tuple[int, float]]:
    """All (sample, root) pairs of near-real roots of each octic."""
    n = poly.shape[0]
    scale = np.max(np.abs(poly), axis=1)
    scale[scale == 0] = 1.0
    poly = poly / scale[:, None]
    lead = poly[:, 8]
    regular = np.abs(lead) > 1e-10
    out: list[tuple[int, float]] = []
    if np.any(regular):
        p = poly[regular] / lead[regular, None]
        comp = np.zeros((p.shape[0], 8, 8))
        comp[:, 1:, :-1] = np.eye(7)
        comp[:, :, -1] = -p[:, :8]
        roots = np.linalg.eigvals(comp)
        rows = np.nonzero(regular)[0]
        keep = np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots.real))
        for r, c in zip(*np.nonzero(keep)):
            out.append((int(rows[r]), float(roots[r, c].real)))
    for r in np.nonzero(~regular)[0]:
        coeffs = np.trim_zeros(poly[r][::-1], "f")
        if len(coeffs) < 2:
            continue
        for z in np.roots(coeffs):
            if abs(z.imag) <= 1e-6 * (1.0 + abs(z.real)):
                out.append((int(r), float(z.real)))
    return out


def _best_quadratic_root(a1: np.ndarray, a0: np.ndarray, check) -> np.ndarray:
    """Root of x^2 + a1 x + a0 that best satisfies ``check(x) ~ 0``."""
    disc = np.maximum(a1**2 - 4 * a0, 0.0)
    sq = np.sqrt(disc)
    x1 = 0.5 * (-a1 + sq)
    x2 = 0.5 * (-a1 - sq)
    return np.where(np.abs(check(x1)) <= np.abs(check(x2)), x1, x2)


def _align(Y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation/translation with X = R Y + t for stacks of 3-point sets."""
    yc = Y.mean(axis=1)
    xc = X.mean(axis=1)
    H = np.einsum("kpi,kpj->kij", Y - yc[:, None], X - xc[:, None])
    U, _, Vt = np.linalg.svd(H)
    det = np.linalg.det(Vt) * np.linalg.det(U)
    S = np.tile(np.eye(3), (len(H), 1, 1))
    S[:, 2, 2] = np.sign(det)
    S[S[:, 2, 2] == 0, 2, 2] = 1.0
    R = np.einsum("kji,kjl,kml->kim", Vt, S, U)
    t = xc - np.einsum("kij,kj->ki", R, yc)
    return R, t


def degenerate_mask(origins: np.ndarray, directions: np.ndarray, points: np.ndarray,
                    min_area: float = 1e-10) -> np.ndarray:
    """True for samples with (near) collinear points or duplicated rays."""
    a = points[:, 1] - points[:, 0]
    b = points[:, 2] - points[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    bad = area <= min_area
    for i, j in _PAIRS:
        same_origin = np.linalg.norm(origins[:, i] - origins[:, j], axis=1) <= 1e-12
        same_dir = np.linalg.norm(directions[:, i] - directions[:, j], axis=1) <= 1e-12
        bad |= same_origin & same_dir
    return bad


def gp3p_solve_batch(origins: np.ndarray, directions: np.ndarray, points: np.ndarray,
                     newton_steps: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve many minimal problems at once.

    Shapes: (n, 3, 3) each, indexed [sample, correspondence, xyz].  Degenerate
    samples yield no solutions.  Returns rotations (k, 3, 3), translations
    (k, 3) and the sample index (k,) of every world-from-rig solution.
    """
    origins = np.asarray(origins, dtype=float)
    directions = np.asarray(directions, dtype=float)
    points = np.asarray(points, dtype=float)
    empty = (np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    if origins.shape[0] == 0:
        return empty
    ok = ~degenerate_mask(origins, directions, points)
    if not np.any(ok):
        return empty
    rows = np.nonzero(ok)[0]
    o, f, X = origins[rows], directions[rows], points[rows]
    f = f / np.linalg.norm(f, axis=2, keepdims=True)

    # normalize: center both sides and scale by the world point spread
    xc = X.mean(axis=1)
    oc = o.mean(axis=1)
    scale = np.max(np.linalg.norm(X - xc[:, None], axis=2), axis=1)
    Xn = (X - xc[:, None]) / scale[:, None, None]
    on = (o - oc[:, None]) / scale[:, None, None]

    coeffs = _quadric_coefficients(on, f, Xn)
    pairs = _real_roots(_octic(coeffs))
    if not pairs:
        return empty
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    l1 = np.array([p[1] for p in pairs])

    b12, c12i, c12j, e12 = (v[idx] for v in coeffs[0, 1])
    b13, c13i, c13j, e13 = (v[idx] for v in coeffs[0, 2])
    b23, c23i, c23j, e23 = (v[idx] for v in coeffs[1, 2])

    # l3 in terms of (l1, l2) from E13 - E23, used to pick the right l2 branch
    def l3_of(l2):
        dp1 = (-2 * b13 * l1 - 2 * c13j) - (-2 * b23 * l2 - 2 * c23j)
        dp0 = (l1**2 + 2 * c13i * l1 + e13) - (l2**2 + 2 * c23i * l2 + e23)
        safe = np.where(np.abs(dp1) < 1e-14, 1e-14, dp1)
        return -dp0 / safe

    def e13_res(l2):
        l3 = l3_of(l2)
        return l1**2 + l3**2 - 2 * b13 * l1 * l3 + 2 * c13i * l1 - 2 * c13j * l3 + e13

    l2 = _best_quadratic_root(-2 * b12 * l1 - 2 * c12j, l1**2 + 2 * c12i * l1 + e12, e13_res)
    l3 = _best_quadratic_root(
        -2 * b13 * l1 - 2 * c13j, l1**2 + 2 * c13i * l1 + e13,
        lambda x: l2**2 + x**2 - 2 * b23 * l2 * x + 2 * c23i * l2 - 2 * c23j * x + e23)
    lam = np.stack([l1, l2, l3], axis=1)

    for _ in range(newton_steps):
        F, J = _residuals(lam, coeffs, idx)
        good = np.abs(np.linalg.det(J)) > 1e-14
        if not np.any(good):
            break
        step = np.zeros_like(lam)
        step[good] = np.linalg.solve(J[good], F[good][:, :, None])[:, :, 0]
        lam = lam - step

    F, _ = _residuals(lam, coeffs, idx)
    valid = (np.max(np.abs(F), axis=1) < 1e-9) & np.all(lam > 1e-9, axis=1)
    lam, idx = lam[valid], idx[valid]
    if len(idx) == 0:
        return empty

    # drop duplicate roots of the same sample
    order = np.lexsort((lam[:, 0], idx))
    lam, idx = lam[order], idx[order]
    dup = np.zeros(len(idx), dtype=bool)
    dup[1:] = (idx[1:] == idx[:-1]) & (np.max(np.abs(lam[1:] - lam[:-1]), axis=1) < 1e-7)
    lam, idx = lam[~dup], idx[~dup]

    Y = on[idx] + lam[:, :, None] * f[idx]
    R, tn = _align(Y, Xn[idx])
    s = scale[idx]
    # undo normalization: X = R (o - oc + l f) + s*tn + xc  with o scaled by s
    t = s[:, None] * tn + xc[idx] - np.einsum("kij,kj->ki", R, oc[idx])
    return R, t, rows[idx]


def gp3p_solve(origins: np.ndarray, directions: np.ndarray, points: np.ndarray) -> list[Pose]:
    """All world-from-rig poses consistent with three ray/point pairs.

    ``origins`` are ray origins (camera centers) in the rig frame,
    ``directions`` unit ray directions in the rig frame and ``points`` the
    matching world points, each of shape (3, 3).
    """
    origins = np.asarray(origins, dtype=float).reshape(1, 3, 3)
    directions = np.asarray(directions, dtype=float).reshape(1, 3, 3)
    points = np.asarray(points, dtype=float).reshape(1, 3, 3)
    norms = np.linalg.norm(directions, axis=2)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("ray directions must be unit vectors")
    if degenerate_mask(origins, directions, points)[0]:
        raise DegenerateConfigurationError("collinear world points or duplicated rays")
    R, t, _ = gp3p_solve_batch(origins, directions, points)
    return [Pose.from_matrix(Ri, ti) for Ri, ti in zip(R, t)]
