"""Independent reference implementations used only to cross-check the
package. Nothing here may call the code paths under test: the SVD is a
hand-rolled one-sided Jacobi iteration, gradients come from central
differences, and the small aggregation/merge oracles are plain loops.
"""
from __future__ import annotations

import numpy as np


def jacobi_svd(m: np.ndarray, max_sweeps: int = 60, tol: float = 1e-13):
    """One-sided Jacobi SVD built from plane rotations only.

    Returns (u, s, vt) with singular values in non-increasing order; columns
    of the working matrix are orthogonalized pairwise until convergence, so
    no LAPACK factorization is involved.
    """
    a = np.array(m, dtype=np.float64)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                apq = a[:, p] @ a[:, q]
                denom = np.sqrt(app * aqq)
                if denom > 0:
                    off = max(off, abs(apq) / denom)
                if abs(apq) < 1e-300:
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off < tol:
            break
    sigma = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    for j in range(n):
        if sigma[j] > 1e-300:
            u[:, j] = a[:, j] / sigma[j]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def jacobi_rank_r_product(m: np.ndarray, r: int) -> np.ndarray:
    """Best rank-r approximation assembled from the Jacobi SVD."""
    u, s, vt = jacobi_svd(m)
    return (u[:, :r] * s[:r]) @ vt[:r]


def brute_force_row_importance(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Double loop over (row, column) inner products, squared and summed."""
    d_out = b.shape[0]
    d_in = a.shape[1]
    scores = np.zeros(d_out)
    for d in range(d_out):
        for dp in range(d_in):
            scores[d] += float(np.dot(b[d, :], a[:, dp])) ** 2
    return scores


def zero_masked_rows(delta: np.ndarray, kept_rows: np.ndarray) -> np.ndarray:
    """Row-zeroing reconstruction reference."""
    out = np.zeros_like(delta)
    for r in kept_rows:
        out[int(r)] = delta[int(r)]
    return out


def weighted_sum(mats: list[np.ndarray], weights: list[float]) -> np.ndarray:
    out = np.zeros_like(mats[0])
    for w, m in zip(weights, mats):
        out = out + w * m
    return out


def gaussian_posterior_longdouble(weights, means, variances, x) -> np.ndarray:
    """Direct density-ratio posterior in extended precision (no log-space)."""
    weights = np.asarray(weights, dtype=np.longdouble)
    means = np.asarray(means, dtype=np.longdouble)
    variances = np.asarray(variances, dtype=np.longdouble)
    x = np.asarray(x, dtype=np.longdouble)
    n, d = x.shape
    c = means.shape[0]
    post = np.zeros((n, c), dtype=np.longdouble)
    for i in range(n):
        dens = np.zeros(c, dtype=np.longdouble)
        for j in range(c):
            diff = x[i] - means[j]
            quad = np.sum(diff * diff / variances[j])
            norm = np.prod(np.sqrt(2 * np.pi * variances[j]))
            dens[j] = weights[j] * np.exp(-quad / 2) / norm
        post[i] = dens / dens.sum()
    return post.astype(np.float64)


def spearman_rho(xs, ys) -> float:
    """Rank correlation without ties handling refinements (inputs here are
    distinct by construction)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    rx = np.argsort(np.argsort(xs))
    ry = np.argsort(np.argsort(ys))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))
