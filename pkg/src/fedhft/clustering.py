"""Client clustering from classifier-weight updates.

Each round the server flattens every reporting client's post-training
classifier relative to the mean of the cluster classifiers at round start,
reduces the vectors with PCA, fits a diagonal-covariance Gaussian mixture by
EM (warm-started from the previous round), and turns component posteriors
into soft cluster assignment scores. Assignments stay frozen at uniform
during the warmup rounds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .numerics import PcaModel, RngStream, pca_fit, pca_transform

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class GmmParams:
    """Diagonal-covariance mixture: weights on the simplex, positive variances."""

    weights: np.ndarray      # (C,)
    means: np.ndarray        # (C, d)
    variances: np.ndarray    # (C, d), every entry >= VAR_FLOOR
    loglik_history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ParameterError(f"mixture weights sum to {self.weights.sum():.12f}")
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-12)):
            raise ParameterError("variance below floor")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class UpdateFeature:
    client_id: int
    u: np.ndarray            # reduced coordinates, one dim per PCA component


def require_assignment_matrix(p: np.ndarray) -> None:
    """Rows must be probability vectors."""
    if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
        raise ParameterError("assignment entries outside [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ParameterError("assignment rows must sum to 1")


def uniform_assignments(n_clients: int, n_clusters: int) -> np.ndarray:
    return np.full((n_clients, n_clusters), 1.0 / n_clusters)


def assignment_entropy(p: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the assignment rows."""
    q = np.clip(p, 1e-300, 1.0)
    return float(np.mean(-(q * np.log(q)).sum(axis=1)))


def build_features(
    head_updates: dict[int, np.ndarray],
    cluster_heads_at_round_start: np.ndarray,
    pca_dim: int,
) -> tuple[PcaModel, list[UpdateFeature]] | None:
    """Raw vector per client = its post-training classifier minus the mean of
    the round-start cluster classifiers; PCA is fit on the reporting clients.

    Returns None (clustering skipped) with fewer than 2 reporting clients.
    """
    if len(head_updates) < 2:
        log.warning("only %d clients reporting; clustering skipped", len(head_updates))
        return None
    center = np.mean(
        [np.asarray(h, dtype=np.float64).ravel() for h in cluster_heads_at_round_start], axis=0
    )
    ids = sorted(head_updates)
    raw = np.stack([np.asarray(head_updates[k], dtype=np.float64).ravel() - center for k in ids])
    k_eff = min(pca_dim, len(ids) - 1, raw.shape[1])
    model = pca_fit(raw, k_eff)
    reduced = pca_transform(model, raw)
    return model, [UpdateFeature(client_id=k, u=reduced[i]) for i, k in enumerate(ids)]


def _log_density(params: GmmParams, x: np.ndarray) -> np.ndarray:
    """(n, C) matrix of log(alpha_c) + log N(x | mu_c, diag(var_c))."""
    diff = x[:, None, :] - params.means[None, :, :]
    quad = (diff**2 / params.variances[None, :, :]).sum(axis=2)
    logdet = np.log(params.variances).sum(axis=1)
    d = x.shape[1]
    logphi = -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))
    return logphi + np.log(np.clip(params.weights, 1e-300, None))[None, :]


def _log_responsibilities(params: GmmParams, x: np.ndarray) -> tuple[np.ndarray, float]:
    joint = _log_density(params, x)
    rowmax = joint.max(axis=1, keepdims=True)
    lse = rowmax[:, 0] + np.log(np.exp(joint - rowmax).sum(axis=1))
    return joint - lse[:, None], float(lse.sum())


def _seed_means(x: np.ndarray, c: int, rng: RngStream | None) -> np.ndarray:
    """Greedy farthest-point seeding: spread-out and order-independent.

    The first center is the point farthest from the data mean; each next
    center maximizes its distance to the chosen set. Exact-duplicate data can
    leave no spread, in which case remaining centers are drawn via rng.
    """
    centers = [x[int(np.argmax(np.linalg.norm(x - x.mean(axis=0), axis=1)))]]
    gen = rng.generator() if rng is not None else None
    while len(centers) < c:
        d2 = np.min(
            [np.sum((x - ctr) ** 2, axis=1) for ctr in centers], axis=0
        )
        best = int(np.argmax(d2))
        if d2[best] <= 0.0 and gen is not None:
            best = int(gen.integers(0, x.shape[0]))
        centers.append(x[best])
    return np.stack(centers)


def _em_run(
    x: np.ndarray,
    weights: np.ndarray,
    means: np.ndarray,
    variances: np.ndarray,
    max_iters: int,
    tol: float,
) -> GmmParams:
    n = x.shape[0]
    global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    history: list[float] = []
    for _ in range(max_iters):
        params = GmmParams(weights=weights, means=means, variances=variances)
        logresp, loglik = _log_responsibilities(params, x)
        history.append(loglik)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * (1 + abs(history[-2])):
            break
        resp = np.exp(logresp)
        mass = resp.sum(axis=0)
        for c in np.flatnonzero(mass < 1e-8):
            # Re-seed a starved component at the point farthest from the means.
            d2 = np.min([np.sum((x - m) ** 2, axis=1) for m in means], axis=0)
            far = int(np.argmax(d2))
            log.warning("GMM component %d collapsed; re-seeding at point %d", c, far)
            means = means.copy()
            means[c] = x[far]
            variances = variances.copy()
            variances[c] = global_var
            resp[:, c] = 1.0 / n
            mass[c] = resp[:, c].sum()
        weights = mass / mass.sum()
        means = (resp.T @ x) / mass[:, None]
        sq = resp.T @ (x**2) / mass[:, None]
        variances = np.maximum(sq - means**2, VAR_FLOOR)
    return GmmParams(
        weights=weights, means=means, variances=variances, loglik_history=tuple(history)
    )


def gmm_fit(
    features: np.ndarray,
    n_components: int,
    max_iters: int = 100,
    tol: float = 1e-7,
    prev: GmmParams | None = None,
    rng: RngStream | None = None,
) -> GmmParams:
    """EM for a diagonal-covariance mixture.

    Always runs from farthest-point seeding; when ``prev`` matches the feature
    dimension a warm-started run competes too and the higher final
    log-likelihood wins. The warm start carries continuity between successive
    fits on slowly-drifting data while the fresh run catches cases where the
    feature space moved out from under the old parameters. The returned params
    carry the winning run's per-iteration log-likelihood trace, non-decreasing
    up to float noise except immediately after an empty-component re-seed.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n_components < 1:
        raise ParameterError("need at least one component")
    if n < n_components:
        raise ParameterError(f"{n} points cannot support {n_components} components")
    global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    fresh = _em_run(
        x,
        np.full(n_components, 1.0 / n_components),
        _seed_means(x, n_components, rng),
        np.tile(global_var, (n_components, 1)),
        max_iters,
        tol,
    )
    best = fresh
    if prev is not None and prev.means.shape == (n_components, d):
        warm = _em_run(
            x,
            prev.weights.copy(),
            prev.means.copy(),
            np.maximum(prev.variances.copy(), VAR_FLOOR),
            max_iters,
            tol,
        )
        if warm.loglik_history[-1] >= fresh.loglik_history[-1]:
            best = warm
    return best


def posterior(params: GmmParams, features: np.ndarray) -> np.ndarray:
    """Row-stochastic component posteriors, computed in log space.

    A row whose every component log-density is non-finite falls back to the
    uniform distribution (logged) rather than propagating NaNs.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    joint = _log_density(params, x)
    rowmax = joint.max(axis=1, keepdims=True)
    bad = ~np.isfinite(rowmax[:, 0])
    if np.any(bad):
        log.warning("%d feature rows underflowed every component; using uniform", int(bad.sum()))
        joint[bad] = 0.0
        rowmax = joint.max(axis=1, keepdims=True)
    p = np.exp(joint - rowmax)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _align_components(
    rows: np.ndarray, prev_rows: np.ndarray, gmm: GmmParams
) -> tuple[np.ndarray, GmmParams]:
    """Permute mixture components to maximize overlap with the previous
    assignments of the same clients.

    A refit can converge to a relabeling of the same partition; without
    alignment that would silently re-point every client at a differently
    specialized cluster bank. Greedy matching on the posterior-overlap matrix
    keeps component identity tied to bank identity.
    """
    c = rows.shape[1]
    overlap = rows.T @ prev_rows      # overlap[new, old]
    perm = np.full(c, -1)
    used_new, used_old = set(), set()
    for _ in range(c):
        best, pair = -1.0, None
        for i in range(c):
            if i in used_new:
                continue
            for j in range(c):
                if j in used_old:
                    continue
                if overlap[i, j] > best:
                    best, pair = overlap[i, j], (i, j)
        used_new.add(pair[0])
        used_old.add(pair[1])
        perm[pair[1]] = pair[0]        # old slot j takes new component i
    aligned_rows = rows[:, perm]
    aligned = GmmParams(
        weights=gmm.weights[perm],
        means=gmm.means[perm],
        variances=gmm.variances[perm],
        loglik_history=gmm.loglik_history,
    )
    return aligned_rows, aligned


def update_assignments(
    assignments: np.ndarray,
    round_t: int,
    warmup_rounds: int,
    head_updates: dict[int, np.ndarray],
    cluster_heads_at_round_start: np.ndarray,
    pca_dim: int,
    prev_gmm: GmmParams | None,
    rng: RngStream | None = None,
) -> tuple[np.ndarray, GmmParams | None, PcaModel | None]:
    """Warmup-gated assignment refresh.

    Before ``warmup_rounds`` have elapsed the matrix is returned untouched.
    Afterwards only reporting clients get new rows; absent clients keep their
    previous scores. Refitted components are aligned to the previous rows so
    cluster identity stays stable across rounds.
    """
    require_assignment_matrix(assignments)
    n_clusters = assignments.shape[1]
    if round_t < warmup_rounds:
        return assignments, prev_gmm, None
    built = build_features(head_updates, cluster_heads_at_round_start, pca_dim)
    if built is None:
        return assignments, prev_gmm, None
    pca_model, feats = built
    x = np.stack([f.u for f in feats])
    gmm = gmm_fit(x, n_clusters, prev=prev_gmm, rng=rng)
    rows = posterior(gmm, x)
    if n_clusters > 1:
        prev_rows = np.stack([assignments[f.client_id] for f in feats])
        rows, gmm = _align_components(rows, prev_rows, gmm)
    out = assignments.copy()
    for i, f in enumerate(feats):
        out[f.client_id] = rows[i]
    return out, gmm, pca_model
