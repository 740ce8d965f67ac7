"""Dense-matrix utilities: truncated SVD, PCA, splittable RNG streams and a
finite-difference gradient oracle.

All arrays are float64 and treated as immutable by every function here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {m.shape}")
    require_finite(m, name)
    return m


def require_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{name} contains {bad} non-finite entries (shape {np.shape(arr)})")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical keys reproduce identical draw sequences on every platform and
    under any thread schedule, so per-client streams can run in parallel
    without coordination.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.stream_id % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, (self.stream_id + offset) % 2**64)


def svd_truncate(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-r factorization of ``m``: returns (B, A) with B = U_r diag(s),
    A = V_r^T, singular values in non-increasing order.

    The product B @ A minimizes Frobenius error over all rank-r matrices.
    """
    m = as_matrix(m, "m")
    d_out, d_in = m.shape
    if r < 1 or r > min(d_out, d_in):
        raise ParameterError(f"rank {r} outside [1, {min(d_out, d_in)}] for shape {m.shape}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"SVD failed to converge on {d_out}x{d_in} matrix "
            f"(fro norm {np.linalg.norm(m):.3e}): {exc}"
        ) from exc
    b = u[:, :r] * s[:r]
    a = vt[:r, :]
    return np.ascontiguousarray(b), np.ascontiguousarray(a)


@dataclass(frozen=True)
class PcaModel:
    """Linear projection onto the top principal directions of a sample."""

    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (k, d), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing

    @property
    def dim_out(self) -> int:
        return self.components.shape[0]


def _fix_component_signs(components: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each row positive so repeated fits
    on near-identical data do not flip directions between rounds."""
    out = components.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def pca_fit(x: np.ndarray, k: int) -> PcaModel:
    """Fit a k-component PCA to the rows of ``x`` (n samples, d features)."""
    x = as_matrix(x, "x")
    n, d = x.shape
    if n < 2:
        raise ParameterError(f"need at least 2 samples, got {n}")
    if k < 1 or k > min(n - 1, d):
        raise ParameterError(f"k={k} outside [1, {min(n - 1, d)}] for {n}x{d} sample")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = _fix_component_signs(vt[:k])
    explained = (s[:k] ** 2) / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project a vector (or rows of a matrix) into the PCA coordinate frame."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise ParameterError(
            f"input dim {x.shape[-1]} does not match model dim {model.mean.shape[0]}"
        )
    return (x - model.mean) @ model.components.T


def finite_diff_grad(f, theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Used as the independent oracle against analytic backprop.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)  # private copy; probed in place
    grad = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(theta)
        flat[i] = orig - eps
        lo = f(theta)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"function non-finite at probe coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
