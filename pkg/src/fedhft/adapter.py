"""Low-rank adapter algebra: init, mixture merging, importance scoring,
row masking, reconstruction and upload byte accounting.

An adapter approximates a weight-matrix update as the product B @ A with
B (d_out x r) and A (r x d_in). Masking drops whole output rows of the
update, so an upload carries only the surviving rows of B plus the full A
(a masked row zeroes the update regardless of A).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ParameterError, ParseError
from .numerics import RngStream, as_matrix, require_finite

WIRE_MAGIC = b"FHUP"
WIRE_VERSION = 1
WIRE_HEADER_BYTES = 32


@dataclass(frozen=True)
class AdapterPair:
    """One low-rank factor pair attached to a specific target layer."""

    B: np.ndarray       # (d_out, r)
    A: np.ndarray       # (r, d_in)
    rank: int
    target: int

    def __post_init__(self):
        if self.B.shape[1] != self.rank or self.A.shape[0] != self.rank:
            raise ParameterError(
                f"factor shapes {self.B.shape}/{self.A.shape} disagree with rank {self.rank}"
            )
        if self.rank < 1 or self.rank > min(self.B.shape[0], self.A.shape[1]):
            raise ParameterError(f"rank {self.rank} outside matrix dimensions")

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.B @ self.A


@dataclass(frozen=True)
class ImportanceVector:
    """Per-output-row sensitivity scores for one target layer."""

    scores: np.ndarray
    target: int


@dataclass(frozen=True)
class MaskedUpdate:
    """A client's masked adapter upload for one target layer.

    ``head_delta``/``head_bias_delta`` ride along unmasked on at most one
    update per client (classifier weights are never low-rank or masked).
    """

    kept_rows: np.ndarray            # strictly increasing u32 indices into d_out
    B_kept: np.ndarray               # (len(kept_rows), rank)
    A: np.ndarray                    # (rank, d_in)
    head_delta: np.ndarray | None
    head_bias_delta: np.ndarray | None
    client_id: int
    rank: int
    target: int


def init_adapter(d_out: int, d_in: int, r: int, sigma: float, rng: RngStream, target: int = 0) -> AdapterPair:
    """Fresh adapter: B all-zero, A entries i.i.d. Gaussian(0, sigma^2).

    The zero B makes the initial product vanish, so injecting a fresh
    adapter never perturbs the model.
    """
    if d_out < 1 or d_in < 1:
        raise ParameterError(f"dimensions must be positive, got {d_out}x{d_in}")
    if r < 1 or r > min(d_out, d_in):
        raise ParameterError(f"rank {r} outside [1, {min(d_out, d_in)}]")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    gen = rng.generator()
    b = np.zeros((d_out, r), dtype=np.float64)
    a = gen.normal(0.0, sigma, size=(r, d_in))
    return AdapterPair(B=b, A=a, rank=r, target=target)


def merge_mixture(pairs: list[AdapterPair], weights: np.ndarray) -> np.ndarray:
    """Weighted mixture of cluster adapters: sum_c w_c * B_c @ A_c.

    ``weights`` must be a probability row (entries in [0,1], summing to 1).
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(pairs) != w.shape[0]:
        raise ParameterError(f"{len(pairs)} pairs vs {w.shape[0]} weights")
    if np.any(w < -1e-12) or np.any(w > 1 + 1e-12):
        raise ContractViolation(f"mixture weights outside [0,1]: {w}")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ContractViolation(f"mixture weights sum to {w.sum():.12f}, expected 1")
    delta = np.zeros((pairs[0].d_out, pairs[0].d_in), dtype=np.float64)
    for wc, pair in zip(w, pairs):
        if pair.d_out != delta.shape[0] or pair.d_in != delta.shape[1]:
            raise ParameterError("mixture pairs have inconsistent shapes")
        delta += wc * (pair.B @ pair.A)
    return delta


def fisher_importance(pair: AdapterPair) -> ImportanceVector:
    """Empirical-Fisher importance of each output row.

    scores[d] = sum_d' <B[d,:], A[:,d']>^2, i.e. the squared Euclidean norm
    of row d of the reconstructed update. Computed via the r x r Gram matrix
    of A so cost is O(d_out r^2 + r^2 d_in) instead of forming B @ A.
    """
    require_finite(pair.B, "B")
    require_finite(pair.A, "A")
    gram = pair.A @ pair.A.T
    scores = np.einsum("dr,rs,ds->d", pair.B, gram, pair.B)
    return ImportanceVector(scores=np.maximum(scores, 0.0), target=pair.target)


def kept_row_count(d_out: int, mask_ratio: float) -> int:
    """Rows surviving a mask: ceil((1 - mask_ratio) * d_out), at least 1."""
    return int(math.ceil((1.0 - mask_ratio) * d_out - 1e-9))


def mask_update(
    pair: AdapterPair,
    mask_ratio: float,
    head_delta: np.ndarray | None = None,
    head_bias_delta: np.ndarray | None = None,
    client_id: int = 0,
) -> MaskedUpdate:
    """Drop the bottom-``mask_ratio`` fraction of output rows by importance.

    Ties in importance keep the lower row index. The classifier deltas pass
    through untouched.
    """
    if not (0.0 <= mask_ratio < 1.0):
        raise ParameterError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    scores = fisher_importance(pair).scores
    keep = kept_row_count(pair.d_out, mask_ratio)
    # Stable sort on negated scores: equal scores stay in ascending row order.
    order = np.argsort(-scores, kind="stable")
    kept = np.sort(order[:keep]).astype(np.uint32)
    return MaskedUpdate(
        kept_rows=kept,
        B_kept=np.ascontiguousarray(pair.B[kept]),
        A=pair.A.copy(),
        head_delta=None if head_delta is None else np.asarray(head_delta, dtype=np.float64),
        head_bias_delta=None
        if head_bias_delta is None
        else np.asarray(head_bias_delta, dtype=np.float64),
        client_id=client_id,
        rank=pair.rank,
        target=pair.target,
    )


def reconstruct(update: MaskedUpdate, d_out: int) -> np.ndarray:
    """Server-side full-rank reconstruction: masked rows are exactly zero."""
    if update.kept_rows.size and int(update.kept_rows[-1]) >= d_out:
        raise ContractViolation(
            f"kept row {int(update.kept_rows[-1])} out of range for d_out={d_out}"
        )
    delta = np.zeros((d_out, update.A.shape[1]), dtype=np.float64)
    if update.kept_rows.size:
        delta[update.kept_rows] = update.B_kept @ update.A
    return delta


def _head_elems(update: MaskedUpdate) -> int:
    n = 0
    if update.head_delta is not None:
        n += update.head_delta.size
    if update.head_bias_delta is not None:
        n += update.head_bias_delta.size
    return n


def measure_bytes(update: MaskedUpdate) -> int:
    """Exact wire size of one upload under the documented format.

    8 bytes per float (kept B rows, full A, classifier deltas), 4 bytes per
    kept-row index, plus the fixed 32-byte header. Equals len(pack_update).
    """
    k = int(update.kept_rows.size)
    d_in = update.A.shape[1]
    return 8 * (k * update.rank + update.rank * d_in + _head_elems(update)) + 4 * k + WIRE_HEADER_BYTES


def pack_update(update: MaskedUpdate) -> bytes:
    """Serialize to the documented wire layout (see README for offsets).

    Header is exactly 32 bytes: magic, version, client id, target, rank,
    kept count, then self-description extension fields (d_out unused on the
    wire is carried by the caller; d_in and head dims are embedded so the
    payload can be decoded standalone).
    """
    if (update.head_delta is None) != (update.head_bias_delta is None):
        raise ParameterError("head_delta and head_bias_delta must be set together")
    h_rows, h_cols = 0, 0
    if update.head_delta is not None:
        h_rows, h_cols = update.head_delta.shape
    header = struct.pack(
        "<4sHIHHIIHH6x",
        WIRE_MAGIC,
        WIRE_VERSION,
        update.client_id,
        update.target,
        update.rank,
        int(update.kept_rows.size),
        update.A.shape[1],   # d_in
        h_rows,
        h_cols,
    )
    assert len(header) == WIRE_HEADER_BYTES
    parts = [
        header,
        update.kept_rows.astype("<u4").tobytes(),
        np.ascontiguousarray(update.B_kept, dtype="<f8").tobytes(),
        np.ascontiguousarray(update.A, dtype="<f8").tobytes(),
    ]
    if update.head_delta is not None:
        parts.append(np.ascontiguousarray(update.head_delta, dtype="<f8").tobytes())
    if update.head_bias_delta is not None:
        parts.append(np.ascontiguousarray(update.head_bias_delta, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack_update(buf: bytes) -> MaskedUpdate:
    """Inverse of pack_update; raises ParseError on malformed input."""
    if len(buf) < WIRE_HEADER_BYTES:
        raise ParseError(f"buffer too short for header ({len(buf)} bytes)")
    magic, version, client_id, target, rank, kept_n, d_in, h_rows, h_cols = struct.unpack(
        "<4sHIHHIIHH6x", buf[:WIRE_HEADER_BYTES]
    )
    if magic != WIRE_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise ParseError(f"unsupported wire version {version}")
    off = WIRE_HEADER_BYTES
    expect = off + 4 * kept_n + 8 * (kept_n * rank + rank * d_in + h_rows * h_cols + (h_rows if h_rows else 0))
    if len(buf) != expect:
        raise ParseError(f"buffer length {len(buf)} != expected {expect}")
    kept = np.frombuffer(buf, dtype="<u4", count=kept_n, offset=off).copy()
    off += 4 * kept_n
    if np.any(np.diff(kept.astype(np.int64)) <= 0):
        raise ParseError("kept indices not strictly increasing")
    b_kept = np.frombuffer(buf, dtype="<f8", count=kept_n * rank, offset=off).reshape(kept_n, rank).copy()
    off += 8 * kept_n * rank
    a = np.frombuffer(buf, dtype="<f8", count=rank * d_in, offset=off).reshape(rank, d_in).copy()
    off += 8 * rank * d_in
    head = bias = None
    if h_rows:
        head = np.frombuffer(buf, dtype="<f8", count=h_rows * h_cols, offset=off).reshape(h_rows, h_cols).copy()
        off += 8 * h_rows * h_cols
        bias = np.frombuffer(buf, dtype="<f8", count=h_rows, offset=off).copy()
    return MaskedUpdate(
        kept_rows=kept,
        B_kept=b_kept,
        A=a,
        head_delta=head,
        head_bias_delta=bias,
        client_id=client_id,
        rank=rank,
        target=target,
    )
