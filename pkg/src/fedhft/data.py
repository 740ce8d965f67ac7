"""Synthetic datasets with controllable label and concept heterogeneity,
Dirichlet label partitioning across clients, and CSV ingestion.

Features are class-conditional Gaussians. An optional set of group offsets
shifts every sample belonging to a client group, planting recoverable
cluster structure in the population.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ParseError
from .numerics import RngStream

MIN_SHARD_SIZE = 8


@dataclass(frozen=True)
class TaskSpec:
    """Generative recipe for one synthetic classification task."""

    n_classes: int
    d_in: int
    class_means: np.ndarray                  # (n_classes, d_in)
    class_cov_scale: float = 1.0
    group_shift: np.ndarray | None = None    # (n_groups, d_in) offsets, or None
    samples: int = 2000

    def __post_init__(self):
        if self.d_in < 2:
            raise ParameterError(f"d_in must be >= 2, got {self.d_in}")
        if self.class_means.shape != (self.n_classes, self.d_in):
            raise ParameterError(
                f"class_means shape {self.class_means.shape} != ({self.n_classes}, {self.d_in})"
            )
        diffs = self.class_means[:, None, :] - self.class_means[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dist, np.inf)
        if np.any(dist < 1e-12):
            raise ParameterError("class means must be pairwise distinct")

    @property
    def n_groups(self) -> int:
        return 0 if self.group_shift is None else self.group_shift.shape[0]


@dataclass(frozen=True)
class PartitionPlan:
    """Dirichlet label-split of a pool across K clients."""

    alpha: float
    n_clients: int
    proportions: np.ndarray        # (K, n_classes), rows on the simplex
    counts: np.ndarray             # (K,) samples per client


@dataclass(frozen=True)
class Pool:
    features: np.ndarray
    labels: np.ndarray
    group_of_sample: np.ndarray    # (n,) group index per sample (0 when no groups)


def make_task(
    n_classes: int,
    d_in: int,
    rng: RngStream,
    class_separation: float = 3.0,
    class_cov_scale: float = 1.0,
    n_groups: int = 0,
    group_separation: float = 6.0,
    samples: int = 2000,
) -> TaskSpec:
    """Random task with class means ``class_separation * cov`` apart and, when
    groups are requested, group offsets pairwise ``group_separation * cov``
    apart along mutually orthogonal directions."""
    gen = rng.generator()
    # separations are measured in noise units; noiseless tasks keep unit scale
    unit = class_cov_scale if class_cov_scale > 0 else 1.0
    means = gen.normal(0.0, 1.0, size=(n_classes, d_in))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= class_separation * unit
    shift = None
    if n_groups > 0:
        if n_groups > d_in:
            raise ParameterError(f"cannot plant {n_groups} orthogonal groups in {d_in} dims")
        basis, _ = np.linalg.qr(gen.normal(size=(d_in, n_groups)))
        # Orthonormal directions scaled so pairwise offset distance hits target.
        shift = basis.T * (group_separation * unit / math.sqrt(2.0))
        shift = shift - shift.mean(axis=0)
    return TaskSpec(
        n_classes=n_classes,
        d_in=d_in,
        class_means=means,
        class_cov_scale=class_cov_scale,
        group_shift=shift,
        samples=samples,
    )


def gen_task(spec: TaskSpec, rng: RngStream) -> Pool:
    """Sample the pooled dataset: uniform labels, Gaussian features around the
    class mean, plus the sample's group offset when groups are planted."""
    gen = rng.generator()
    n = spec.samples
    labels = gen.integers(0, spec.n_classes, size=n)
    noise = gen.normal(0.0, spec.class_cov_scale, size=(n, spec.d_in))
    features = spec.class_means[labels] + noise
    if spec.group_shift is not None:
        groups = gen.integers(0, spec.n_groups, size=n)
        features = features + spec.group_shift[groups]
    else:
        groups = np.zeros(n, dtype=np.int64)
    return Pool(features=features, labels=labels.astype(np.int64), group_of_sample=groups)


def dirichlet_partition(
    labels: np.ndarray,
    n_clients: int,
    alpha: float,
    rng: RngStream,
    min_shard: int = MIN_SHARD_SIZE,
    max_retries: int = 100,
) -> tuple[PartitionPlan, list[np.ndarray]]:
    """Split sample indices across clients with per-class Dirichlet(alpha) draws.

    Every client is guaranteed at least ``min_shard`` samples; plans violating
    that are redrawn up to ``max_retries`` times.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise ParameterError(f"need at least one client, got {n_clients}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if labels.size < n_clients * min_shard:
        raise ParameterError(
            f"{labels.size} samples cannot give {n_clients} clients >= {min_shard} each"
        )
    gen = rng.generator()
    for attempt in range(max_retries):
        per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        count_matrix = np.zeros((n_clients, classes.size), dtype=np.int64)
        for ci, c in enumerate(classes):
            idx = np.flatnonzero(labels == c)
            gen_order = gen.permutation(idx)
            p = gen.dirichlet(np.full(n_clients, alpha))
            # Largest-remainder rounding so class counts are conserved exactly.
            raw = p * idx.size
            counts = np.floor(raw).astype(int)
            rem = idx.size - counts.sum()
            if rem:
                counts[np.argsort(-(raw - counts), kind="stable")[:rem]] += 1
            start = 0
            for k in range(n_clients):
                per_client[k].append(gen_order[start : start + counts[k]])
                start += counts[k]
            count_matrix[:, ci] = counts
        sizes = count_matrix.sum(axis=1)
        if sizes.min() >= min_shard:
            index_lists = [np.sort(np.concatenate(parts)) for parts in per_client]
            plan = PartitionPlan(
                alpha=alpha,
                n_clients=n_clients,
                proportions=count_matrix / sizes[:, None],
                counts=sizes,
            )
            return plan, index_lists
    raise ParameterError(
        f"could not satisfy min shard size {min_shard} in {max_retries} draws; "
        "increase alpha or the dataset size"
    )


def assign_groups(n_clients: int, n_groups: int) -> np.ndarray:
    """Deterministic even split of clients across planted groups."""
    if n_groups <= 0:
        return np.zeros(n_clients, dtype=np.int64)
    return np.arange(n_clients, dtype=np.int64) % n_groups


def partition_pool(
    pool: Pool,
    n_clients: int,
    alpha: float,
    rng: RngStream,
    n_groups: int = 0,
    min_shard: int = MIN_SHARD_SIZE,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Partition a pool into client index lists, respecting planted groups.

    With groups, clients are split evenly across groups and each group's
    samples are Dirichlet-partitioned among that group's clients only, so a
    client sees a single concept. Returns (index lists, client group labels).
    """
    client_groups = assign_groups(n_clients, n_groups)
    if n_groups <= 0:
        _, lists = dirichlet_partition(pool.labels, n_clients, alpha, rng, min_shard)
        return lists, client_groups
    if n_clients < n_groups:
        raise ParameterError(f"{n_clients} clients cannot cover {n_groups} groups")
    lists: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_clients
    for g in range(n_groups):
        members = np.flatnonzero(client_groups == g)
        sample_idx = np.flatnonzero(pool.group_of_sample == g)
        _, sub = dirichlet_partition(
            pool.labels[sample_idx], members.size, alpha, rng.child(g + 1), min_shard
        )
        for mi, k in enumerate(members):
            lists[int(k)] = sample_idx[sub[mi]]
    return lists, client_groups


def train_val_split(indices: np.ndarray, holdout_fraction: float, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Per-client held-out split; validation gets at least one sample."""
    if not (0.0 < holdout_fraction < 1.0):
        raise ParameterError(f"holdout fraction must be in (0,1), got {holdout_fraction}")
    gen = rng.generator()
    perm = gen.permutation(indices)
    n_val = max(1, int(round(holdout_fraction * indices.size)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def load_csv(path, label_column: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load an RFC-4180 CSV with a header row into a standardized pool.

    Feature columns must be numeric; they are shifted/scaled to zero mean and
    unit variance (constant columns become zeros). Labels map to 0..n-1 in
    order of first appearance. Returns (features, labels, label names).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if label_column not in header:
            raise ParameterError(f"label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feat_cols = [i for i in range(len(header)) if i != label_idx]
        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{rownum}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for i in feat_cols:
                try:
                    vals.append(float(row[i]))
                except ValueError:
                    raise ParseError(
                        f"{path}:{rownum}: non-numeric value {row[i]!r} in column {header[i]!r}"
                    ) from None
            rows.append(vals)
            raw_labels.append(row[label_idx])
    if not rows:
        raise ParseError(f"{path}: no data rows")
    features = np.array(rows, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std < 1e-12] = 1.0   # constant columns standardize to zero
    features = (features - mean) / std
    names: list[str] = []
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        if lab not in names:
            names.append(lab)
        labels[i] = names.index(lab)
    return features, labels, names
