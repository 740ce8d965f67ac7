"""Protocol orchestration: the clustered masked-adapter round loop, the
full-weight and plain-adapter baselines, client availability, final
personalization, and exact byte/parameter accounting.

Determinism contract: every run is a pure function of (config, seed). Client
work inside a round may execute on a thread pool; results are reduced in
fixed client-id order, and every random draw comes from a counter-based
stream keyed by (seed, namespace, client, round), so schedules cannot change
outcomes.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from . import clustering
from .adapter import (
    AdapterPair,
    MaskedUpdate,
    init_adapter,
    kept_row_count,
    mask_update,
    measure_bytes,
    reconstruct,
)
from .clustering import GmmParams, assignment_entropy, uniform_assignments
from .errors import ContractViolation, ParameterError
from .model import (
    BackboneSpec,
    ModelParams,
    adapter_trainables,
    evaluate,
    full_finetune,
    local_finetune,
)
from .numerics import PcaModel, RngStream, require_finite, svd_truncate

log = logging.getLogger(__name__)

METHODS = ("fedhft", "fedavg", "fedprox", "scaffold", "dgc", "fedlora")
FULL_WEIGHT_METHODS = ("fedavg", "fedprox", "scaffold", "dgc")

PAYLOAD_HEADER_BYTES = 32

# RNG stream namespaces (stream_id layout under one global seed).
NS_PRETRAIN_DATA = 1
NS_PRETRAIN_MODEL = 2
NS_TASK = 3
NS_PARTITION = 4
NS_GMM = 6
NS_SPLIT = 1 << 40       # + client_id
NS_AVAIL = 2 << 40       # + round
NS_CLUSTER_INIT = 3 << 40  # + cluster * 4096 + target
NS_REINIT = 4 << 40      # + (round << 20) + cluster * 1024 + target
NS_CLIENT = 1 << 60      # + (round << 32) + client_id


@dataclass(frozen=True)
class ProtocolConfig:
    """All knobs of one federated run; method-specific fields are ignored by
    the other methods."""

    method: str = "fedhft"
    n_clients: int = 50
    rounds: int = 20
    warmup_rounds: int = 5
    local_epochs: int = 2
    clusters: int = 3
    mask_ratio: float = 0.5
    rank: int = 32
    init_sigma: float = 0.02
    lr: float = 0.05
    batch_size: int = 32
    prox_mu: float = 0.01
    dgc_threshold: float = 1e-3
    availability: float = 1.0
    seed: int = 0
    raw_eq7: bool = False
    weight_by_data: bool = True
    pca_dim: int = 0     # 0 = auto: max(2, clusters - 1)
    client_ranks: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.warmup_rounds > self.rounds:
            raise ParameterError("warmup_rounds cannot exceed rounds")
        if not (0.0 < self.availability <= 1.0):
            raise ParameterError(f"availability must be in (0, 1], got {self.availability}")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ParameterError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.clusters < 1 or self.rank < 1 or self.n_clients < 1:
            raise ParameterError("clusters, rank and n_clients must be >= 1")

    def rank_budget(self, client_id: int) -> int:
        if not self.client_ranks:
            return self.rank
        r = self.client_ranks[client_id % len(self.client_ranks)]
        if r > self.rank:
            raise ParameterError(f"client rank {r} exceeds server rank {self.rank}")
        return r

    def effective_pca_dim(self) -> int:
        """Low PCA dimension keeps a diagonal mixture from chasing noise
        directions; the cluster centers span at most clusters-1 dims."""
        if self.pca_dim > 0:
            return self.pca_dim
        return max(2, self.clusters - 1)


@dataclass(frozen=True)
class ClientShard:
    """A client's local data plus its resource budget and RNG stream."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    rank_budget: int
    q: float                      # data fraction N_k / sum N
    rng: RngStream

    def round_rng(self, round_t: int) -> np.random.Generator:
        return self.rng.child(round_t << 32).generator()


@dataclass
class ClientRoundStats:
    bytes_down: int
    bytes_up: int
    trainable_params: int
    memory_bytes: int
    local_loss: float


@dataclass
class RoundLedger:
    round: int
    method: str
    participants: tuple[int, ...]
    per_client: dict[int, ClientRoundStats]
    mean_val_acc: float
    mean_local_loss: float
    bytes_down_total: int
    bytes_up_total: int
    cluster_entropy: float
    cluster_sizes: tuple[int, ...]


@dataclass
class ClusterState:
    """Server-side protocol state: one adapter bank and classifier per cluster
    plus the soft assignment matrix."""

    adapters: list[dict[int, AdapterPair]]
    heads: list[np.ndarray]
    head_biases: list[np.ndarray]
    P: np.ndarray
    gmm: GmmParams | None
    round: int
    pca: PcaModel | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.adapters)


@dataclass
class GlobalModelState:
    """Mutable full-weight model for the adapterless baselines."""

    layers: list[np.ndarray]
    head: np.ndarray
    head_bias: np.ndarray
    round: int
    scaffold_c: dict[str, np.ndarray] | None = None
    scaffold_c_local: dict[int, dict[str, np.ndarray]] | None = None
    dgc_residuals: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def effective_rank(spec: BackboneSpec, rank: int, target: int) -> int:
    rows, cols = spec.layer_shape(target)
    return min(rank, rows, cols)


def init_cluster_state(spec: BackboneSpec, model: ModelParams, cfg: ProtocolConfig, n_clusters: int | None = None) -> ClusterState:
    """Fresh banks (zero product) per cluster, uniform assignments."""
    c_total = cfg.clusters if n_clusters is None else n_clusters
    banks: list[dict[int, AdapterPair]] = []
    for c in range(c_total):
        bank = {}
        for t in spec.adapter_targets:
            rows, cols = spec.layer_shape(t)
            r = effective_rank(spec, cfg.rank, t)
            bank[t] = init_adapter(
                rows, cols, r, cfg.init_sigma,
                RngStream(cfg.seed, NS_CLUSTER_INIT + c * 4096 + t), target=t,
            )
        banks.append(bank)
    return ClusterState(
        adapters=banks,
        heads=[model.head.copy() for _ in range(c_total)],
        head_biases=[model.head_bias.copy() for _ in range(c_total)],
        P=uniform_assignments(cfg.n_clients, c_total),
        gmm=None,
        round=0,
    )


def sample_available(client_ids: list[int], availability: float, round_t: int, seed: int) -> list[int]:
    """ceil(availability * K) distinct clients, uniformly at random per round."""
    if not (0.0 < availability <= 1.0):
        raise ParameterError(f"availability must be in (0, 1], got {availability}")
    k = math.ceil(availability * len(client_ids))
    if k >= len(client_ids):
        return sorted(client_ids)
    gen = RngStream(seed, NS_AVAIL + round_t).generator()
    picked = gen.choice(np.asarray(client_ids), size=k, replace=False)
    return sorted(int(i) for i in picked)


def _map_clients(fn, items, pool: Executor | None):
    if pool is None:
        return [fn(it) for it in items]
    return list(pool.map(fn, items))


# --- byte and parameter accounting -------------------------------------------


def full_model_param_count(spec: BackboneSpec) -> int:
    n = sum(rows * cols for rows, cols in (spec.layer_shape(l) for l in range(spec.n_layers)))
    return n + spec.n_classes * spec.d_hidden + spec.n_classes


def head_param_count(spec: BackboneSpec) -> int:
    return spec.n_classes * spec.d_hidden + spec.n_classes


def adapter_param_count(spec: BackboneSpec, rank: int) -> int:
    n = 0
    for t in spec.adapter_targets:
        rows, cols = spec.layer_shape(t)
        n += effective_rank(spec, rank, t) * (rows + cols)
    return n


def download_bytes_fedhft(spec: BackboneSpec, cfg: ProtocolConfig, n_clusters: int) -> int:
    """Per-client download: every cluster's factor bank and classifier plus
    the client's assignment row, under one 32-byte header. The client merges
    locally, so no full-size matrices ever travel."""
    bank = adapter_param_count(spec, cfg.rank) + head_param_count(spec)
    return 8 * (n_clusters * bank + n_clusters) + PAYLOAD_HEADER_BYTES


def download_bytes_full(spec: BackboneSpec, factor: int = 1) -> int:
    """Full-weight broadcast; factor 2 covers methods that also ship control
    variates."""
    return 8 * factor * full_model_param_count(spec) + PAYLOAD_HEADER_BYTES


def upload_bytes_full(spec: BackboneSpec, factor: int = 1) -> int:
    return 8 * factor * full_model_param_count(spec) + PAYLOAD_HEADER_BYTES


def memory_bytes(spec: BackboneSpec, trainable_params: int, extra_resident: int = 0) -> int:
    """Client finetuning footprint: resident weights plus gradient and
    optimizer-state buffers for the trainable set (state multiplier 1)."""
    return 8 * (full_model_param_count(spec) + extra_resident + 2 * trainable_params)


def adapter_trainable_params(spec: BackboneSpec, rank: int) -> int:
    return adapter_param_count(spec, rank) + head_param_count(spec)


# --- mixture merging ----------------------------------------------------------


def bank_products(state: ClusterState) -> list[dict[int, np.ndarray]]:
    return [{t: pair.product() for t, pair in bank.items()} for bank in state.adapters]


def merged_offsets(products: list[dict[int, np.ndarray]], p_row: np.ndarray) -> dict[int, np.ndarray]:
    """Client-side merge of the cluster banks: sum_c p_c * (B_c A_c)."""
    offsets: dict[int, np.ndarray] = {}
    for t in products[0]:
        acc = np.zeros_like(products[0][t])
        for c, prod in enumerate(products):
            acc = acc + p_row[c] * prod[t]
        offsets[t] = acc
    return offsets


def merged_head(state: ClusterState, p_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    head = np.zeros_like(state.heads[0])
    bias = np.zeros_like(state.head_biases[0])
    for c in range(state.n_clusters):
        head = head + p_row[c] * state.heads[c]
        bias = bias + p_row[c] * state.head_biases[c]
    return head, bias


# --- aggregation ---------------------------------------------------------------


def _normalized_weights(
    p_col: np.ndarray, participants: list[int], shards: dict[int, ClientShard], cfg: ProtocolConfig
) -> dict[int, float] | None:
    """Client weights for one cluster's aggregation.

    Default folds the data fraction into the assignment score and normalizes
    (FedAvg semantics); raw_eq7 reproduces the bare sum of p_kc instead.
    Returns None when no participant carries mass for the cluster.
    """
    raw = {}
    for k in participants:
        w = float(p_col[k])
        if cfg.weight_by_data and not cfg.raw_eq7:
            w *= shards[k].q
        raw[k] = w
    total = sum(raw.values())
    if total <= 0.0:
        return None
    if cfg.raw_eq7:
        return raw
    return {k: w / total for k, w in raw.items()}


def aggregate_cluster(
    bank: dict[int, AdapterPair],
    updates: dict[int, list[MaskedUpdate]],
    weights: dict[int, float],
    spec: BackboneSpec,
    rank: int,
    reinit_rng: dict[int, RngStream],
    sigma: float,
) -> dict[int, AdapterPair]:
    """Accumulate weighted reconstructed client updates onto the bank product
    and refactor to rank ``rank`` by SVD.

    An all-zero accumulated matrix keeps a zero B with a fresh Gaussian A so
    the bank stays a valid adapter without manufacturing spurious directions.
    """
    new_bank: dict[int, AdapterPair] = {}
    for t, pair in bank.items():
        rows, cols = spec.layer_shape(t)
        m = pair.product()
        for k, w in weights.items():
            per_target = {u.target: u for u in updates[k]}
            m = m + w * reconstruct(per_target[t], rows)
        require_finite(m, f"aggregated update for target {t}")
        r_eff = min(rank, rows, cols)
        if not np.any(m):
            new_bank[t] = init_adapter(rows, cols, r_eff, sigma, reinit_rng[t], target=t)
        else:
            b, a = svd_truncate(m, r_eff)
            new_bank[t] = AdapterPair(B=b, A=a, rank=r_eff, target=t)
    return new_bank


def aggregate_heads(
    head: np.ndarray,
    bias: np.ndarray,
    head_deltas: dict[int, tuple[np.ndarray, np.ndarray]],
    weights: dict[int, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Same weighted averaging as the adapters, minus any SVD: classifier
    weights are communicated dense."""
    new_head = head.copy()
    new_bias = bias.copy()
    for k, w in weights.items():
        dh, db = head_deltas[k]
        new_head += w * dh
        new_bias += w * db
    return new_head, new_bias


# --- per-client round work ------------------------------------------------------


@dataclass
class _ClientResult:
    client_id: int
    updates: list[MaskedUpdate]
    head_delta: np.ndarray
    bias_delta: np.ndarray
    head_after: np.ndarray        # flattened classifier after local training
    local_loss: float
    bytes_up: int


def _client_round_adapter(
    model: ModelParams,
    shard: ClientShard,
    products: list[dict[int, np.ndarray]],
    head0: np.ndarray,
    bias0: np.ndarray,
    p_row: np.ndarray,
    cfg: ProtocolConfig,
    round_t: int,
    mask_ratio: float,
) -> _ClientResult:
    """One client's work in an adapter round: merge, finetune fresh factors,
    truncate to the rank budget, mask, measure."""
    spec = model.spec
    gen = shard.round_rng(round_t)
    offsets = merged_offsets(products, p_row)
    fresh: dict[int, AdapterPair] = {}
    for t in sorted(spec.adapter_targets):
        rows, cols = spec.layer_shape(t)
        r = effective_rank(spec, cfg.rank, t)
        b = np.zeros((rows, r))
        a = gen.normal(0.0, cfg.init_sigma, size=(r, cols))
        fresh[t] = AdapterPair(B=b, A=a, rank=r, target=t)
    fit = local_finetune(
        model, offsets, fresh, head0, bias0,
        shard.train_x, shard.train_y,
        epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size, rng=gen,
    )
    head_delta = fit.head - head0
    bias_delta = fit.head_bias - bias0
    updates: list[MaskedUpdate] = []
    first = True
    for t in sorted(spec.adapter_targets):
        pair = fit.adapters[t]
        budget = min(shard.rank_budget, pair.rank)
        if budget < pair.rank:
            b, a = svd_truncate(pair.product(), budget)
            pair = AdapterPair(B=b, A=a, rank=budget, target=t)
        updates.append(
            mask_update(
                pair, mask_ratio,
                head_delta=head_delta if first else None,
                head_bias_delta=bias_delta if first else None,
                client_id=shard.client_id,
            )
        )
        first = False
    bytes_up = sum(measure_bytes(u) for u in updates)
    return _ClientResult(
        client_id=shard.client_id,
        updates=updates,
        head_delta=head_delta,
        bias_delta=bias_delta,
        head_after=np.concatenate([fit.head.ravel(), fit.head_bias]),
        local_loss=fit.final_loss,
        bytes_up=bytes_up,
    )


# --- round loops ------------------------------------------------------------------


def _eval_mixture(model: ModelParams, shards: list[ClientShard], state: ClusterState) -> float:
    """Sample-weighted mean held-out accuracy of each client's merged model."""
    products = bank_products(state)
    total = correct = 0.0
    for shard in shards:
        p_row = state.P[shard.client_id]
        offsets = merged_offsets(products, p_row) if products else {}
        head, bias = merged_head(state, p_row)
        acc, _ = evaluate(model, offsets, shard.val_x, shard.val_y, head=head, head_bias=bias)
        total += shard.val_y.size
        correct += acc * shard.val_y.size
    return correct / total


def _cluster_sizes(p: np.ndarray) -> tuple[int, ...]:
    counts = np.bincount(np.argmax(p, axis=1), minlength=p.shape[1])
    return tuple(int(c) for c in counts)


def run_round_fedhft(
    state: ClusterState,
    shards: list[ClientShard],
    model: ModelParams,
    cfg: ProtocolConfig,
    round_t: int,
    pool: Executor | None = None,
) -> tuple[ClusterState, RoundLedger]:
    """One full protocol round: merge / finetune / mask per client, per-cluster
    SVD aggregation, then (after warmup) assignment refresh via the GMM."""
    spec = model.spec
    shard_by_id = {s.client_id: s for s in shards}
    avail = sample_available([s.client_id for s in shards], cfg.availability, round_t, cfg.seed)
    if not avail:
        log.warning("round %d: no available clients, skipping", round_t)
        return state, _empty_ledger(round_t, cfg.method, state)
    products = bank_products(state)
    heads_start = np.stack(
        [np.concatenate([state.heads[c].ravel(), state.head_biases[c]]) for c in range(state.n_clusters)]
    )

    def work(k: int) -> _ClientResult:
        shard = shard_by_id[k]
        p_row = state.P[k]
        head0, bias0 = merged_head(state, p_row)
        return _client_round_adapter(
            model, shard, products, head0, bias0, p_row, cfg, round_t, cfg.mask_ratio
        )

    results = {r.client_id: r for r in _map_clients(work, avail, pool)}

    new_banks: list[dict[int, AdapterPair]] = []
    new_heads: list[np.ndarray] = []
    new_biases: list[np.ndarray] = []
    for c in range(state.n_clusters):
        weights = _normalized_weights(state.P[:, c], avail, shard_by_id, cfg)
        if weights is None:
            new_banks.append(state.adapters[c])
            new_heads.append(state.heads[c])
            new_biases.append(state.head_biases[c])
            continue
        reinit = {
            t: RngStream(cfg.seed, NS_REINIT + (round_t << 20) + c * 1024 + t)
            for t in spec.adapter_targets
        }
        new_banks.append(
            aggregate_cluster(
                state.adapters[c],
                {k: results[k].updates for k in weights},
                weights,
                spec,
                cfg.rank,
                reinit,
                cfg.init_sigma,
            )
        )
        head_c, bias_c = aggregate_heads(
            state.heads[c],
            state.head_biases[c],
            {k: (results[k].head_delta, results[k].bias_delta) for k in weights},
            weights,
        )
        new_heads.append(head_c)
        new_biases.append(bias_c)

    new_p, new_gmm, new_pca = clustering.update_assignments(
        state.P,
        round_t,
        cfg.warmup_rounds,
        {k: r.head_after for k, r in results.items()},
        heads_start,
        min(cfg.effective_pca_dim(), max(cfg.n_clients - 1, 1)),
        state.gmm,
        rng=RngStream(cfg.seed, NS_GMM),
    )

    new_state = ClusterState(
        adapters=new_banks,
        heads=new_heads,
        head_biases=new_biases,
        P=new_p,
        gmm=new_gmm,
        round=round_t + 1,
        pca=new_pca if new_pca is not None else state.pca,
    )

    down = download_bytes_fedhft(spec, cfg, state.n_clusters)
    trainable = adapter_trainable_params(spec, cfg.rank)
    mem = memory_bytes(spec, trainable, extra_resident=adapter_param_count(spec, cfg.rank))
    per_client = {
        k: ClientRoundStats(
            bytes_down=down,
            bytes_up=r.bytes_up,
            trainable_params=trainable,
            memory_bytes=mem,
            local_loss=r.local_loss,
        )
        for k, r in results.items()
    }
    ledger = RoundLedger(
        round=round_t,
        method=cfg.method,
        participants=tuple(avail),
        per_client=per_client,
        mean_val_acc=_eval_mixture(model, shards, new_state),
        mean_local_loss=float(np.mean([r.local_loss for r in results.values()])),
        bytes_down_total=down * len(avail),
        bytes_up_total=sum(r.bytes_up for r in results.values()),
        cluster_entropy=assignment_entropy(new_p),
        cluster_sizes=_cluster_sizes(new_p),
    )
    return new_state, ledger


def run_round_fedlora(
    state: ClusterState,
    shards: list[ClientShard],
    model: ModelParams,
    cfg: ProtocolConfig,
    round_t: int,
    pool: Executor | None = None,
) -> tuple[ClusterState, RoundLedger]:
    """Plain federated adapter baseline: one global bank, no masking, no
    clustering; updates are averaged on the reconstructed products."""
    if state.n_clusters != 1:
        raise ParameterError("fedlora state must have exactly one bank")
    spec = model.spec
    shard_by_id = {s.client_id: s for s in shards}
    avail = sample_available([s.client_id for s in shards], cfg.availability, round_t, cfg.seed)
    products = bank_products(state)
    one = np.array([1.0])

    def work(k: int) -> _ClientResult:
        shard = shard_by_id[k]
        return _client_round_adapter(
            model, shard, products, state.heads[0], state.head_biases[0], one, cfg, round_t,
            mask_ratio=0.0,
        )

    results = {r.client_id: r for r in _map_clients(work, avail, pool)}
    qs = {k: shard_by_id[k].q for k in avail}
    total_q = sum(qs.values())
    weights = {k: q / total_q for k, q in qs.items()}

    new_bank: dict[int, AdapterPair] = {}
    for t in sorted(spec.adapter_targets):
        rows, cols = spec.layer_shape(t)
        m = products[0][t].copy()
        for k, w in weights.items():
            upd = {u.target: u for u in results[k].updates}[t]
            m += w * (upd.B_kept @ upd.A)   # mask_ratio 0: every row kept
        r_eff = effective_rank(spec, cfg.rank, t)
        if not np.any(m):
            new_bank[t] = init_adapter(
                rows, cols, r_eff, cfg.init_sigma,
                RngStream(cfg.seed, NS_REINIT + (round_t << 20) + t), target=t,
            )
        else:
            b, a = svd_truncate(m, r_eff)
            new_bank[t] = AdapterPair(B=b, A=a, rank=r_eff, target=t)
    head, bias = aggregate_heads(
        state.heads[0],
        state.head_biases[0],
        {k: (results[k].head_delta, results[k].bias_delta) for k in weights},
        weights,
    )
    new_state = ClusterState(
        adapters=[new_bank],
        heads=[head],
        head_biases=[bias],
        P=state.P,
        gmm=None,
        round=round_t + 1,
    )
    down = download_bytes_fedhft(spec, cfg, 1)
    trainable = adapter_trainable_params(spec, cfg.rank)
    mem = memory_bytes(spec, trainable, extra_resident=adapter_param_count(spec, cfg.rank))
    per_client = {
        k: ClientRoundStats(
            bytes_down=down,
            bytes_up=r.bytes_up,
            trainable_params=trainable,
            memory_bytes=mem,
            local_loss=r.local_loss,
        )
        for k, r in results.items()
    }
    ledger = RoundLedger(
        round=round_t,
        method=cfg.method,
        participants=tuple(avail),
        per_client=per_client,
        mean_val_acc=_eval_mixture(model, shards, new_state),
        mean_local_loss=float(np.mean([r.local_loss for r in results.values()])),
        bytes_down_total=down * len(avail),
        bytes_up_total=sum(r.bytes_up for r in results.values()),
        cluster_entropy=0.0,
        cluster_sizes=(len(shards),),
    )
    return new_state, ledger


def init_global_state(model: ModelParams, cfg: ProtocolConfig) -> GlobalModelState:
    state = GlobalModelState(
        layers=[w.copy() for w in model.frozen_layers],
        head=model.head.copy(),
        head_bias=model.head_bias.copy(),
        round=0,
    )
    if cfg.method == "scaffold":
        zeros = _zeros_like_trainables(model.spec, state)
        state.scaffold_c = zeros
        state.scaffold_c_local = {
            k: _zeros_like_trainables(model.spec, state) for k in range(cfg.n_clients)
        }
    return state


def _zeros_like_trainables(spec: BackboneSpec, state: GlobalModelState) -> dict[str, np.ndarray]:
    z = {f"W{l}": np.zeros_like(w) for l, w in enumerate(state.layers)}
    z["head"] = np.zeros_like(state.head)
    z["bias"] = np.zeros_like(state.head_bias)
    return z


@dataclass
class _FullClientResult:
    client_id: int
    send: dict[str, np.ndarray]
    local_loss: float
    sent_entries: int
    scaffold_c_delta: dict[str, np.ndarray] | None
    dgc_residual: dict[str, np.ndarray] | None


def run_round_baseline(
    method: str,
    state: GlobalModelState,
    shards: list[ClientShard],
    model: ModelParams,
    cfg: ProtocolConfig,
    round_t: int,
    pool: Executor | None = None,
) -> tuple[GlobalModelState, RoundLedger]:
    """Full-weight baselines: every parameter trains and travels.

    fedprox adds the proximal pull toward the round-start weights, scaffold
    applies control-variate corrections (and doubles traffic), dgc uploads
    only residual-accumulated entries at or above the magnitude threshold.
    """
    if method not in FULL_WEIGHT_METHODS:
        raise ParameterError(f"method {method!r} is not a full-weight baseline")
    spec = model.spec
    shard_by_id = {s.client_id: s for s in shards}
    avail = sample_available([s.client_id for s in shards], cfg.availability, round_t, cfg.seed)
    anchor = {f"W{l}": w.copy() for l, w in enumerate(state.layers)}
    anchor["head"] = state.head.copy()
    anchor["bias"] = state.head_bias.copy()
    n_total = full_model_param_count(spec)

    def work(k: int) -> _FullClientResult:
        shard = shard_by_id[k]
        gen = shard.round_rng(round_t)
        prox = (cfg.prox_mu, anchor) if method == "fedprox" else None
        correction = None
        if method == "scaffold":
            c_loc = state.scaffold_c_local[k]
            correction = {key: state.scaffold_c[key] - c_loc[key] for key in anchor}
        fit = full_finetune(
            spec, state.layers, state.head, state.head_bias,
            shard.train_x, shard.train_y,
            epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size, rng=gen,
            prox=prox, scaffold=correction,
        )
        final = {f"W{l}": w for l, w in enumerate(fit.layers)}
        final["head"] = fit.head
        final["bias"] = fit.head_bias
        delta = {key: final[key] - anchor[key] for key in anchor}
        c_delta = None
        if method == "scaffold":
            denom = max(fit.n_steps, 1) * cfg.lr
            c_delta = {key: -state.scaffold_c[key] - delta[key] / denom for key in anchor}
        residual_out = None
        sent_entries = n_total
        send = delta
        if method == "dgc":
            prev = state.dgc_residuals.get(k) or {key: np.zeros_like(v) for key, v in anchor.items()}
            send = {}
            residual_out = {}
            sent_entries = 0
            for key in anchor:
                acc = prev[key] + delta[key]
                mask = np.abs(acc) >= cfg.dgc_threshold
                send[key] = np.where(mask, acc, 0.0)
                residual_out[key] = np.where(mask, 0.0, acc)
                sent_entries += int(mask.sum())
        return _FullClientResult(
            client_id=k,
            send=send,
            local_loss=fit.final_loss,
            sent_entries=sent_entries,
            scaffold_c_delta=c_delta,
            dgc_residual=residual_out,
        )

    results = {r.client_id: r for r in _map_clients(work, avail, pool)}
    qs = {k: shard_by_id[k].q for k in avail}
    total_q = sum(qs.values())
    weights = {k: q / total_q for k, q in qs.items()}

    new_layers = [w.copy() for w in state.layers]
    new_head = state.head.copy()
    new_bias = state.head_bias.copy()
    for k in avail:
        w = weights[k]
        send = results[k].send
        for l in range(len(new_layers)):
            new_layers[l] += w * send[f"W{l}"]
        new_head += w * send["head"]
        new_bias += w * send["bias"]

    new_state = GlobalModelState(
        layers=new_layers,
        head=new_head,
        head_bias=new_bias,
        round=round_t + 1,
        scaffold_c=state.scaffold_c,
        scaffold_c_local=state.scaffold_c_local,
        dgc_residuals=dict(state.dgc_residuals),
    )
    if method == "scaffold":
        c_glob = {key: v.copy() for key, v in state.scaffold_c.items()}
        locals_new = dict(state.scaffold_c_local)
        for k in avail:
            c_delta = results[k].scaffold_c_delta
            locals_new[k] = {key: locals_new[k][key] + c_delta[key] for key in c_delta}
            for key in c_glob:
                c_glob[key] += c_delta[key] / cfg.n_clients
        new_state.scaffold_c = c_glob
        new_state.scaffold_c_local = locals_new
    if method == "dgc":
        for k in avail:
            new_state.dgc_residuals[k] = results[k].dgc_residual

    comm_factor = 2 if method == "scaffold" else 1
    down = download_bytes_full(spec, comm_factor)
    work_model = ModelParams(
        spec=spec, frozen_layers=tuple(new_layers), head=new_head, head_bias=new_bias
    )
    total = correct = 0.0
    for shard in shards:
        acc, _ = evaluate(work_model, None, shard.val_x, shard.val_y)
        total += shard.val_y.size
        correct += acc * shard.val_y.size
    per_client = {}
    for k, r in results.items():
        if method == "dgc":
            up = 8 * r.sent_entries + PAYLOAD_HEADER_BYTES
        else:
            up = upload_bytes_full(spec, comm_factor)
        per_client[k] = ClientRoundStats(
            bytes_down=down,
            bytes_up=up,
            trainable_params=n_total,
            memory_bytes=memory_bytes(spec, n_total),
            local_loss=r.local_loss,
        )
    ledger = RoundLedger(
        round=round_t,
        method=method,
        participants=tuple(avail),
        per_client=per_client,
        mean_val_acc=correct / total,
        mean_local_loss=float(np.mean([r.local_loss for r in results.values()])),
        bytes_down_total=down * len(avail),
        bytes_up_total=sum(s.bytes_up for s in per_client.values()),
        cluster_entropy=0.0,
        cluster_sizes=(len(shards),),
    )
    return new_state, ledger


def _empty_ledger(round_t: int, method: str, state: ClusterState) -> RoundLedger:
    return RoundLedger(
        round=round_t,
        method=method,
        participants=(),
        per_client={},
        mean_val_acc=float("nan"),
        mean_local_loss=float("nan"),
        bytes_down_total=0,
        bytes_up_total=0,
        cluster_entropy=assignment_entropy(state.P),
        cluster_sizes=_cluster_sizes(state.P),
    )


# --- full runs ----------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    ledgers: list[RoundLedger]
    cluster_state: ClusterState | None
    global_state: GlobalModelState | None
    merged_history: list[list[dict[int, np.ndarray]]] | None


def run_protocol(
    cfg: ProtocolConfig,
    model: ModelParams,
    shards: list[ClientShard],
    pool: Executor | None = None,
    collect_merged: bool = False,
    on_round=None,
) -> RunResult:
    """Run ``cfg.rounds`` rounds of the configured method end to end."""
    ledgers: list[RoundLedger] = []
    merged: list[list[dict[int, np.ndarray]]] | None = [] if collect_merged else None
    if cfg.method not in FULL_WEIGHT_METHODS and not model.spec.adapter_targets:
        raise ParameterError(f"method {cfg.method!r} needs at least one adapter target")
    if cfg.method in FULL_WEIGHT_METHODS:
        gstate = init_global_state(model, cfg)
        for t in range(cfg.rounds):
            gstate, ledger = run_round_baseline(cfg.method, gstate, shards, model, cfg, t, pool)
            ledgers.append(ledger)
            if on_round:
                on_round(ledger, None)
        return RunResult(cfg.method, ledgers, None, gstate, None)
    n_clusters = 1 if cfg.method == "fedlora" else cfg.clusters
    state = init_cluster_state(model.spec, model, cfg, n_clusters)
    round_fn = run_round_fedlora if cfg.method == "fedlora" else run_round_fedhft
    for t in range(cfg.rounds):
        state, ledger = round_fn(state, shards, model, cfg, t, pool)
        ledgers.append(ledger)
        if merged is not None:
            merged.append(bank_products(state))
        if on_round:
            on_round(ledger, state)
    return RunResult(cfg.method, ledgers, state, None, merged)


def personalize_final(
    model: ModelParams,
    state: ClusterState,
    shard: ClientShard,
    cfg: ProtocolConfig,
    epochs: int | None = None,
) -> tuple[float, float]:
    """Stage-three personalization: start from the client's merged mixture and
    finetune locally, then score the held-out split. epochs=0 scores the
    merged model directly. Returns (accuracy, loss)."""
    e = cfg.local_epochs if epochs is None else epochs
    p_row = state.P[shard.client_id]
    products = bank_products(state)
    offsets = merged_offsets(products, p_row) if products else {}
    head, bias = merged_head(state, p_row)
    if e == 0:
        return evaluate(model, offsets, shard.val_x, shard.val_y, head=head, head_bias=bias)
    spec = model.spec
    gen = shard.round_rng(cfg.rounds << 1 | 1)
    fresh: dict[int, AdapterPair] = {}
    for t in sorted(spec.adapter_targets):
        rows, cols = spec.layer_shape(t)
        r = effective_rank(spec, cfg.rank, t)
        fresh[t] = AdapterPair(
            B=np.zeros((rows, r)), A=gen.normal(0.0, cfg.init_sigma, size=(r, cols)), rank=r, target=t
        )
    fit = local_finetune(
        model, offsets, fresh, head, bias, shard.train_x, shard.train_y,
        epochs=e, lr=cfg.lr, batch_size=cfg.batch_size, rng=gen,
    )
    final = {t: offsets[t] + fit.adapters[t].B @ fit.adapters[t].A for t in offsets}
    return evaluate(model, final, shard.val_x, shard.val_y, head=fit.head, head_bias=fit.head_bias)


# --- cost reporting -------------------------------------------------------------


def _ledger_totals(ledgers: list[RoundLedger]) -> dict[str, float]:
    stats = [s for led in ledgers for s in led.per_client.values()]
    return {
        "bytes_down": float(sum(led.bytes_down_total for led in ledgers)),
        "bytes_up": float(sum(led.bytes_up_total for led in ledgers)),
        "mean_trainable_params": float(np.mean([s.trainable_params for s in stats])),
        "mean_memory_bytes": float(np.mean([s.memory_bytes for s in stats])),
    }


def cost_report(
    ledgers: list[RoundLedger],
    baseline_ledgers: list[RoundLedger],
    n_clients: int,
) -> dict[str, float]:
    """Pure arithmetic over recorded ledgers: per-client totals plus reduction
    ratios of the baseline (typically fedavg) over the method."""
    if len(ledgers) != len(baseline_ledgers):
        raise ContractViolation(
            f"round counts differ: {len(ledgers)} vs {len(baseline_ledgers)}"
        )
    mine = _ledger_totals(ledgers)
    base = _ledger_totals(baseline_ledgers)
    total = mine["bytes_down"] + mine["bytes_up"]
    base_total = base["bytes_down"] + base["bytes_up"]
    return {
        "total_bytes_down": mine["bytes_down"],
        "total_bytes_up": mine["bytes_up"],
        "total_bytes": total,
        "per_client_bytes": total / n_clients,
        "mean_trainable_params": mine["mean_trainable_params"],
        "mean_memory_bytes": mine["mean_memory_bytes"],
        "baseline_total_bytes": base_total,
        "comm_reduction_vs_baseline": base_total / total if total else float("inf"),
        "trainable_reduction_vs_baseline": base["mean_trainable_params"]
        / mine["mean_trainable_params"],
        "memory_reduction_vs_baseline": base["mean_memory_bytes"] / mine["mean_memory_bytes"],
    }


def reference_comm_reduction(
    n_layers: int = 12,
    hidden: int = 768,
    targets_per_layer: int = 2,
    rank: int = 32,
    mask_ratio: float = 0.5,
    rounds: int = 20,
    full_model_params: int = 110_000_000,
    clusters: int = 1,
) -> dict[str, float]:
    """Adapter-vs-full communication arithmetic at transformer-scale dims.

    Builds one representative masked upload per target matrix and prices a
    round through the same measure_bytes / download formulas the simulator
    uses; no training is involved. The single-cluster figure is the
    apples-to-apples adapter-to-full ratio (each extra cluster adds one bank
    to the download).
    """
    kept = kept_row_count(hidden, mask_ratio)
    upd = MaskedUpdate(
        kept_rows=np.arange(kept, dtype=np.uint32),
        B_kept=np.zeros((kept, rank)),
        A=np.zeros((rank, hidden)),
        head_delta=None,
        head_bias_delta=None,
        client_id=0,
        rank=rank,
        target=0,
    )
    up = n_layers * targets_per_layer * measure_bytes(upd)
    bank_params = n_layers * targets_per_layer * rank * (hidden + hidden)
    down = 8 * (clusters * bank_params + clusters) + PAYLOAD_HEADER_BYTES
    per_round = up + down
    fedavg_round = 2 * (8 * full_model_params + PAYLOAD_HEADER_BYTES)
    return {
        "adapter_bytes_per_round": float(per_round),
        "fedavg_bytes_per_round": float(fedavg_round),
        "adapter_total_bytes": float(per_round * rounds),
        "fedavg_total_bytes": float(fedavg_round * rounds),
        "comm_reduction": fedavg_round / per_round,
    }
