"""Deterministic simulator for federated fine-tuning with a mixture of
masked low-rank adapters, plus the standard full-weight baselines and exact
communication/memory cost accounting."""

from .adapter import (
    AdapterPair,
    ImportanceVector,
    MaskedUpdate,
    fisher_importance,
    init_adapter,
    mask_update,
    measure_bytes,
    merge_mixture,
    pack_update,
    reconstruct,
    unpack_update,
)
from .clustering import (
    GmmParams,
    UpdateFeature,
    build_features,
    gmm_fit,
    posterior,
    update_assignments,
)
from .data import (
    PartitionPlan,
    Pool,
    TaskSpec,
    dirichlet_partition,
    gen_task,
    load_csv,
    make_task,
    partition_pool,
)
from .errors import (
    ContractViolation,
    FedHftError,
    NumericError,
    ParameterError,
    ParseError,
)
from .federation import (
    ClientShard,
    ClusterState,
    ProtocolConfig,
    RoundLedger,
    RunResult,
    aggregate_cluster,
    aggregate_heads,
    cost_report,
    personalize_final,
    reference_comm_reduction,
    run_protocol,
    run_round_baseline,
    run_round_fedhft,
    sample_available,
)
from .model import (
    BackboneSpec,
    Batch,
    ModelParams,
    backward,
    forward,
    local_finetune,
    pretrain_backbone,
)
from .numerics import (
    PcaModel,
    RngStream,
    finite_diff_grad,
    pca_fit,
    pca_transform,
    svd_truncate,
)

__version__ = "0.1.0"
