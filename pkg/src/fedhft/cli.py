"""Experiment runner: config files, single runs, method comparisons and
parameter sweeps, with tidy CSV output for external plotting.

Config files are flat INI sections ([protocol], [task], [model], [run]) with
every default pre-filled by ``fedhft init``, so an experiment is a small diff
against the generated file. Runs are deterministic in (config, seed); the
FEDHFT_THREADS environment variable only controls the worker pool and never
changes results.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    Pool,
    gen_task,
    load_csv,
    make_task,
    partition_pool,
    train_val_split,
)
from .errors import FedHftError, NumericError, ParameterError
from .federation import (
    FULL_WEIGHT_METHODS,
    METHODS,
    NS_CLIENT,
    NS_PARTITION,
    NS_PRETRAIN_DATA,
    NS_PRETRAIN_MODEL,
    NS_SPLIT,
    NS_TASK,
    ClientShard,
    ClusterState,
    ProtocolConfig,
    RunResult,
    bank_products,
    cost_report,
    download_bytes_full,
    evaluate,
    full_model_param_count,
    memory_bytes,
    merged_head,
    merged_offsets,
    personalize_final,
    run_protocol,
    upload_bytes_full,
)
from .federation import ClientRoundStats, RoundLedger
from .model import Batch, BackboneSpec, ModelParams, pretrain_backbone, write_checkpoint
from .numerics import RngStream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS_COLUMNS = (
    "schema_version",
    "round",
    "method",
    "mean_val_acc",
    "mean_local_loss",
    "bytes_up_total",
    "bytes_down_total",
    "cluster_entropy",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: protocol knobs plus the data/model recipe."""

    protocol: ProtocolConfig = ProtocolConfig()
    # task
    classes: int = 4
    features: int = 16
    groups: int = 3
    group_separation: float = 6.0
    class_separation: float = 3.0
    noise_scale: float = 1.0
    samples: int = 2000
    alpha: float = 5.0
    holdout_fraction: float = 0.2
    min_shard: int = 8
    csv_path: str = ""
    label_column: str = ""
    # model
    hidden: int = 32
    layers: int = 3
    adapter_targets: str = "all"
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1
    pretrain_samples: int = 2000
    pretrain_batch: int = 32
    # run
    out_dir: str = "runs/out"
    personalize_epochs: int = 0
    dump_cluster_state: bool = False
    scale_rounds: bool = True

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d["protocol"]["client_ranks"] = list(self.protocol.client_ranks)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_PROTOCOL_KEYS = {
    "method": str,
    "clients": int,
    "rounds": int,
    "warmup_rounds": int,
    "local_epochs": int,
    "clusters": int,
    "mask_ratio": float,
    "rank": int,
    "init_sigma": float,
    "lr": float,
    "batch_size": int,
    "prox_mu": float,
    "dgc_threshold": float,
    "availability": float,
    "seed": int,
    "raw_eq7": bool,
    "weight_by_data": bool,
    "pca_dim": int,
    "client_ranks": str,
}
_TASK_KEYS = {
    "classes": int,
    "features": int,
    "groups": int,
    "group_separation": float,
    "class_separation": float,
    "noise_scale": float,
    "samples": int,
    "alpha": float,
    "holdout_fraction": float,
    "min_shard": int,
    "csv_path": str,
    "label_column": str,
}
_MODEL_KEYS = {
    "hidden": int,
    "layers": int,
    "adapter_targets": str,
    "pretrain_epochs": int,
    "pretrain_lr": float,
    "pretrain_samples": int,
    "pretrain_batch": int,
}
_RUN_KEYS = {
    "out_dir": str,
    "personalize_epochs": int,
    "dump_cluster_state": bool,
    "scale_rounds": bool,
}


def default_config_text() -> str:
    exp = ExperimentConfig()
    p = exp.protocol
    return f"""# fedhft experiment config (flat INI sections, every key optional)

[protocol]
method = {p.method}
clients = {p.n_clients}
rounds = {p.rounds}
warmup_rounds = {p.warmup_rounds}
local_epochs = {p.local_epochs}
clusters = {p.clusters}
mask_ratio = {p.mask_ratio}
rank = {p.rank}
init_sigma = {p.init_sigma}
lr = {p.lr}
batch_size = {p.batch_size}
prox_mu = {p.prox_mu}
dgc_threshold = {p.dgc_threshold}
availability = {p.availability}
seed = {p.seed}
raw_eq7 = {str(p.raw_eq7).lower()}
weight_by_data = {str(p.weight_by_data).lower()}
# 0 = auto: max(2, clusters - 1)
pca_dim = {p.pca_dim}
# comma list cycled over clients, e.g. 4,8,16,32; empty = everyone at `rank`
client_ranks =

[task]
classes = {exp.classes}
features = {exp.features}
# planted concept groups (0 disables); separation is in within-group std units
groups = {exp.groups}
group_separation = {exp.group_separation}
class_separation = {exp.class_separation}
noise_scale = {exp.noise_scale}
samples = {exp.samples}
alpha = {exp.alpha}
holdout_fraction = {exp.holdout_fraction}
min_shard = {exp.min_shard}
# set csv_path/label_column to train on an external table instead
csv_path =
label_column =

[model]
hidden = {exp.hidden}
layers = {exp.layers}
# comma list of layer indices, or `all`
adapter_targets = {exp.adapter_targets}
pretrain_epochs = {exp.pretrain_epochs}
pretrain_lr = {exp.pretrain_lr}
pretrain_samples = {exp.pretrain_samples}
pretrain_batch = {exp.pretrain_batch}

[run]
out_dir = {exp.out_dir}
personalize_epochs = {exp.personalize_epochs}
dump_cluster_state = {str(exp.dump_cluster_state).lower()}
scale_rounds = {str(exp.scale_rounds).lower()}
"""


def _parse_value(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ParameterError(
            f"config [{section}] {key} = {raw!r}: expected {typ.__name__}"
        ) from None


def parse_config(path) -> ExperimentConfig:
    """Read and validate an INI experiment file; unknown keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ParameterError(f"config file {path} not found or unreadable")
    known = {"protocol": _PROTOCOL_KEYS, "task": _TASK_KEYS, "model": _MODEL_KEYS, "run": _RUN_KEYS}
    values: dict[str, dict] = {s: {} for s in known}
    for section in parser.sections():
        if section not in known:
            raise ParameterError(f"config section [{section}] unknown; expected {sorted(known)}")
        for key, raw in parser.items(section):
            if key not in known[section]:
                raise ParameterError(f"config [{section}] has unknown key {key!r}")
            values[section][key] = _parse_value(section, key, raw, known[section][key])
    proto = values["protocol"]
    ranks_raw = proto.pop("client_ranks", "").strip()
    client_ranks = tuple(int(r) for r in ranks_raw.split(",") if r.strip()) if ranks_raw else ()
    rename = {"clients": "n_clients"}
    proto = {rename.get(k, k): v for k, v in proto.items()}
    protocol = ProtocolConfig(client_ranks=client_ranks, **proto)
    return ExperimentConfig(protocol=protocol, **values["task"], **values["model"], **values["run"])


def parse_adapter_targets(spec_text: str, n_layers: int) -> tuple[int, ...]:
    if spec_text.strip().lower() == "all":
        return tuple(range(n_layers))
    try:
        targets = tuple(int(t) for t in spec_text.split(",") if t.strip())
    except ValueError:
        raise ParameterError(f"adapter_targets {spec_text!r} is not a comma list of ints") from None
    return targets


# --- experiment assembly -------------------------------------------------------


@dataclass
class Experiment:
    exp: ExperimentConfig
    run_cfg: ProtocolConfig          # rounds already availability-scaled
    model: ModelParams
    shards: list[ClientShard]
    client_groups: np.ndarray


def build_experiment(exp: ExperimentConfig) -> Experiment:
    """Generate data, pretrain the shared backbone, and cut client shards.

    Everything downstream is a pure function of this assembly plus the
    protocol config, so paired method comparisons reuse one Experiment.
    """
    cfg = exp.protocol
    seed = cfg.seed
    if exp.csv_path:
        features, labels, names = load_csv(exp.csv_path, exp.label_column)
        pool = Pool(features=features, labels=labels, group_of_sample=np.zeros(labels.size, dtype=np.int64))
        n_classes, d_in, n_groups = len(names), features.shape[1], 0
        pretrain_pool = Batch(features=features, labels=labels)
    else:
        task = make_task(
            exp.classes,
            exp.features,
            RngStream(seed, NS_TASK),
            class_separation=exp.class_separation,
            class_cov_scale=exp.noise_scale,
            n_groups=exp.groups,
            group_separation=exp.group_separation,
            samples=exp.samples,
        )
        pool = gen_task(task, RngStream(seed, NS_TASK).child(1))
        n_classes, d_in, n_groups = exp.classes, exp.features, exp.groups
        generic = replace(task, group_shift=None, samples=exp.pretrain_samples)
        gp = gen_task(generic, RngStream(seed, NS_PRETRAIN_DATA))
        pretrain_pool = Batch(features=gp.features, labels=gp.labels)
    targets = parse_adapter_targets(exp.adapter_targets, exp.layers)
    spec = BackboneSpec(
        d_in=d_in,
        d_hidden=exp.hidden,
        n_layers=exp.layers,
        n_classes=n_classes,
        adapter_targets=targets,
    )
    model = pretrain_backbone(
        spec,
        pretrain_pool,
        epochs=exp.pretrain_epochs,
        lr=exp.pretrain_lr,
        rng=RngStream(seed, NS_PRETRAIN_MODEL),
        batch_size=exp.pretrain_batch,
    )
    lists, client_groups = partition_pool(
        pool, cfg.n_clients, exp.alpha, RngStream(seed, NS_PARTITION), n_groups, exp.min_shard
    )
    train_sizes = []
    split = []
    for k in range(cfg.n_clients):
        tr, va = train_val_split(lists[k], exp.holdout_fraction, RngStream(seed, NS_SPLIT + k))
        split.append((tr, va))
        train_sizes.append(tr.size)
    total = float(sum(train_sizes))
    shards = []
    for k in range(cfg.n_clients):
        tr, va = split[k]
        shards.append(
            ClientShard(
                client_id=k,
                train_x=pool.features[tr],
                train_y=pool.labels[tr],
                val_x=pool.features[va],
                val_y=pool.labels[va],
                rank_budget=cfg.rank_budget(k),
                q=train_sizes[k] / total,
                rng=RngStream(seed, NS_CLIENT + k),
            )
        )
    run_cfg = cfg
    if exp.scale_rounds and cfg.availability < 1.0:
        run_cfg = replace(cfg, rounds=math.ceil(cfg.rounds / cfg.availability))
    return Experiment(exp=exp, run_cfg=run_cfg, model=model, shards=shards, client_groups=client_groups)


def worker_pool() -> ThreadPoolExecutor | None:
    n = int(os.environ.get("FEDHFT_THREADS", "1"))
    if n <= 1:
        return None
    return ThreadPoolExecutor(max_workers=n)


def final_client_accuracy(built: Experiment, result: RunResult) -> dict[int, float]:
    accs: dict[int, float] = {}
    if result.cluster_state is not None:
        state = result.cluster_state
        products = bank_products(state)
        for shard in built.shards:
            p_row = state.P[shard.client_id]
            offsets = merged_offsets(products, p_row)
            head, bias = merged_head(state, p_row)
            acc, _ = evaluate(built.model, offsets, shard.val_x, shard.val_y, head=head, head_bias=bias)
            accs[shard.client_id] = acc
    else:
        g = result.global_state
        work = ModelParams(
            spec=built.model.spec, frozen_layers=tuple(g.layers), head=g.head, head_bias=g.head_bias
        )
        for shard in built.shards:
            acc, _ = evaluate(work, None, shard.val_x, shard.val_y)
            accs[shard.client_id] = acc
    return accs


def execute(built: Experiment, on_round=None, collect_merged: bool = False) -> tuple[RunResult, float]:
    pool = worker_pool()
    start = time.monotonic()
    try:
        result = run_protocol(
            built.run_cfg, built.model, built.shards, pool=pool,
            collect_merged=collect_merged, on_round=on_round,
        )
    finally:
        if pool is not None:
            pool.shutdown()
    return result, time.monotonic() - start


# --- output files ---------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsWriter:
    """metrics.csv with one row per completed round, flushed immediately so
    rows survive interruption."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(METRICS_COLUMNS)
        self.fh.flush()

    def add(self, ledger: RoundLedger) -> None:
        self.writer.writerow(
            [
                SCHEMA_VERSION,
                ledger.round,
                ledger.method,
                _fmt(ledger.mean_val_acc),
                _fmt(ledger.mean_local_loss),
                ledger.bytes_up_total,
                ledger.bytes_down_total,
                _fmt(ledger.cluster_entropy),
            ]
        )
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def dump_cluster_state(path, ledger: RoundLedger, state: ClusterState) -> None:
    payload = {
        "round": ledger.round,
        "P": state.P.tolist(),
        "gmm": None
        if state.gmm is None
        else {
            "weights": state.gmm.weights.tolist(),
            "means": state.gmm.means.tolist(),
            "variances": state.gmm.variances.tolist(),
        },
        "pca_explained_variance": None
        if state.pca is None
        else state.pca.explained_variance.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def analytic_fedavg_ledgers(spec: BackboneSpec, ledgers: list[RoundLedger]) -> list[RoundLedger]:
    """Full-weight FedAvg cost mirror of an executed run: same rounds and
    participants, bytes and parameter counts from the formulas alone."""
    n = full_model_param_count(spec)
    out = []
    for led in ledgers:
        per_client = {
            k: ClientRoundStats(
                bytes_down=download_bytes_full(spec),
                bytes_up=upload_bytes_full(spec),
                trainable_params=n,
                memory_bytes=memory_bytes(spec, n),
                local_loss=float("nan"),
            )
            for k in led.participants
        }
        out.append(
            RoundLedger(
                round=led.round,
                method="fedavg",
                participants=led.participants,
                per_client=per_client,
                mean_val_acc=float("nan"),
                mean_local_loss=float("nan"),
                bytes_down_total=download_bytes_full(spec) * len(led.participants),
                bytes_up_total=upload_bytes_full(spec) * len(led.participants),
                cluster_entropy=0.0,
                cluster_sizes=(),
            )
        )
    return out


def save_run_checkpoint(path, built: Experiment, result: RunResult) -> None:
    spec = built.model.spec
    meta = {
        "kind": "run_state",
        "method": result.method,
        "rounds": len(result.ledgers),
        "d_in": spec.d_in,
        "d_hidden": spec.d_hidden,
        "n_layers": spec.n_layers,
        "n_classes": spec.n_classes,
        "adapter_targets": ",".join(str(t) for t in spec.adapter_targets) or "-",
        "clusters": 0 if result.cluster_state is None else result.cluster_state.n_clusters,
    }
    arrays: dict[str, np.ndarray] = {f"W{l}": w for l, w in enumerate(built.model.frozen_layers)}
    arrays["model_head"] = built.model.head
    arrays["model_bias"] = built.model.head_bias
    if result.cluster_state is not None:
        st = result.cluster_state
        for c, bank in enumerate(st.adapters):
            for t, pair in bank.items():
                arrays[f"C{c}_B{t}"] = pair.B
                arrays[f"C{c}_A{t}"] = pair.A
            arrays[f"C{c}_head"] = st.heads[c]
            arrays[f"C{c}_bias"] = st.head_biases[c]
        arrays["P"] = st.P
    else:
        g = result.global_state
        for l, w in enumerate(g.layers):
            arrays[f"G{l}"] = w
        arrays["G_head"] = g.head
        arrays["G_bias"] = g.head_bias
    write_checkpoint(path, meta, arrays)


def run_summary(built: Experiment, result: RunResult, wall: float) -> dict:
    accs = final_client_accuracy(built, result)
    weights = np.array([s.val_y.size for s in built.shards], dtype=np.float64)
    acc_arr = np.array([accs[s.client_id] for s in built.shards])
    baseline = analytic_fedavg_ledgers(built.model.spec, result.ledgers)
    report = cost_report(result.ledgers, baseline, built.run_cfg.n_clients)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config": built.exp.resolved(),
        "config_hash": built.exp.config_hash(),
        "method": result.method,
        "rounds_executed": len(result.ledgers),
        "final_mean_val_acc": float(np.average(acc_arr, weights=weights)),
        "final_client_accuracy": {str(k): float(v) for k, v in accs.items()},
        "cost": {k: float(v) for k, v in report.items()},
        "wall_clock_seconds": wall,
    }
    if built.exp.personalize_epochs > 0 and result.cluster_state is not None:
        pers = {}
        for shard in built.shards:
            acc, _ = personalize_final(
                built.model, result.cluster_state, shard, built.run_cfg,
                epochs=built.exp.personalize_epochs,
            )
            pers[str(shard.client_id)] = float(acc)
        summary["personalized_accuracy"] = pers
        summary["personalized_mean_acc"] = float(
            np.average(np.array([pers[str(s.client_id)] for s in built.shards]), weights=weights)
        )
    return summary


# --- subcommands -----------------------------------------------------------------


def cmd_init(args) -> int:
    text = default_config_text()
    if args.path == "-":
        sys.stdout.write(text)
    else:
        Path(args.path).write_text(text, encoding="utf-8")
        print(f"wrote {args.path}")
    return 0


def _load_with_overrides(args) -> ExperimentConfig:
    exp = parse_config(args.config)
    proto = exp.protocol
    if args.seed is not None:
        proto = replace(proto, seed=args.seed)
    if getattr(args, "raw_eq7", False):
        proto = replace(proto, raw_eq7=True)
    exp = replace(exp, protocol=proto)
    if args.out is not None:
        exp = replace(exp, out_dir=args.out)
    if getattr(args, "dump_cluster_state", False):
        exp = replace(exp, dump_cluster_state=True)
    return exp


def _run_to_dir(exp: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    built = build_experiment(exp)
    metrics = MetricsWriter(out / "metrics.csv")
    dump_dir = out / "cluster_state"
    if exp.dump_cluster_state:
        dump_dir.mkdir(exist_ok=True)

    def on_round(ledger, state):
        metrics.add(ledger)
        if exp.dump_cluster_state and state is not None:
            dump_cluster_state(dump_dir / f"round_{ledger.round:04d}.json", ledger, state)

    try:
        result, wall = execute(built, on_round=on_round)
    finally:
        metrics.close()
    summary = run_summary(built, result, wall)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    save_run_checkpoint(out / "checkpoint.fhft", built, result)
    return summary


def cmd_run(args) -> int:
    exp = _load_with_overrides(args)
    summary = _run_to_dir(exp, Path(exp.out_dir))
    print(
        f"{summary['method']}: {summary['rounds_executed']} rounds, "
        f"final mean val acc {summary['final_mean_val_acc']:.4f}, "
        f"comm reduction vs fedavg {summary['cost']['comm_reduction_vs_baseline']:.2f}x"
    )
    return 0


def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if len(methods) < 2:
        raise ParameterError("compare needs at least two methods")
    for m in methods:
        if m not in METHODS:
            raise ParameterError(f"unknown method {m!r}; expected one of {METHODS}")
    exp = _load_with_overrides(args)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        m_exp = replace(exp, protocol=replace(exp.protocol, method=method))
        summary = _run_to_dir(m_exp, out / method)
        rows.append(
            {
                "method": method,
                "final_mean_val_acc": summary["final_mean_val_acc"],
                "total_bytes_down": summary["cost"]["total_bytes_down"],
                "total_bytes_up": summary["cost"]["total_bytes_up"],
                "total_bytes": summary["cost"]["total_bytes"],
                "mean_trainable_params": summary["cost"]["mean_trainable_params"],
            }
        )
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["schema_version"] + list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({"schema_version": SCHEMA_VERSION, **{k: _fmt(v) for k, v in row.items()}})
    header = f"{'method':<10} {'val_acc':>8} {'bytes_down':>14} {'bytes_up':>14} {'trainable':>12}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(
            f"{row['method']:<10} {row['final_mean_val_acc']:>8.4f} "
            f"{row['total_bytes_down']:>14.0f} {row['total_bytes_up']:>14.0f} "
            f"{row['mean_trainable_params']:>12.0f}"
        )
    return 0


_SWEEP_AXES = {
    "alpha": ("task", float),
    "group_separation": ("task", float),
    "samples": ("task", int),
    "mask_ratio": ("protocol", float),
    "clusters": ("protocol", int),
    "rank": ("protocol", int),
    "availability": ("protocol", float),
    "lr": ("protocol", float),
    "local_epochs": ("protocol", int),
    "warmup_rounds": ("protocol", int),
    "seed": ("protocol", int),
    "prox_mu": ("protocol", float),
    "dgc_threshold": ("protocol", float),
}


def set_axis(exp: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    where, _ = _SWEEP_AXES[axis]
    if where == "protocol":
        return replace(exp, protocol=replace(exp.protocol, **{axis: value}))
    return replace(exp, **{axis: value})


def _parse_values(axis: str, text: str):
    if axis not in _SWEEP_AXES:
        raise ParameterError(f"axis {axis!r} not sweepable; valid axes: {sorted(_SWEEP_AXES)}")
    typ = _SWEEP_AXES[axis][1]
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ParameterError("no sweep values given")
    return [_parse_value("sweep", axis, v, typ) for v in vals]


def cmd_sweep(args) -> int:
    exp = _load_with_overrides(args)
    values = _parse_values(args.axis, args.values)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        point = set_axis(exp, args.axis, value)
        summary = _run_to_dir(point, out / f"{args.axis}_{value}")
        rows.append(
            {
                "axis": args.axis,
                "value": value,
                "final_mean_val_acc": summary["final_mean_val_acc"],
                "total_bytes_down": summary["cost"]["total_bytes_down"],
                "total_bytes_up": summary["cost"]["total_bytes_up"],
                "mean_trainable_params": summary["cost"]["mean_trainable_params"],
                "config_hash": summary["config_hash"],
            }
        )
        print(f"{args.axis}={value}: acc {summary['final_mean_val_acc']:.4f}")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["schema_version"] + list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({"schema_version": SCHEMA_VERSION, **{k: _fmt(v) for k, v in row.items()}})
    return 0


def cmd_lr_grid(args) -> int:
    exp = _load_with_overrides(args)
    values = _parse_values("lr", args.values)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best = None
    for lr in values:
        point = set_axis(exp, "lr", lr)
        summary = _run_to_dir(point, out / f"lr_{lr}")
        acc = summary["final_mean_val_acc"]
        print(f"lr={lr}: acc {acc:.4f}")
        if best is None or acc > best[1]:
            best = (lr, acc)
    print(f"best lr {best[0]} with acc {best[1]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="write a default config file")
    p_init.add_argument("path", nargs="?", default="fedhft.ini")
    p_init.set_defaults(fn=cmd_init)

    def common(p):
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--raw-eq7", dest="raw_eq7", action="store_true")
        p.add_argument("--dump-cluster-state", dest="dump_cluster_state", action="store_true")

    p_run = sub.add_parser("run", help="single run: metrics.csv, summary.json, checkpoint")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods on shared data")
    common(p_cmp)
    p_cmp.add_argument("--methods", required=True, help="comma list, e.g. fedhft,fedavg")
    p_cmp.set_defaults(fn=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="one run per value of a scalar axis")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument("--values", required=True, help="comma list of values")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_grid = sub.add_parser("lr-grid", help="grid search over learning rates")
    common(p_grid)
    p_grid.add_argument("--values", required=True, help="comma list of learning rates")
    p_grid.set_defaults(fn=cmd_lr_grid)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except FedHftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
