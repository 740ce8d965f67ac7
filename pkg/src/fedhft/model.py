"""Small differentiable stand-in for a pre-trained backbone.

Architecture: a stack of frozen linear layers with tanh activations (layer 0
maps d_in -> d_hidden, the rest d_hidden -> d_hidden) followed by a trainable
linear classifier head. Adapter deltas are added to the weight matrices named
in ``adapter_targets``; everything else stays frozen after pretraining.

Loss is mean cross-entropy with a log-sum-exp softmax. Gradients are analytic
and validated against central finite differences in the test suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterPair
from .errors import ContractViolation, NumericError, ParameterError, ParseError
from .numerics import RngStream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FEDHFT1"


@dataclass(frozen=True)
class BackboneSpec:
    """Shape of the backbone and where adapters attach."""

    d_in: int
    d_hidden: int
    n_layers: int
    n_classes: int
    adapter_targets: tuple[int, ...] = ()
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if min(self.d_in, self.d_hidden, self.n_layers, self.n_classes) < 1:
            raise ParameterError("all backbone dimensions must be >= 1")
        if self.nonlinearity != "tanh":
            raise ParameterError(f"unsupported nonlinearity {self.nonlinearity!r}")
        if any(t < 0 or t >= self.n_layers for t in self.adapter_targets):
            raise ParameterError(f"adapter targets {self.adapter_targets} outside layer range")

    def layer_shape(self, layer: int) -> tuple[int, int]:
        return (self.d_hidden, self.d_in if layer == 0 else self.d_hidden)


@dataclass(frozen=True)
class ModelParams:
    """Backbone weights (immutable after pretraining) plus classifier head."""

    spec: BackboneSpec
    frozen_layers: tuple[np.ndarray, ...]
    head: np.ndarray          # (n_classes, d_hidden)
    head_bias: np.ndarray     # (n_classes,)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray      # (b, d_in)
    labels: np.ndarray        # (b,) int class indices

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ParameterError(f"features must be (b, d) with b >= 1, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("labels must be one int per sample")
        if np.any(self.labels < 0):
            raise ParameterError("labels must be non-negative class indices")


@dataclass
class ForwardCache:
    """Activation record tying a backward call to its forward call."""

    layer_inputs: list[np.ndarray]
    activations: list[np.ndarray]
    logits: np.ndarray
    params_ref: ModelParams
    deltas_ref: object
    batch_ref: Batch


@dataclass
class GradSet:
    """Gradients of mean cross-entropy w.r.t. every weight matrix.

    ``d_layers[t]`` doubles as dL/d(delta_t) for adapter targets because the
    delta enters the effective weight additively.
    """

    d_layers: list[np.ndarray]
    d_head: np.ndarray
    d_bias: np.ndarray


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.shape[0]), labels]
    return float(np.mean(logz - picked))


def forward(
    params: ModelParams,
    deltas: dict[int, np.ndarray] | None,
    batch: Batch,
    head: np.ndarray | None = None,
    head_bias: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the model with additive weight deltas on the adapter targets.

    ``head``/``head_bias`` override the stored classifier (used when a client
    evaluates a merged per-cluster head without touching shared params).
    """
    spec = params.spec
    deltas_arg = deltas
    deltas = deltas or {}
    for t, d in deltas.items():
        if t not in spec.adapter_targets:
            raise ParameterError(f"delta provided for non-target layer {t}")
        if d.shape != spec.layer_shape(t):
            raise ParameterError(f"delta shape {d.shape} != layer shape {spec.layer_shape(t)}")
    if np.any(batch.labels >= spec.n_classes):
        raise ParameterError("label out of range for model head")
    h = batch.features
    layer_inputs, activations = [], []
    for l, w in enumerate(params.frozen_layers):
        w_eff = w + deltas[l] if l in deltas else w
        layer_inputs.append(h)
        h = np.tanh(h @ w_eff.T)
        activations.append(h)
    hd = params.head if head is None else head
    hb = params.head_bias if head_bias is None else head_bias
    logits = h @ hd.T + hb
    cache = ForwardCache(
        layer_inputs=layer_inputs,
        activations=activations,
        logits=logits,
        params_ref=params,
        deltas_ref=deltas_arg,
        batch_ref=batch,
    )
    return logits, cache


def backward(
    params: ModelParams,
    deltas: dict[int, np.ndarray] | None,
    cache: ForwardCache,
    batch: Batch,
    head: np.ndarray | None = None,
) -> GradSet:
    """Backprop mean cross-entropy through the cached forward pass."""
    if cache.batch_ref is not batch or cache.params_ref is not params or cache.deltas_ref is not deltas:
        raise ContractViolation("backward called with a cache from a different forward pass")
    deltas = deltas or {}
    b = batch.features.shape[0]
    probs = softmax_rows(cache.logits)
    dlogits = probs.copy()
    dlogits[np.arange(b), batch.labels] -= 1.0
    dlogits /= b
    hd = params.head if head is None else head
    d_head = dlogits.T @ cache.activations[-1]
    d_bias = dlogits.sum(axis=0)
    dh = dlogits @ hd
    d_layers: list[np.ndarray] = [None] * len(params.frozen_layers)  # type: ignore[list-item]
    for l in range(len(params.frozen_layers) - 1, -1, -1):
        dz = dh * (1.0 - cache.activations[l] ** 2)
        d_layers[l] = dz.T @ cache.layer_inputs[l]
        if l > 0:
            w_eff = params.frozen_layers[l]
            if l in deltas:
                w_eff = w_eff + deltas[l]
            dh = dz @ w_eff
    return GradSet(d_layers=d_layers, d_head=d_head, d_bias=d_bias)


def factor_grads(pair: AdapterPair, d_delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain dL/d(delta) into the low-rank factors: dB = G A^T, dA = B^T G."""
    return d_delta @ pair.A.T, pair.B.T @ d_delta


def adapter_trainables(
    adapters: dict[int, AdapterPair], head: np.ndarray, head_bias: np.ndarray
) -> dict[str, np.ndarray]:
    """Snapshot of the adapter-path trainable tensors, keyed like SGD steps.

    Used as the proximal anchor and for scaffold corrections.
    """
    snap = {"head": head.copy(), "bias": head_bias.copy()}
    for t, p in adapters.items():
        snap[f"B{t}"] = p.B.copy()
        snap[f"A{t}"] = p.A.copy()
    return snap


@dataclass
class FitResult:
    adapters: dict[int, AdapterPair]
    head: np.ndarray
    head_bias: np.ndarray
    epoch_losses: list[float]
    final_loss: float


def _minibatches(n: int, batch_size: int, gen: np.random.Generator):
    perm = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def local_finetune(
    params: ModelParams,
    offsets: dict[int, np.ndarray],
    adapters: dict[int, AdapterPair],
    head: np.ndarray,
    head_bias: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: RngStream | np.random.Generator,
    prox: tuple[float, dict[str, np.ndarray]] | None = None,
    scaffold: dict[str, np.ndarray] | None = None,
) -> FitResult:
    """Mini-batch SGD on the adapter factors and the classifier only.

    ``offsets`` hold the merged mixture deltas, kept constant; the trainable
    update at target t is offsets[t] + B_t @ A_t. When ``prox`` is set, each
    gradient gains mu * (value - anchor); ``scaffold`` adds a per-tensor
    correction to every step. Epoch losses are measured before each step.
    """
    if epochs < 1:
        raise ParameterError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    if x.shape[0] < 1:
        raise ParameterError("shard is empty")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    factors = {t: (p.B.copy(), p.A.copy()) for t, p in adapters.items()}
    head = head.copy()
    head_bias = head_bias.copy()
    n = x.shape[0]
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        batch_losses = []
        for bi, idx in enumerate(_minibatches(n, batch_size, gen)):
            batch = Batch(features=x[idx], labels=y[idx])
            deltas = {t: offsets[t] + b @ a for t, (b, a) in factors.items()}
            logits, cache = forward(params, deltas, batch, head=head, head_bias=head_bias)
            loss = mean_cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}; reduce lr")
            batch_losses.append(loss)
            grads = backward(params, deltas, cache, batch, head=head)
            step: dict[str, np.ndarray] = {"head": grads.d_head, "bias": grads.d_bias}
            for t, (b, a) in factors.items():
                g = grads.d_layers[t]
                step[f"B{t}"] = g @ a.T
                step[f"A{t}"] = b.T @ g
            values = {"head": head, "bias": head_bias}
            for t, (b, a) in factors.items():
                values[f"B{t}"] = b
                values[f"A{t}"] = a
            if prox is not None:
                mu, anchor = prox
                for k, g in step.items():
                    g += mu * (values[k] - anchor[k])
            if scaffold is not None:
                for k, g in step.items():
                    g += scaffold[k]
            for k, v in values.items():
                v -= lr * step[k]
        epoch_losses.append(float(np.mean(batch_losses)))
    final_deltas = {t: offsets[t] + b @ a for t, (b, a) in factors.items()}
    logits, _ = forward(params, final_deltas, Batch(features=x, labels=y), head=head, head_bias=head_bias)
    out_adapters = {
        t: AdapterPair(B=b, A=a, rank=adapters[t].rank, target=t) for t, (b, a) in factors.items()
    }
    return FitResult(
        adapters=out_adapters,
        head=head,
        head_bias=head_bias,
        epoch_losses=epoch_losses,
        final_loss=mean_cross_entropy(logits, y),
    )


@dataclass
class FullFitResult:
    layers: list[np.ndarray]
    head: np.ndarray
    head_bias: np.ndarray
    epoch_losses: list[float]
    final_loss: float
    n_steps: int


def full_finetune(
    spec: BackboneSpec,
    layers: list[np.ndarray],
    head: np.ndarray,
    head_bias: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: RngStream | np.random.Generator,
    prox: tuple[float, dict[str, np.ndarray]] | None = None,
    scaffold: dict[str, np.ndarray] | None = None,
) -> FullFitResult:
    """SGD over every weight (backbone unfrozen) for full-model baselines.

    Same step/prox/scaffold semantics as local_finetune; tensors are keyed
    "W0".."W{L-1}", "head", "bias".
    """
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    layers = [w.copy() for w in layers]
    head = head.copy()
    head_bias = head_bias.copy()
    work = ModelParams(spec=spec, frozen_layers=tuple(layers), head=head, head_bias=head_bias)
    n = x.shape[0]
    epoch_losses: list[float] = []
    n_steps = 0
    for epoch in range(epochs):
        batch_losses = []
        for bi, idx in enumerate(_minibatches(n, batch_size, gen)):
            batch = Batch(features=x[idx], labels=y[idx])
            logits, cache = forward(work, None, batch, head=head, head_bias=head_bias)
            loss = mean_cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}; reduce lr")
            batch_losses.append(loss)
            grads = backward(work, None, cache, batch, head=head)
            step = {f"W{l}": g for l, g in enumerate(grads.d_layers)}
            step["head"] = grads.d_head
            step["bias"] = grads.d_bias
            values = {f"W{l}": w for l, w in enumerate(layers)}
            values["head"] = head
            values["bias"] = head_bias
            if prox is not None:
                mu, anchor = prox
                for k, g in step.items():
                    g += mu * (values[k] - anchor[k])
            if scaffold is not None:
                for k, g in step.items():
                    g += scaffold[k]
            for k, v in values.items():
                v -= lr * step[k]
            n_steps += 1
        epoch_losses.append(float(np.mean(batch_losses)))
    logits, _ = forward(work, None, Batch(features=x, labels=y), head=head, head_bias=head_bias)
    return FullFitResult(
        layers=layers,
        head=head,
        head_bias=head_bias,
        epoch_losses=epoch_losses,
        final_loss=mean_cross_entropy(logits, y),
        n_steps=n_steps,
    )


def init_params(spec: BackboneSpec, rng: RngStream) -> ModelParams:
    """Gaussian init scaled by fan-in; head starts small, bias at zero."""
    gen = rng.generator()
    layers = []
    for l in range(spec.n_layers):
        rows, cols = spec.layer_shape(l)
        layers.append(gen.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)))
    head = gen.normal(0.0, 1.0 / np.sqrt(spec.d_hidden), size=(spec.n_classes, spec.d_hidden))
    bias = np.zeros(spec.n_classes)
    return ModelParams(
        spec=spec,
        frozen_layers=tuple(_freeze(w) for w in layers),
        head=head,
        head_bias=bias,
    )


def pretrain_backbone(
    spec: BackboneSpec,
    pool: Batch,
    epochs: int,
    lr: float,
    rng: RngStream,
    batch_size: int = 32,
) -> ModelParams:
    """Train all weights on a pooled generic dataset, then freeze the layers.

    The result is the shared starting point every protocol begins from;
    epochs=0 returns the raw initialization.
    """
    init = init_params(spec, rng.child(1))
    if epochs == 0:
        return init
    fit = full_finetune(
        spec,
        list(init.frozen_layers),
        init.head,
        init.head_bias,
        pool.features,
        pool.labels,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        rng=rng.child(2),
    )
    params = ModelParams(
        spec=spec,
        frozen_layers=tuple(_freeze(w) for w in fit.layers),
        head=fit.head,
        head_bias=fit.head_bias,
    )
    acc = evaluate(params, None, pool.features, pool.labels)[0]
    log.info("pretrained backbone: pooled accuracy %.4f, final loss %.4f", acc, fit.final_loss)
    return params


def evaluate(
    params: ModelParams,
    deltas: dict[int, np.ndarray] | None,
    x: np.ndarray,
    y: np.ndarray,
    head: np.ndarray | None = None,
    head_bias: np.ndarray | None = None,
) -> tuple[float, float]:
    """(accuracy, mean loss) on a labeled set."""
    logits, _ = forward(params, deltas, Batch(features=x, labels=y), head=head, head_bias=head_bias)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return acc, mean_cross_entropy(logits, y)


# --- checkpoint persistence -------------------------------------------------
#
# Layout (documented in README): ASCII header then raw little-endian float64.
#   FEDHFT1\n
#   <key> <value>\n          (any number of metadata lines)
#   matrices <N>\n
#   <name> <ndim> <dim0> [<dim1>]\n   (N declarations, payload order)
#   end\n
#   <concatenated row-major float64 payloads>


def write_checkpoint(path, meta: dict[str, object], arrays: dict[str, np.ndarray]) -> None:
    lines = [CHECKPOINT_MAGIC.decode() + "\n", "format_version 1\n"]
    for k, v in meta.items():
        if " " in k or "\n" in str(v):
            raise ParameterError(f"metadata key/value not encodable: {k!r}")
        lines.append(f"{k} {v}\n")
    lines.append(f"matrices {len(arrays)}\n")
    for name, arr in arrays.items():
        if arr.ndim not in (1, 2):
            raise ParameterError(f"array {name!r} must be 1-D or 2-D")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {arr.ndim} {dims}\n")
    lines.append("end\n")
    with open(path, "wb") as fh:
        fh.write("".join(lines).encode())
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if blob[:nl] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:nl]!r}")
    meta: dict[str, str] = {}
    decls: list[tuple[str, tuple[int, ...]]] = []
    pos = nl + 1
    n_matrices = None
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ParseError("checkpoint header truncated")
        line = blob[pos:nl].decode()
        pos = nl + 1
        if line == "end":
            break
        parts = line.split(" ")
        if n_matrices is None:
            if parts[0] == "matrices":
                n_matrices = int(parts[1])
            else:
                meta[parts[0]] = " ".join(parts[1:])
        else:
            name, ndim = parts[0], int(parts[1])
            decls.append((name, tuple(int(d) for d in parts[2 : 2 + ndim])))
    if n_matrices != len(decls):
        raise ParseError(f"declared {n_matrices} matrices, found {len(decls)}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in decls:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after payload")
    return meta, arrays


def save_model(path, params: ModelParams) -> None:
    spec = params.spec
    meta = {
        "kind": "model_params",
        "d_in": spec.d_in,
        "d_hidden": spec.d_hidden,
        "n_layers": spec.n_layers,
        "n_classes": spec.n_classes,
        "nonlinearity": spec.nonlinearity,
        "adapter_targets": ",".join(str(t) for t in spec.adapter_targets) or "-",
    }
    arrays = {f"W{l}": w for l, w in enumerate(params.frozen_layers)}
    arrays["head"] = params.head
    arrays["bias"] = params.head_bias
    write_checkpoint(path, meta, arrays)


def load_model(path) -> ModelParams:
    meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "model_params":
        raise ParseError(f"checkpoint kind {meta.get('kind')!r} is not model_params")
    targets = () if meta["adapter_targets"] == "-" else tuple(
        int(t) for t in meta["adapter_targets"].split(",")
    )
    spec = BackboneSpec(
        d_in=int(meta["d_in"]),
        d_hidden=int(meta["d_hidden"]),
        n_layers=int(meta["n_layers"]),
        n_classes=int(meta["n_classes"]),
        adapter_targets=targets,
        nonlinearity=meta["nonlinearity"],
    )
    layers = tuple(_freeze(arrays[f"W{l}"]) for l in range(spec.n_layers))
    return ModelParams(spec=spec, frozen_layers=layers, head=arrays["head"], head_bias=arrays["bias"])
