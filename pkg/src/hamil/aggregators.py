"""Aggregation mechanisms: trainable pairwise conv units, hierarchical and
random-order replay, elementwise-mean ablation, pooling, and attention.

Every aggregator maps a list of equal-shape instance features to a single
feature of that shape. The conv units come in 1-D (length-D vectors, used
for the classic benchmarks) and 2-D (C x H x W feature maps) modes; one
shared parameter set is reused by every merge step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .hierclust import MergeQueue, QueueIntegrityError, build_hierarchy
from .tensor import Tensor

POOL_KINDS = ("max_pool", "mean_pool", "sum_pool", "lse_pool")
AGGREGATOR_KINDS = ("hamil", "hamil_a", "ramil") + POOL_KINDS + (
    "attention", "gated_attention")


@dataclass
class AggregatorSpec:
    """Configuration selecting an aggregation mechanism."""

    kind: str = "hamil"
    layers: int = 1                  # conv unit depth, 1..3
    kernel_size: int = 7
    use_batchnorm: bool = False
    attention_hidden: int = 64
    lse_r: float = 1.0

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator kind: {self.kind!r}")
        if self.layers not in (1, 2, 3):
            raise ValueError(f"aggregation unit layers must be 1..3, got {self.layers}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")

    @property
    def needs_queue(self) -> bool:
        return self.kind in ("hamil", "hamil_a")

    @property
    def trainable_unit(self) -> bool:
        return self.kind in ("hamil", "ramil")


class AggUnitParams:
    """Shared parameters of an L1/L2/L3 aggregation unit.

    mode "1d": each conv maps a 2-channel length-D signal to 1 channel.
    mode "2d": the same 2->1 kernel is applied per channel of C x H x W
    maps and the C outputs are concatenated back.
    """

    def __init__(self, spec: AggregatorSpec, mode: str, rng: np.random.Generator):
        if mode not in ("1d", "2d"):
            raise ValueError(f"mode must be '1d' or '2d', got {mode!r}")
        self.mode = mode
        self.layers = spec.layers
        self.kernel_size = spec.kernel_size
        self.use_batchnorm = spec.use_batchnorm
        self.padding = (spec.kernel_size - 1) // 2
        k = spec.kernel_size
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        self.bn_gamma: List[Tensor] = []
        self.bn_beta: List[Tensor] = []
        self.bn_state: List[T.BatchNormState] = []
        for layer in range(self.layers):
            cin = 2 if layer == 0 else 1
            shape = (1, cin, k) if mode == "1d" else (1, cin, k, k)
            fan_in = cin * (k if mode == "1d" else k * k)
            self.weights.append(T.init_uniform(shape, fan_in, rng))
            self.biases.append(T.init_uniform((1,), fan_in, rng))
        # batchnorm between layers (and optionally after a 1-layer unit);
        # running stats are shared across all merge steps, like the kernels
        n_bn = self.layers - 1 if self.layers > 1 else (1 if self.use_batchnorm else 0)
        for _ in range(n_bn):
            self.bn_gamma.append(Tensor(np.ones(1), requires_grad=True))
            self.bn_beta.append(Tensor(np.zeros(1), requires_grad=True))
            self.bn_state.append(T.BatchNormState(1))

    def named_params(self, prefix: str = "agg") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{i}.weight"] = w
            out[f"{prefix}.conv{i}.bias"] = b
        for i, (g, b) in enumerate(zip(self.bn_gamma, self.bn_beta)):
            out[f"{prefix}.bn{i}.gamma"] = g
            out[f"{prefix}.bn{i}.beta"] = b
        return out

    @classmethod
    def mean_kernel(cls, spec: AggregatorSpec, mode: str) -> "AggUnitParams":
        """Handcrafted 1-layer unit computing the elementwise pair mean."""
        spec = AggregatorSpec(kind=spec.kind, layers=1, kernel_size=spec.kernel_size,
                              use_batchnorm=False)
        p = cls(spec, mode, np.random.default_rng(0))
        k = spec.kernel_size
        w = np.zeros(p.weights[0].data.shape)
        if mode == "1d":
            w[0, :, k // 2] = 0.5
        else:
            w[0, :, k // 2, k // 2] = 0.5
        p.weights[0].data = w
        p.biases[0].data = np.zeros(1)
        return p


def _unit_forward(x: Tensor, params: AggUnitParams, training: bool) -> Tensor:
    """Run the stacked conv unit on a 2-channel signal, returning 1 channel."""
    conv = T.conv1d if params.mode == "1d" else T.conv2d
    h = x
    for layer in range(params.layers):
        h = conv(h, params.weights[layer], params.biases[layer], params.padding)
        last = layer == params.layers - 1
        if not last:
            h = T.batchnorm(h, params.bn_gamma[layer], params.bn_beta[layer],
                            params.bn_state[layer], training)
            h = T.relu(h)
        elif params.layers == 1 and params.use_batchnorm:
            h = T.batchnorm(h, params.bn_gamma[0], params.bn_beta[0],
                            params.bn_state[0], training)
    return h


def aggregate_pair(a: Tensor, b: Tensor, params: AggUnitParams,
                   training: bool = False) -> Tensor:
    """Fuse two equal-shape features through the shared conv unit.

    Vectors (D,) are stacked into a 2 x D signal; feature maps (C, H, W)
    are fused channel by channel with the same kernel and re-concatenated.
    """
    if a.data.shape != b.data.shape:
        raise T.ShapeError(
            f"aggregate_pair: shapes {a.data.shape} and {b.data.shape} differ")
    if params.mode == "1d":
        if a.data.ndim != 1:
            raise T.ShapeError(
                f"1d aggregation expects vectors, got shape {a.data.shape}")
        pair = T.stack([a, b], axis=0)              # (2, D)
        out = _unit_forward(pair, params, training)  # (1, D)
        return T.reshape(out, (a.data.shape[0],))
    if a.data.ndim != 3:
        raise T.ShapeError(
            f"2d aggregation expects (C, H, W) maps, got shape {a.data.shape}")
    channels = []
    for c in range(a.data.shape[0]):
        pair = T.stack([a[c], b[c]], axis=0)        # (2, H, W)
        channels.append(_unit_forward(pair, params, training))
    return T.concat(channels, axis=0)               # (C, H, W)


def _mean_pair(a: Tensor, b: Tensor) -> Tensor:
    return (a + b) * Tensor(0.5)


def _replay(instances: Sequence[Tensor], queue: MergeQueue, merge_fn) -> Tensor:
    m = len(instances)
    queue.validate(m)
    if m == 1:
        return instances[0]
    slots = {i + 1: inst for i, inst in enumerate(instances)}
    for t in queue:
        try:
            left, right = slots.pop(t.left), slots.pop(t.right)
        except KeyError as e:
            raise QueueIntegrityError(f"slot {e.args[0]} unavailable") from e
        slots[t.new] = merge_fn(left, right)
    (result,) = slots.values()
    return result


def hamil_aggregate(instances: Sequence[Tensor], queue: MergeQueue,
                    params: AggUnitParams, training: bool = False) -> Tensor:
    """Replay the merge queue through the shared conv unit."""
    return _replay(instances, queue,
                   lambda a, b: aggregate_pair(a, b, params, training))


def hamil_a_aggregate(instances: Sequence[Tensor], queue: MergeQueue) -> Tensor:
    """Hierarchy replay with parameter-free elementwise-mean merges."""
    return _replay(instances, queue, _mean_pair)


def ramil_aggregate(instances: Sequence[Tensor], rng: np.random.Generator,
                    params: AggUnitParams, training: bool = False) -> Tensor:
    """Left-deep fold over a uniformly random instance permutation."""
    m = len(instances)
    if m == 0:
        raise ValueError("ramil_aggregate on an empty bag")
    order = rng.permutation(m)
    acc = instances[order[0]]
    for i in order[1:]:
        acc = aggregate_pair(acc, instances[i], params, training)
    return acc


def pool_aggregate(instances: Sequence[Tensor], kind: str, r: float = 1.0) -> Tensor:
    """Elementwise max/mean/sum/lse reduction across instances."""
    if not instances:
        raise ValueError("pool_aggregate on an empty bag")
    stacked = T.stack(list(instances), axis=0)
    op = {"max_pool": "max", "mean_pool": "mean",
          "sum_pool": "sum", "lse_pool": "lse"}.get(kind)
    if op is None:
        raise ValueError(f"unknown pooling kind: {kind!r}")
    return T.reduce(stacked, op, axis=0, r=r)


class AttentionParams:
    """Weights of the (gated) attention scorer over D-vector instances."""

    def __init__(self, feature_dim: int, hidden: int, gated: bool,
                 rng: np.random.Generator):
        self.gated = gated
        self.V = T.init_uniform((feature_dim, hidden), feature_dim, rng)
        self.w = T.init_uniform((hidden, 1), hidden, rng)
        self.U = T.init_uniform((feature_dim, hidden), feature_dim, rng) if gated else None

    def named_params(self, prefix: str = "attn") -> dict:
        out = {f"{prefix}.V": self.V, f"{prefix}.w": self.w}
        if self.U is not None:
            out[f"{prefix}.U"] = self.U
        return out


def attention_aggregate(instances: Sequence[Tensor],
                        params: AttentionParams) -> Tensor:
    """Softmax-weighted sum: a_i from w . tanh(V x_i), optionally gated by
    sigmoid(U x_i)."""
    if not instances:
        raise ValueError("attention_aggregate on an empty bag")
    for inst in instances:
        if inst.data.ndim != 1:
            raise T.ShapeError(
                f"attention operates on vectors, got shape {inst.data.shape}")
    X = T.stack(list(instances), axis=0)            # (m, D)
    h = T.tanh(T.matmul(X, params.V))               # (m, hidden)
    if params.gated:
        h = T.mul(h, T.sigmoid(T.matmul(X, params.U)))
    scores = T.reshape(T.matmul(h, params.w), (len(instances),))
    weights = T.softmax(scores)                     # (m,), sums to 1
    out = T.matmul(T.reshape(weights, (1, len(instances))), X)
    return T.reshape(out, (X.data.shape[1],))


def instance_scores(instances: Sequence[Tensor], aggregated: Tensor) -> List[float]:
    """Cosine similarity of each instance feature to the aggregated feature."""
    agg = np.asarray(aggregated.data, dtype=np.float64).ravel()
    na = np.linalg.norm(agg)
    scores = []
    for inst in instances:
        v = np.asarray(inst.data, dtype=np.float64).ravel()
        nv = np.linalg.norm(v)
        if na == 0.0 or nv == 0.0:
            scores.append(0.0)
        else:
            scores.append(float(np.dot(v, agg) / (nv * na)))
    return scores


def canonical_order(features) -> np.ndarray:
    """Permutation-invariant instance ordering: lexicographic on the
    flattened feature values. A bag is an unordered set, so the hierarchy
    (and the left/right feed order of the conv units, which is not
    symmetric) is anchored to this canonical order rather than to the
    arbitrary presentation order."""
    arr = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in features])
    return np.lexsort(arr.T[::-1])


def aggregate(instances: Sequence[Tensor], spec: AggregatorSpec,
              unit: Optional[AggUnitParams] = None,
              attn: Optional[AttentionParams] = None,
              rng: Optional[np.random.Generator] = None,
              training: bool = False,
              cluster_features=None):
    """Dispatch on the spec; returns (aggregated feature, queue or None).

    HAMIL kinds cluster on detached features (``cluster_features`` when
    given, else the instance values), so no gradient flows through the
    hierarchy construction; queue indices refer to canonical instance
    order.
    """
    kind = spec.kind
    if kind in ("hamil", "hamil_a"):
        detached = cluster_features if cluster_features is not None \
            else [inst.data for inst in instances]
        order = canonical_order(detached)
        ordered = [instances[i] for i in order]
        queue = build_hierarchy([detached[i] for i in order])
        if kind == "hamil":
            return hamil_aggregate(ordered, queue, unit, training), queue
        return hamil_a_aggregate(ordered, queue), queue
    if kind == "ramil":
        if rng is None:
            if training:
                raise ValueError("ramil requires an rng during training")
            # eval mode: fixed order so evaluation is reproducible
            rng = np.random.default_rng(0)
        return ramil_aggregate(instances, rng, unit, training), None
    if kind in POOL_KINDS:
        return pool_aggregate(instances, kind, spec.lse_r), None
    if kind in ("attention", "gated_attention"):
        return attention_aggregate(instances, attn), None
    raise ValueError(f"unknown aggregator kind: {kind!r}")
