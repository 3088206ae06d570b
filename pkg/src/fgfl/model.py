"""Multilayer graph-attention regression model.

Three attention layers with six heads each. Per head, the edge score is
``a . leaky_relu(W [x_v || x_u])`` (nonlinearity before the attention
projection, so attention stays input-dependent); scores are softmax-
normalized over every receiving node's in-neighborhood, and messages are
a separate per-head linear transform of the sender features. Heads are
concatenated in hidden layers and averaged in the final layer, with ReLU
in between and dropout on node features while training. A mean-pooling
readout over all (vertex, layer) replicas feeds an affine map down to
the scalar severity prediction.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graphs import MultilayerGraph, PatientSample

HEADS = 6
N_GAT_LAYERS = 3
HEAD_DIM = 8
DROPOUT_P = 0.1

SCHEME_ONE_HOT = "one-hot-region"
SCHEME_ONE_HOT_STRENGTH = "one-hot-plus-strength"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class NodeFeatureConfig:
    """Feature scheme for (vertex, layer) replicas.

    ``one-hot-region`` encodes only region identity (d = V);
    ``one-hot-plus-strength`` appends one column per band holding the
    replica's min-max-normalized incident-weight sum (d = V + L).
    """

    scheme: str = SCHEME_ONE_HOT_STRENGTH
    n_regions: int = 31
    n_bands: int = 3

    def __post_init__(self):
        if self.scheme not in (SCHEME_ONE_HOT, SCHEME_ONE_HOT_STRENGTH):
            raise ModelError(f"unknown feature scheme {self.scheme!r}")

    @property
    def dim(self) -> int:
        if self.scheme == SCHEME_ONE_HOT:
            return self.n_regions
        return self.n_regions + self.n_bands


@dataclass(frozen=True)
class ModelConfig:
    features: NodeFeatureConfig = field(default_factory=NodeFeatureConfig)
    n_layers: int = N_GAT_LAYERS
    heads: int = HEADS
    head_dim: int = HEAD_DIM

    @property
    def scheme_id(self) -> str:
        """Versioned identifier embedded in serialized model payloads."""
        f = self.features
        return (
            f"{f.scheme}:v{f.n_regions}:b{f.n_bands}"
            f":gat{self.n_layers}x{self.heads}x{self.head_dim}"
        )

    def layer_in_dim(self, layer: int) -> int:
        return self.features.dim if layer == 0 else self.heads * self.head_dim


@dataclass
class GatHeadParams:
    w_score: np.ndarray  # (head_dim, 2 * d_in)
    a: np.ndarray        # (head_dim,)
    w_value: np.ndarray  # (head_dim, d_in)


@dataclass
class GatLayerParams:
    heads: list[GatHeadParams]


@dataclass
class ModelParameters:
    """Structured weights plus the canonical flat-vector form.

    Flat ordering: layer index ascending, head index ascending, score
    matrix row-major, then attention vector, then value matrix row-major;
    finally readout weights then bias. flatten/unflatten round-trips
    bitwise.
    """

    config: ModelConfig
    layers: list[GatLayerParams]
    readout_w: np.ndarray  # (head_dim,)
    readout_b: np.ndarray  # (1,)

    def tensors(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            for head in layer.heads:
                out.extend((head.w_score, head.a, head.w_value))
        out.extend((self.readout_w, self.readout_b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    @property
    def n_parameters(self) -> int:
        return flat_length(self.config)

    def copy(self) -> "ModelParameters":
        return unflatten(self.flatten(), self.config)


def _tensor_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    for layer in range(config.n_layers):
        d_in = config.layer_in_dim(layer)
        for _ in range(config.heads):
            shapes.append((config.head_dim, 2 * d_in))
            shapes.append((config.head_dim,))
            shapes.append((config.head_dim, d_in))
    shapes.append((config.head_dim,))
    shapes.append((1,))
    return shapes


def flat_length(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in _tensor_shapes(config))


def unflatten(flat: np.ndarray, config: ModelConfig) -> ModelParameters:
    flat = np.asarray(flat, dtype=np.float64)
    expected = flat_length(config)
    if flat.ndim != 1 or flat.size != expected:
        raise ModelError(f"flat vector has {flat.size} entries, model needs {expected}")
    pieces: list[np.ndarray] = []
    offset = 0
    for shape in _tensor_shapes(config):
        size = int(np.prod(shape))
        pieces.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    layers: list[GatLayerParams] = []
    idx = 0
    for _ in range(config.n_layers):
        heads = []
        for _ in range(config.heads):
            heads.append(GatHeadParams(w_score=pieces[idx], a=pieces[idx + 1], w_value=pieces[idx + 2]))
            idx += 3
        layers.append(GatLayerParams(heads=heads))
    return ModelParameters(config=config, layers=layers, readout_w=pieces[idx], readout_b=pieces[idx + 1])


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor, seeded."""
    rng = np.random.default_rng(seed)
    chunks: list[np.ndarray] = []
    for shape in _tensor_shapes(config):
        fan_in = shape[-1] if len(shape) > 1 else config.head_dim
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return unflatten(np.concatenate(chunks), config)


@dataclass(frozen=True)
class PredictionContext:
    """Forward-pass mode. Eval mode ignores dropout entirely."""

    mode: str = "eval"
    dropout: float = DROPOUT_P
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ModelError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def training(self) -> bool:
        return self.mode == "train"


EVAL_CONTEXT = PredictionContext(mode="eval")

# Undirected intra-layer edge identified as (layer index, (u, v)) with u < v.
EdgeKey = tuple[int, tuple[int, int]]


@dataclass
class GraphTensors:
    """Directed edge arrays over replica nodes, ready for message passing.

    ``graph_ids`` assigns every node to one graph of a batch (all zeros
    for a single sample), so a disjoint union of several samples runs
    through one forward pass with per-graph mean pooling.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    graph_ids: np.ndarray | None = None
    n_graphs: int = 1


def explained_edges(graph: MultilayerGraph) -> list[EdgeKey]:
    """Intra-layer edges eligible for masking/attribution.

    Self-loops and inter-layer replica edges are construction artifacts
    and stay present in every evaluation.
    """
    out: list[EdgeKey] = []
    for li, layer in enumerate(graph.layers):
        for (u, v) in sorted(layer.weights):
            if u != v:
                out.append((li, (u, v)))
    return out


def build_graph_tensors(
    graph: MultilayerGraph, masked_edges: frozenset[EdgeKey] | None = None
) -> GraphTensors:
    """Directed edges: both directions per undirected edge, one per self-loop.

    ``masked_edges`` removes both directions of the named intra-layer
    edges; self-loops and inter-layer edges are never masked.
    """
    n = graph.n_vertices
    src: list[int] = []
    dst: list[int] = []
    for li, layer in enumerate(graph.layers):
        base = li * n
        for (u, v) in sorted(layer.weights):
            if u == v:
                src.append(base + u)
                dst.append(base + u)
            elif masked_edges is None or (li, (u, v)) not in masked_edges:
                src.append(base + u)
                dst.append(base + v)
                src.append(base + v)
                dst.append(base + u)
    for (v, li), (u, lj) in graph.inter_edges:
        a = li * n + v
        b = lj * n + u
        src.extend((a, b))
        dst.extend((b, a))
    src_arr = np.asarray(src, dtype=np.intp)
    dst_arr = np.asarray(dst, dtype=np.intp)
    # receiver-sorted edges let attention use fast contiguous segment reductions
    order = np.argsort(dst_arr, kind="stable")
    return GraphTensors(n_nodes=graph.n_replicas, src=src_arr[order], dst=dst_arr[order])


def node_features(sample: PatientSample, config: NodeFeatureConfig) -> np.ndarray:
    """One feature row per (vertex, layer) replica.

    Region identity is one-hot in the first V columns. Under the
    strength scheme, column V + l of replica (v, l) holds the sum of
    LLC weights incident to v within layer l (self-loop included),
    min-max normalized over all replicas of the graph.
    """
    graph = sample.graph
    v_count, l_count = graph.n_vertices, graph.n_layers
    if config.n_regions != v_count or (
        config.scheme == SCHEME_ONE_HOT_STRENGTH and config.n_bands != l_count
    ):
        raise ModelError(
            f"feature config ({config.n_regions} regions, {config.n_bands} bands) does not "
            f"match sample ({v_count} regions, {l_count} bands)"
        )
    feats = np.zeros((v_count * l_count, config.dim))
    for li in range(l_count):
        for v in range(v_count):
            feats[li * v_count + v, v] = 1.0
    if config.scheme == SCHEME_ONE_HOT_STRENGTH:
        strength = np.zeros((l_count, v_count))
        for li, layer in enumerate(graph.layers):
            for (u, v), w in layer.weights.items():
                strength[li, u] += w
                if u != v:
                    strength[li, v] += w
        lo, hi = strength.min(), strength.max()
        norm = (strength - lo) / (hi - lo) if hi > lo else np.zeros_like(strength)
        for li in range(l_count):
            feats[li * v_count : (li + 1) * v_count, v_count + li] = norm[li]
    return feats


# Per-sample cache of feature matrices and unmasked edge tensors; keyed
# weakly so samples stay garbage-collectable.
_SAMPLE_CACHE: "weakref.WeakKeyDictionary[PatientSample, dict]" = weakref.WeakKeyDictionary()


def _cached(sample: PatientSample, config: NodeFeatureConfig) -> tuple[np.ndarray, GraphTensors]:
    entry = _SAMPLE_CACHE.get(sample)
    if entry is None:
        entry = {"features": {}, "tensors": None}
        _SAMPLE_CACHE[sample] = entry
    feats = entry["features"].get(config)
    if feats is None:
        feats = node_features(sample, config)
        entry["features"][config] = feats
    if entry["tensors"] is None:
        entry["tensors"] = build_graph_tensors(sample.graph)
    return feats, entry["tensors"]


def batch_tensors(
    samples: Sequence[PatientSample], config: NodeFeatureConfig
) -> tuple[np.ndarray, GraphTensors]:
    """Disjoint union of samples: one big graph with per-graph node ids."""
    if not samples:
        raise ModelError("batch_tensors: empty batch")
    feats_list = []
    src_list, dst_list, gid_list = [], [], []
    offset = 0
    for gi, sample in enumerate(samples):
        feats, tensors = _cached(sample, config)
        feats_list.append(feats)
        src_list.append(tensors.src + offset)
        dst_list.append(tensors.dst + offset)
        gid_list.append(np.full(tensors.n_nodes, gi, dtype=np.intp))
        offset += tensors.n_nodes
    return np.concatenate(feats_list), GraphTensors(
        n_nodes=offset,
        src=np.concatenate(src_list),
        dst=np.concatenate(dst_list),
        graph_ids=np.concatenate(gid_list),
        n_graphs=len(samples),
    )


def attention_scores(
    head: GatHeadParams, features: np.ndarray, src: np.ndarray, dst: np.ndarray
) -> np.ndarray:
    """Raw per-directed-edge scores a . leaky_relu(W [x_v || x_u])."""
    feats = ad.constant(features)
    w = ad.constant(head.w_score)
    a = ad.constant(head.a)
    pair = ad.concat_last([ad.gather_rows(feats, dst), ad.gather_rows(feats, src)])
    scores = ad.matmul(ad.leaky_relu(ad.matmul(pair, _transpose(w))), a)
    return scores.value


def attention_normalize(scores: np.ndarray, dst: np.ndarray, n_nodes: int) -> np.ndarray:
    """Softmax-normalize scores over each receiving node's in-edges."""
    dst = np.asarray(dst, dtype=np.intp)
    present = np.zeros(n_nodes, dtype=bool)
    present[dst] = True
    if not present.all():
        missing = int(np.flatnonzero(~present)[0])
        raise ModelError(f"node {missing} has no in-edges (self-loops missing?)")
    return ad.segment_softmax(ad.constant(scores), dst, n_nodes).value


def _transpose(node: ad.Node) -> ad.Node:
    # Weight matrices are stored (out, in); matmul wants (in, out) on the right.
    return ad.Node(node.value.T, "transpose", (node,), (lambda g: g.T,))


def _forward_graph(
    features: np.ndarray,
    tensors: GraphTensors,
    layer_nodes: list[dict[str, ad.Node]],
    readout_w: ad.Node,
    readout_b: ad.Node,
    config: ModelConfig,
    ctx: PredictionContext,
    rng: np.random.Generator | None,
) -> ad.Node:
    """Predictions for every graph in the (possibly batched) tensors.

    Returns a scalar node for a single graph, a (B,) vector otherwise.
    """
    src, dst, n = tensors.src, tensors.dst, tensors.n_nodes
    n_heads, hd = config.heads, config.head_dim
    h: ad.Node = ad.constant(features)
    for li, layer in enumerate(layer_nodes):
        try:
            h = ad.dropout(h, ctx.dropout, ctx.training, rng)
            x_u = ad.gather_rows(h, src)
            pair = ad.concat_last([ad.gather_rows(h, dst), x_u])
            n_edges = pair.shape[0]
            # all heads at once: score matrices are stacked head-major, so
            # column blocks of the product line up with per-head outputs
            z = ad.leaky_relu(ad.matmul(pair, _transpose(layer["w_score"])))
            scores = ad.sum_axis(ad.mul(ad.reshape(z, (n_edges, n_heads, hd)), layer["a"]), 2)
            alpha = ad.segment_softmax(scores, dst, n)
            msgs = ad.reshape(ad.matmul(x_u, _transpose(layer["w_value"])), (n_edges, n_heads, hd))
            weighted = ad.mul(msgs, ad.reshape(alpha, (n_edges, n_heads, 1)))
            agg = ad.segment_sum(weighted, dst, n)
            if li < config.n_layers - 1:
                h = ad.relu(ad.reshape(agg, (n, n_heads * hd)))  # concat heads
            else:
                h = ad.mul(ad.sum_axis(agg, 1), np.float64(1.0 / n_heads))  # average heads
        except ad.AutodiffError as exc:
            raise ModelError(f"forward failed at layer {li}: {exc}") from exc
    if tensors.graph_ids is None:
        pooled = ad.mean_axis0(h)
        return ad.add(ad.dot(pooled, readout_w), ad.reshape(readout_b, ()))
    counts = np.bincount(tensors.graph_ids, minlength=tensors.n_graphs).astype(np.float64)
    sums = ad.segment_sum(h, tensors.graph_ids, tensors.n_graphs)
    pooled = ad.mul(sums, (1.0 / counts)[:, None])
    return ad.add(ad.matmul(pooled, readout_w), readout_b)


def _stacked_from_flat(flat: np.ndarray, config: ModelConfig) -> tuple[list[dict[str, np.ndarray]], np.ndarray, np.ndarray]:
    """Slice the canonical flat vector into head-major stacked per-layer arrays."""
    hd, heads = config.head_dim, config.heads
    layers: list[dict[str, np.ndarray]] = []
    offset = 0
    for layer in range(config.n_layers):
        d_in = config.layer_in_dim(layer)
        w_score = np.empty((heads * hd, 2 * d_in))
        a = np.empty((heads, hd))
        w_value = np.empty((heads * hd, d_in))
        for h in range(heads):
            size = hd * 2 * d_in
            w_score[h * hd : (h + 1) * hd] = flat[offset : offset + size].reshape(hd, 2 * d_in)
            offset += size
            a[h] = flat[offset : offset + hd]
            offset += hd
            size = hd * d_in
            w_value[h * hd : (h + 1) * hd] = flat[offset : offset + size].reshape(hd, d_in)
            offset += size
        layers.append({"w_score": w_score, "a": a, "w_value": w_value})
    readout_w = flat[offset : offset + hd].copy()
    readout_b = flat[offset + hd : offset + hd + 1].copy()
    return layers, readout_w, readout_b


class _TapeParams:
    """Config-only stand-in when a tape is built straight from a flat vector."""

    __slots__ = ("config",)

    def __init__(self, config: ModelConfig):
        self.config = config


class ForwardTape:
    """A forward pass with live parameter leaves, ready for backward().

    ``flat_gradient`` returns the gradient in canonical flat order, which
    is what the optimizers and the federation layer consume.
    """

    def __init__(self, params: ModelParameters | None, _direct=None):
        if _direct is not None:
            self.params, stacked, readout_w, readout_b = _direct
        else:
            stacked, readout_w, readout_b = _stacked_from_flat(params.flatten(), params.config)
            self.params = params
        self.layers = [
            {name: ad.leaf(arr, name) for name, arr in layer.items()} for layer in stacked
        ]
        self.readout_w = ad.leaf(readout_w, "readout_w")
        self.readout_b = ad.leaf(readout_b, "readout_b")
        self.order: list[ad.Node] = []
        for layer in self.layers:
            self.order.extend((layer["w_score"], layer["a"], layer["w_value"]))
        self.order.extend((self.readout_w, self.readout_b))

    @classmethod
    def from_flat(cls, flat: np.ndarray, config: ModelConfig) -> "ForwardTape":
        """Build directly from the canonical flat vector (hot training path)."""
        expected = flat_length(config)
        if flat.size != expected:
            raise ModelError(f"flat vector has {flat.size} entries, model needs {expected}")
        stacked, readout_w, readout_b = _stacked_from_flat(np.asarray(flat, dtype=np.float64), config)
        shell = _TapeParams(config)
        return cls(None, _direct=(shell, stacked, readout_w, readout_b))

    def predict(
        self,
        sample: PatientSample,
        ctx: PredictionContext,
        rng: np.random.Generator | None = None,
        masked_edges: frozenset[EdgeKey] | None = None,
    ) -> ad.Node:
        config = self.params.config
        if masked_edges is None:
            feats, tensors = _cached(sample, config.features)
        else:
            # masking prunes message passing only; features keep describing
            # the full graph so subsets are compared on equal footing
            feats = node_features(sample, config.features)
            tensors = build_graph_tensors(sample.graph, masked_edges)
        return self.predict_arrays(feats, tensors, ctx, rng)

    def predict_arrays(
        self,
        features: np.ndarray,
        tensors: GraphTensors,
        ctx: PredictionContext = EVAL_CONTEXT,
        rng: np.random.Generator | None = None,
    ) -> ad.Node:
        return _forward_graph(
            features, tensors, self.layers, self.readout_w, self.readout_b,
            self.params.config, ctx, rng,
        )

    def predict_batch(
        self,
        samples: Sequence[PatientSample],
        ctx: PredictionContext = EVAL_CONTEXT,
        rng: np.random.Generator | None = None,
    ) -> ad.Node:
        """(B,) predictions for a batch run as one disjoint-union graph."""
        feats, tensors = batch_tensors(samples, self.params.config.features)
        return self.predict_arrays(feats, tensors, ctx, rng)

    def flat_gradient(self, loss: ad.Node) -> np.ndarray:
        grads = ad.backward(loss, wrt=self.order)
        config = self.params.config
        hd = config.head_dim
        chunks: list[np.ndarray] = []
        for layer in self.layers:
            g_score = grads[layer["w_score"]]
            g_a = grads[layer["a"]]
            g_value = grads[layer["w_value"]]
            for h in range(config.heads):
                chunks.append(g_score[h * hd : (h + 1) * hd].ravel())
                chunks.append(g_a[h].ravel())
                chunks.append(g_value[h * hd : (h + 1) * hd].ravel())
        chunks.append(grads[self.readout_w].ravel())
        chunks.append(grads[self.readout_b].ravel())
        return np.concatenate(chunks)


def forward(
    sample: PatientSample,
    params: ModelParameters,
    ctx: PredictionContext = EVAL_CONTEXT,
    rng: np.random.Generator | None = None,
    masked_edges: frozenset[EdgeKey] | None = None,
) -> float:
    """Scalar prediction for one sample (a fresh tape each call)."""
    if ctx.training and rng is None:
        if ctx.seed is None:
            raise ModelError("train-mode forward needs an RNG or a seeded context")
        rng = np.random.default_rng(ctx.seed)
    node = ForwardTape(params).predict(sample, ctx, rng, masked_edges)
    return float(node.value)


def predict_nihss(
    sample: PatientSample, params: ModelParameters, clamp: bool = False
) -> float:
    """Eval-mode prediction; optionally clamped to the reportable [1, 42] range.

    The raw value feeds losses and Shapley attribution; clamping is for
    reporting only.
    """
    raw = forward(sample, params, EVAL_CONTEXT)
    if clamp:
        return float(min(max(raw, 1.0), 42.0))
    return raw
