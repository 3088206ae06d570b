"""Edge-centric attribution: Shapley values, centrality, model similarity.

An edge's value is its average marginal contribution to the prediction
over subsets of the other edges. Small instances are enumerated exactly
with the combinatorial weights; larger ones use a seeded Monte-Carlo
estimator whose conditioning subsets are drawn size-uniformly (a size m
uniform on {0..n-1}, then a uniform subset of that size), which makes
every estimate exactly unbiased for the enumerated value regardless of
how edges interact. Self-loops and inter-layer replica edges are
construction artifacts and stay present in every evaluated subset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import atomic_write_text
from .graphs import PatientSample
from .model import (
    EdgeKey,
    ForwardTape,
    ModelParameters,
    build_graph_tensors,
    explained_edges,
    node_features,
)

EXACT_EDGE_LIMIT = 20
DEFAULT_MC_SAMPLES = 100


class ExplainError(ValueError):
    pass


class EdgeValueFunction:
    """f(S): eval-mode prediction with only the explained edges in S kept.

    Subset values are memoized by bitmask, so repeated Monte-Carlo draws
    and exact enumeration share evaluations. Node features are computed
    once from the full graph; masking prunes message passing only.
    """

    def __init__(self, params: ModelParameters, sample: PatientSample, cache: bool = True):
        self.params = params
        self.sample = sample
        self.edges: list[EdgeKey] = explained_edges(sample.graph)
        self._tape = ForwardTape(params)
        self._features = node_features(sample, params.config.features)
        self._cache: dict[int, float] | None = {} if cache else None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def subset_mask(self, edge_indices) -> int:
        mask = 0
        for i in edge_indices:
            mask |= 1 << int(i)
        return mask

    def value(self, subset_mask: int) -> float:
        if self._cache is not None:
            hit = self._cache.get(subset_mask)
            if hit is not None:
                return hit
        dropped = frozenset(
            edge for i, edge in enumerate(self.edges) if not subset_mask & (1 << i)
        )
        tensors = build_graph_tensors(self.sample.graph, masked_edges=dropped)
        out = float(self._tape.predict_arrays(self._features, tensors).value)
        if self._cache is not None:
            self._cache[subset_mask] = out
        return out

    def full_value(self) -> float:
        return self.value((1 << self.n_edges) - 1)

    def empty_value(self) -> float:
        return self.value(0)


class CallableValueFunction:
    """Synthetic value function over edge subsets (tests, oracles)."""

    def __init__(self, n_edges: int, fn, cache: bool = True):
        self.n_edges = n_edges
        self._fn = fn
        self._cache: dict[int, float] | None = {} if cache else None

    def subset_mask(self, edge_indices) -> int:
        mask = 0
        for i in edge_indices:
            mask |= 1 << int(i)
        return mask

    def value(self, subset_mask: int) -> float:
        if self._cache is not None and subset_mask in self._cache:
            return self._cache[subset_mask]
        out = float(self._fn(subset_mask))
        if self._cache is not None:
            self._cache[subset_mask] = out
        return out

    def full_value(self) -> float:
        return self.value((1 << self.n_edges) - 1)

    def empty_value(self) -> float:
        return self.value(0)


def exact_shapley(vf) -> np.ndarray:
    """Full enumeration of Eq.-style combinatorial weights.

    phi(e) = (1/n) * sum over S not containing e of
             (f(S u {e}) - f(S)) / C(n-1, |S|).
    """
    n = vf.n_edges
    if n > EXACT_EDGE_LIMIT:
        raise ExplainError(
            f"{n} edges exceeds the exact-enumeration guard ({EXACT_EDGE_LIMIT}); "
            "use mc_shapley instead"
        )
    if n == 0:
        return np.zeros(0)
    phi = np.zeros(n)
    binom = [math.comb(n - 1, k) for k in range(n)]
    full = 1 << n
    for edge in range(n):
        bit = 1 << edge
        acc = 0.0
        for subset in range(full):
            if subset & bit:
                continue
            size = bin(subset).count("1")
            marginal = vf.value(subset | bit) - vf.value(subset)
            acc += marginal / binom[size]
        phi[edge] = acc / n
    return phi


def mc_shapley(vf, m_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> np.ndarray:
    """Monte-Carlo estimate: mean marginal over sampled subsets.

    Each conditioning subset S_k of the other edges is drawn by picking
    a size uniformly from {0..n-1} and then a uniform subset of that
    size, matching the enumeration weights, so every draw's marginal is
    an unbiased sample of the exact value. The per-edge RNG stream is
    seeded by (seed, edge index), so edges can be estimated in any order
    or in parallel with identical results.
    """
    if m_samples < 1:
        raise ExplainError(f"need at least one Monte-Carlo sample, got {m_samples}")
    n = vf.n_edges
    phi = np.zeros(n)
    for edge in range(n):
        bit = 1 << edge
        rng = np.random.default_rng([seed, edge])
        others = [1 << j for j in range(n) if j != edge]
        total = 0.0
        for _ in range(m_samples):
            size = int(rng.integers(0, n)) if n > 1 else 0
            subset = 0
            if size:
                for j in rng.choice(n - 1, size=size, replace=False):
                    subset |= others[j]
            total += vf.value(subset | bit) - vf.value(subset)
        phi[edge] = total / m_samples
    return phi


def node_centrality(phi: np.ndarray, edges: list[EdgeKey]) -> dict[tuple[int, int], float]:
    """Mean absolute attribution per incident edge, per (layer, vertex) node.

    Nodes touched by no explained edge get centrality 0.
    """
    if len(phi) != len(edges):
        raise ExplainError(f"{len(phi)} attributions for {len(edges)} edges")
    mass: dict[tuple[int, int], float] = {}
    degree: dict[tuple[int, int], int] = {}
    for value, (layer, (u, v)) in zip(phi, edges):
        for vertex in (u, v):
            key = (layer, vertex)
            mass[key] = mass.get(key, 0.0) + abs(float(value))
            degree[key] = degree.get(key, 0) + 1
    return {key: mass[key] / degree[key] for key in sorted(mass)}


@dataclass
class ShapleyReport:
    """Per-edge attributions with estimator metadata and diagnostics."""

    edges: list[EdgeKey]
    phi: np.ndarray
    method: str  # "exact" | "mc"
    m_samples: int
    seed: int
    centrality: dict[tuple[int, int], float]
    efficiency_residual: float
    full_value: float
    empty_value: float
    provenance: dict[EdgeKey, str] = field(default_factory=dict)
    weights: dict[EdgeKey, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "m_samples": self.m_samples,
            "seed": self.seed,
            "full_value": self.full_value,
            "empty_value": self.empty_value,
            "efficiency_residual": self.efficiency_residual,
            "edges": [
                {
                    "layer": layer,
                    "u": u,
                    "v": v,
                    "phi": float(p),
                    "provenance": self.provenance.get((layer, (u, v))),
                    "weight": self.weights.get((layer, (u, v))),
                }
                for (layer, (u, v)), p in zip(self.edges, self.phi)
            ],
            "nodes": [
                {"layer": layer, "vertex": vertex, "centrality": c}
                for (layer, vertex), c in self.centrality.items()
            ],
        }

    def write(self, json_path: Path, csv_path: Path | None = None) -> None:
        atomic_write_text(Path(json_path), json.dumps(self.to_json_dict(), indent=2) + "\n")
        if csv_path is not None:
            rows = [["layer", "u", "v", "phi", "provenance", "weight"]]
            for (layer, (u, v)), p in zip(self.edges, self.phi):
                rows.append(
                    [
                        layer,
                        u,
                        v,
                        repr(float(p)),
                        self.provenance.get((layer, (u, v)), ""),
                        self.weights.get((layer, (u, v)), ""),
                    ]
                )
            out = []
            for row in rows:
                out.append(",".join(str(x) for x in row))
            atomic_write_text(Path(csv_path), "\n".join(out) + "\n")


def explain_sample(
    params: ModelParameters,
    sample: PatientSample,
    m_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    method: str = "auto",
) -> ShapleyReport:
    """Attribute one prediction; exact when the edge count permits."""
    vf = EdgeValueFunction(params, sample)
    if method == "auto":
        method = "exact" if vf.n_edges <= EXACT_EDGE_LIMIT else "mc"
    if method == "exact":
        phi = exact_shapley(vf)
    elif method == "mc":
        phi = mc_shapley(vf, m_samples=m_samples, seed=seed)
    else:
        raise ExplainError(f"unknown method {method!r}")
    full, empty = vf.full_value(), vf.empty_value()
    residual = abs(float(phi.sum()) - (full - empty))
    provenance = {}
    weights = {}
    for layer_index, layer in enumerate(sample.graph.layers):
        for e, tag in layer.provenance.items():
            if e[0] != e[1]:
                provenance[(layer_index, e)] = tag
                weights[(layer_index, e)] = layer.weights[e]
    return ShapleyReport(
        edges=vf.edges,
        phi=phi,
        method=method,
        m_samples=m_samples if method == "mc" else 0,
        seed=seed,
        centrality=node_centrality(phi, vf.edges),
        efficiency_residual=residual,
        full_value=full,
        empty_value=empty,
        provenance=provenance,
        weights=weights,
    )


# ---------------------------------------------------------------------------
# weight-vector similarity
# ---------------------------------------------------------------------------

def model_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Bounded similarity 1 - |u - v| / (|u| + |v|), in [0, 1].

    Equal vectors score 1, opposite vectors 0; two zero vectors are
    treated as identical.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ExplainError(f"similarity needs equal lengths, got {u.shape} vs {v.shape}")
    norm_sum = float(np.linalg.norm(u) + np.linalg.norm(v))
    if norm_sum == 0.0:
        return 1.0
    return 1.0 - float(np.linalg.norm(u - v)) / norm_sum


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray
    groups: dict[str, str] = field(default_factory=dict)

    @property
    def overall_mean(self) -> float:
        n = len(self.labels)
        off = [self.values[i, j] for i in range(n) for j in range(n) if i < j]
        return float(np.mean(off)) if off else 1.0

    def subgroup_means(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for group in sorted(set(self.groups.values())):
            members = [i for i, lab in enumerate(self.labels) if self.groups.get(lab) == group]
            pairs = [
                self.values[i, j] for i in members for j in members if i < j
            ]
            if pairs:
                out[group] = float(np.mean(pairs))
        return out

    def to_json_dict(self) -> dict:
        return {
            "labels": self.labels,
            "matrix": self.values.tolist(),
            "overall_mean": self.overall_mean,
            "subgroup_means": self.subgroup_means(),
            "groups": self.groups,
        }

    def write(self, json_path: Path, csv_path: Path | None = None) -> None:
        atomic_write_text(Path(json_path), json.dumps(self.to_json_dict(), indent=2) + "\n")
        if csv_path is not None:
            lines = ["," + ",".join(self.labels)]
            for i, label in enumerate(self.labels):
                lines.append(label + "," + ",".join(repr(float(x)) for x in self.values[i]))
            atomic_write_text(Path(csv_path), "\n".join(lines) + "\n")


def similarity_matrix(
    models: dict[str, np.ndarray], groups: dict[str, str] | None = None
) -> SimilarityMatrix:
    """Pairwise similarity of labeled flat weight vectors."""
    if len(models) < 2:
        raise ExplainError("similarity_matrix needs at least two models")
    labels = sorted(models)
    n = len(labels)
    values = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = model_similarity(models[labels[i]], models[labels[j]])
            values[i, j] = values[j, i] = s
    return SimilarityMatrix(labels=labels, values=values, groups=dict(groups or {}))
