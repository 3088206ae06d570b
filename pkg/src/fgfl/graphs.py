"""Multilayer brain-connectivity graphs: rewiring and assembly.

A per-band connectivity matrix is sparsified into a layer graph by
keeping (a) edges to the k spatially nearest regions, (b) edges whose
coherence exceeds a percentile threshold, and (c) self-loops. Layers over
the shared vertex set are then coupled into one multilayer graph through
inter-layer replica edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BAND_ORDER = ("delta", "theta", "alpha1", "alpha2", "beta1")
DEFAULT_BANDS = ("alpha1", "alpha2", "beta1")
DEFAULT_K = 3
DEFAULT_PERCENTILE = 99.0
SELF_LOOP_WEIGHT = 1.0

STRUCTURAL = "structural"
FUNCTIONAL = "functional"
BOTH = "both"
SELF_LOOP = "self-loop"

COUPLING_ADJACENT = "adjacent-replica"
COUPLING_ALL_PAIRS = "all-pairs-replica"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RegionAtlas:
    """Ordered brain regions with 3-D coordinates (consistent units)."""

    ids: tuple[int, ...]
    coords: np.ndarray  # (V, 3)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise GraphError(f"atlas coordinates must be (V, 3), got {coords.shape}")
        if len(self.ids) != coords.shape[0]:
            raise GraphError("atlas ids and coordinates disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise GraphError("atlas region ids must be unique")
        if not np.all(np.isfinite(coords)):
            raise GraphError("atlas coordinates must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def count(self) -> int:
        return len(self.ids)


def default_atlas(n_regions: int = 31) -> RegionAtlas:
    """Deterministic atlas: a Fibonacci lattice on the upper hemisphere.

    Stands in for the 31-region electrode montage; coordinates only need
    to define consistent pairwise distances.
    """
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    pts = []
    for i in range(n_regions):
        z = (i + 0.5) / n_regions  # upper hemisphere only
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = 2.0 * math.pi * ((i / golden) % 1.0)
        pts.append((r * math.cos(phi), r * math.sin(phi), z))
    return RegionAtlas(ids=tuple(range(n_regions)), coords=np.array(pts))


@dataclass(frozen=True)
class ConnectivityMatrix:
    """Symmetric per-band coherence matrix with zero diagonal, values in [0, 1]."""

    band: str
    values: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.values, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GraphError(f"connectivity matrix must be square, got {m.shape}")
        if not np.allclose(m, m.T, atol=1e-9):
            raise GraphError(f"connectivity matrix for band {self.band!r} is not symmetric")
        if np.any(np.abs(np.diag(m)) > 0):
            raise GraphError(f"connectivity matrix for band {self.band!r} has nonzero diagonal")
        if m.min() < 0.0 or m.max() > 1.0:
            raise GraphError(f"connectivity values for band {self.band!r} outside [0, 1]")
        object.__setattr__(self, "values", m)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class LayerGraph:
    """One rewired frequency-band layer: undirected weighted edges plus self-loops."""

    band: str
    n_vertices: int
    weights: dict[tuple[int, int], float] = field(default_factory=dict)
    provenance: dict[tuple[int, int], str] = field(default_factory=dict)
    retention_ratio: float = 0.0

    def edge_set(self, include_self_loops: bool = True) -> frozenset[tuple[int, int]]:
        if include_self_loops:
            return frozenset(self.weights)
        return frozenset(e for e in self.weights if e[0] != e[1])

    def degree(self, v: int, include_self_loops: bool = False) -> int:
        deg = 0
        for (a, b) in self.weights:
            if a == b:
                if include_self_loops and a == v:
                    deg += 1
            elif a == v or b == v:
                deg += 1
        return deg


@dataclass
class MultilayerGraph:
    """Ordered layer graphs over one vertex set, joined by replica edges.

    ``inter_edges`` pairs (vertex, layer-index) endpoints; every entry
    couples replicas of the same vertex in two distinct layers.
    """

    layers: list[LayerGraph]
    inter_edges: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    inter_weight: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise GraphError("multilayer graph needs at least one layer")
        counts = {lg.n_vertices for lg in self.layers}
        if len(counts) != 1:
            raise GraphError(f"layers must share one vertex set, got counts {sorted(counts)}")
        for (v, li), (u, lj) in self.inter_edges:
            if v != u or li == lj:
                raise GraphError("inter-layer edges must join replicas of one vertex in distinct layers")

    @property
    def n_vertices(self) -> int:
        return self.layers[0].n_vertices

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_replicas(self) -> int:
        return self.n_vertices * self.n_layers

    def replica_index(self, vertex: int, layer: int) -> int:
        return layer * self.n_vertices + vertex


@dataclass(frozen=True, eq=False)
class PatientSample:
    """One multilayer graph with its integer severity label."""

    graph: MultilayerGraph
    label: int
    patient_id: str
    hospital_id: str

    def __post_init__(self):
        if not 1 <= self.label <= 42:
            raise GraphError(f"severity label {self.label} outside [1, 42]")


# ---------------------------------------------------------------------------
# rewiring
# ---------------------------------------------------------------------------

def _ordered(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u <= v else (v, u)


def structural_edges(atlas: RegionAtlas, k: int = DEFAULT_K) -> set[tuple[int, int]]:
    """Undirected union of each vertex's k nearest neighbors.

    Distance ties are broken by ascending region id, so duplicate
    coordinates are handled deterministically. The union over all
    vertices may leave some vertices with degree above k.
    """
    v_count = atlas.count
    if k < 1:
        raise GraphError(f"k must be positive, got {k}")
    if k >= v_count:
        raise GraphError(f"k={k} must be smaller than the number of regions V={v_count}")
    diffs = atlas.coords[:, None, :] - atlas.coords[None, :, :]
    dist = np.sqrt((diffs * diffs).sum(axis=-1))
    edges: set[tuple[int, int]] = set()
    for vi in range(v_count):
        order = sorted((dist[vi, ui], atlas.ids[ui], ui) for ui in range(v_count) if ui != vi)
        for _, _, ui in order[:k]:
            edges.add(_ordered(vi, ui))
    return edges


def functional_edges(conn: ConnectivityMatrix, percentile: float = DEFAULT_PERCENTILE) -> set[tuple[int, int]]:
    """Edges whose coherence strictly exceeds the given percentile.

    The percentile is computed over the V(V-1)/2 upper-triangle values
    with linear interpolation between order statistics; ties at the
    threshold are excluded.
    """
    if not 0.0 < percentile < 100.0:
        raise GraphError(f"percentile must lie in (0, 100), got {percentile}")
    m = conn.values
    iu, ju = np.triu_indices(conn.n, k=1)
    vals = m[iu, ju]
    if vals.size == 0:
        return set()
    threshold = float(np.percentile(vals, percentile, method="linear"))
    keep = vals > threshold
    return {(int(a), int(b)) for a, b in zip(iu[keep], ju[keep])}


def rewire_layer(
    conn: ConnectivityMatrix,
    atlas: RegionAtlas,
    k: int = DEFAULT_K,
    percentile: float = DEFAULT_PERCENTILE,
) -> LayerGraph:
    """Sparsify one band: structural union functional union self-loops.

    Edge weights are carried from the connectivity matrix (self-loops get
    weight 1.0); provenance records which rule admitted each edge. The
    retention ratio counts non-self-loop edges against V(V-1)/2.
    """
    if conn.n != atlas.count:
        raise GraphError(f"connectivity size {conn.n} does not match atlas size {atlas.count}")
    struct = structural_edges(atlas, k)
    func = functional_edges(conn, percentile)
    layer = LayerGraph(band=conn.band, n_vertices=atlas.count)
    for edge in struct | func:
        u, v = edge
        if edge in struct and edge in func:
            tag = BOTH
        elif edge in struct:
            tag = STRUCTURAL
        else:
            tag = FUNCTIONAL
        layer.weights[edge] = float(conn.values[u, v])
        layer.provenance[edge] = tag
    for v in range(atlas.count):
        layer.weights[(v, v)] = SELF_LOOP_WEIGHT
        layer.provenance[(v, v)] = SELF_LOOP
    candidates = atlas.count * (atlas.count - 1) // 2
    layer.retention_ratio = len(struct | func) / candidates if candidates else 0.0
    return layer


def assemble_multilayer(
    layers: list[LayerGraph],
    coupling: str = COUPLING_ADJACENT,
    inter_weight: float = 1.0,
) -> MultilayerGraph:
    """Join layer graphs with inter-layer replica edges per the coupling policy."""
    if not layers:
        raise GraphError("assemble_multilayer: need at least one layer")
    counts = {lg.n_vertices for lg in layers}
    if len(counts) != 1:
        raise GraphError(f"assemble_multilayer: inconsistent vertex counts {sorted(counts)}")
    n = layers[0].n_vertices
    inter: list[tuple[tuple[int, int], tuple[int, int]]] = []
    if coupling == COUPLING_ADJACENT:
        for li in range(len(layers) - 1):
            inter.extend(((v, li), (v, li + 1)) for v in range(n))
    elif coupling == COUPLING_ALL_PAIRS:
        for li in range(len(layers)):
            for lj in range(li + 1, len(layers)):
                inter.extend(((v, li), (v, lj)) for v in range(n))
    else:
        raise GraphError(f"unknown inter-layer coupling policy {coupling!r}")
    return MultilayerGraph(layers=list(layers), inter_edges=inter, inter_weight=inter_weight)


def build_sample(
    atlas: RegionAtlas,
    matrices: dict[str, ConnectivityMatrix],
    label: int,
    patient_id: str,
    hospital_id: str,
    bands: tuple[str, ...] | None = None,
    k: int = DEFAULT_K,
    percentile: float = DEFAULT_PERCENTILE,
    coupling: str = COUPLING_ADJACENT,
) -> PatientSample:
    """Rewire each requested band and assemble the patient's multilayer graph.

    Layers are ordered by canonical band frequency; bands default to all
    bands present in the record.
    """
    if bands is None:
        bands = tuple(b for b in BAND_ORDER if b in matrices)
        extra = tuple(b for b in matrices if b not in BAND_ORDER)
        bands = bands + extra
    missing = [b for b in bands if b not in matrices]
    if missing:
        raise GraphError(f"patient {patient_id!r} lacks matrices for bands {missing}")
    layers = [rewire_layer(matrices[b], atlas, k=k, percentile=percentile) for b in bands]
    graph = assemble_multilayer(layers, coupling=coupling)
    return PatientSample(graph=graph, label=label, patient_id=patient_id, hospital_id=hospital_id)
