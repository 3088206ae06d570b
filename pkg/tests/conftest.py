import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from fgfl import wire
from fgfl.graphs import (
    ConnectivityMatrix,
    RegionAtlas,
    assemble_multilayer,
    build_sample,
    rewire_layer,
)
from fgfl.model import ModelConfig, NodeFeatureConfig, init_parameters


def random_atlas(n: int, seed: int) -> RegionAtlas:
    rng = np.random.default_rng(seed)
    return RegionAtlas(ids=tuple(range(n)), coords=rng.normal(size=(n, 3)))


def random_connectivity(n: int, seed: int, band: str = "alpha1") -> ConnectivityMatrix:
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.0, 1.0, size=(n, n))
    sym = (raw + raw.T) / 2.0
    np.fill_diagonal(sym, 0.0)
    return ConnectivityMatrix(band=band, values=sym)


def toy_sample(seed: int = 0, v: int = 5, n_layers: int = 2, label: int = 2, percentile: float = 60.0):
    """Small multilayer patient sample with a mix of edge provenances."""
    bands = ["alpha1", "alpha2", "beta1", "delta", "theta"][:n_layers]
    atlas = random_atlas(v, seed)
    layers = [
        rewire_layer(random_connectivity(v, seed + 17 * i, band=b), atlas, k=2, percentile=percentile)
        for i, b in enumerate(bands)
    ]
    graph = assemble_multilayer(layers)
    from fgfl.graphs import PatientSample

    return PatientSample(graph=graph, label=label, patient_id=f"p{seed}", hospital_id="h0")


def toy_model_config(sample) -> ModelConfig:
    return ModelConfig(
        features=NodeFeatureConfig(
            n_regions=sample.graph.n_vertices, n_bands=sample.graph.n_layers
        )
    )


@pytest.fixture
def five_node_sample():
    return toy_sample(seed=11, v=5, n_layers=2)


@pytest.fixture
def five_node_model(five_node_sample):
    config = toy_model_config(five_node_sample)
    return config, init_parameters(config, seed=11)


def _random_ident(rng, max_len=12):
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-"
    n = int(rng.integers(1, max_len))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))


def random_federation_message(rng: np.random.Generator) -> wire.FederationMessage:
    """Uniformly messy but well-formed message for round-trip properties."""
    kind = [
        wire.KIND_JOIN,
        wire.KIND_JOIN_ACK,
        wire.KIND_GLOBAL_MODEL,
        wire.KIND_LOCAL_UPDATE,
        wire.KIND_ROUND_ABORT,
        wire.KIND_EXPERIMENT_END,
    ][int(rng.integers(0, 6))]

    def payload():
        n = int(rng.integers(0, 4000))
        control = None
        if rng.random() < 0.5:
            control = rng.normal(size=n).astype(np.float32)
        return wire.ModelPayload(
            scheme_id=_random_ident(rng, 24),
            params=(rng.normal(scale=10.0, size=n) * 10.0 ** rng.integers(-3, 4)).astype(np.float32),
            control=control,
        )

    if kind == wire.KIND_JOIN:
        body = wire.JoinBody(
            scheme_id=_random_ident(rng),
            n_samples=int(rng.integers(0, 10000)),
            nonce=int(rng.integers(0, 2**63)),
        )
    elif kind == wire.KIND_JOIN_ACK:
        body = wire.JoinAckBody(
            client=_random_ident(rng),
            accepted=bool(rng.integers(0, 2)),
            reason=_random_ident(rng, 30),
        )
    elif kind == wire.KIND_GLOBAL_MODEL:
        body = wire.GlobalModelBody(
            payload=payload(),
            algorithm=("fedavg", "scaffold")[int(rng.integers(0, 2))],
            local_lr=float(rng.uniform(0, 1)),
            k_steps=int(rng.integers(0, 1000)),
            participants=tuple(_random_ident(rng) for _ in range(int(rng.integers(0, 6)))),
        )
    elif kind == wire.KIND_LOCAL_UPDATE:
        body = wire.LocalUpdateBody(payload=payload(), n_samples=int(rng.integers(1, 500)))
    elif kind == wire.KIND_ROUND_ABORT:
        body = wire.RoundAbortBody(reason=_random_ident(rng, 40))
    else:
        body = wire.ExperimentEndBody(status=_random_ident(rng), final_round=int(rng.integers(0, 10000)))
    return wire.FederationMessage(
        kind=kind,
        experiment=_random_ident(rng),
        round=int(rng.integers(0, 2**31)),
        sender=_random_ident(rng),
        body=body,
    )
