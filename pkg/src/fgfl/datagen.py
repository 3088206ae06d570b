"""Synthetic EEG-like connectivity cohorts with controllable heterogeneity.

Each patient gets a latent severity u in [0, 1] that drives per-band
coherence levels: band base levels trend up or down with u (trends drawn
once per cohort), on top of distance-decaying spatial structure plus
low-rank community noise. The label comes from a planted generative map,
an affine function of per-band top-k mean coherence calibrated from seed
probes so its output tracks 1 + 41u, plus Gaussian noise (sigma 2.5,
roughly the human-expert error regime) and rounding.

The heterogeneity knob h in [0, 1] interpolates each hospital shard
between a stratified sample of the global severity distribution (h = 0)
and its own disjoint slice of [1, 42] (h = 1); the planted map's clamp
window narrows to the shard's slice as h grows, so h = 1 shards occupy
disjoint label quartiles by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Cohort, PatientRecord, atomic_write_json, load_dataset, write_atlas, write_matrix, write_patient_index
from .graphs import ConnectivityMatrix, DEFAULT_BANDS, RegionAtlas, default_atlas

DEFAULT_PROPORTIONS = (0.35, 0.30, 0.20, 0.15)
LABEL_LO, LABEL_HI = 1, 42


class DatagenError(ValueError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 72
    proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    seed: int = 0
    heterogeneity: float = 0.0  # 0 = IID-like shards, 1 = disjoint label ranges
    bands: tuple[str, ...] = DEFAULT_BANDS
    n_regions: int = 31
    label_noise_sigma: float = 2.5

    def __post_init__(self):
        if self.n_patients < len(self.proportions):
            raise DatagenError("need at least one patient per hospital shard")
        if not self.proportions or any(p <= 0 for p in self.proportions):
            raise DatagenError(f"shard proportions must be positive, got {self.proportions}")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise DatagenError(f"shard proportions must sum to 1, got {sum(self.proportions)}")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise DatagenError("heterogeneity must lie in [0, 1]")

    def shard_sizes(self) -> tuple[int, ...]:
        """Largest-remainder apportionment of patients to hospitals."""
        raw = [p * self.n_patients for p in self.proportions]
        sizes = [math.floor(r) for r in raw]
        remainders = sorted(range(len(raw)), key=lambda i: (raw[i] - sizes[i], -i), reverse=True)
        for i in remainders[: self.n_patients - sum(sizes)]:
            sizes[i] += 1
        if any(s == 0 for s in sizes):
            raise DatagenError(f"a shard came out empty with sizes {sizes}")
        return tuple(sizes)

    def hospital_ids(self) -> tuple[str, ...]:
        return tuple(f"hosp-{chr(ord('a') + i)}" for i in range(len(self.proportions)))

    def to_json_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "proportions": list(self.proportions),
            "seed": self.seed,
            "heterogeneity": self.heterogeneity,
            "bands": list(self.bands),
            "n_regions": self.n_regions,
            "label_noise_sigma": self.label_noise_sigma,
        }


@dataclass(frozen=True)
class PlantedModel:
    """Hidden affine map from per-band top-k coherence to the label."""

    beta0: float
    betas: dict[str, float]
    topk_fraction: float = 0.05
    noise_sigma: float = 2.5

    def topk_mean(self, values: np.ndarray) -> float:
        n = values.shape[0]
        iu, ju = np.triu_indices(n, k=1)
        flat = values[iu, ju]
        k = max(1, round(self.topk_fraction * flat.size))
        top = np.sort(flat)[-k:]
        return float(top.mean())

    def score(self, matrices: dict[str, np.ndarray]) -> float:
        return self.beta0 + sum(
            beta * self.topk_mean(matrices[band]) for band, beta in self.betas.items()
        )

    def label(
        self, matrices: dict[str, np.ndarray], rng: np.random.Generator,
        lo: int = LABEL_LO, hi: int = LABEL_HI,
    ) -> int:
        noisy = self.score(matrices) + rng.normal(0.0, self.noise_sigma)
        return int(min(max(round(noisy), lo), hi))

    def to_json_dict(self) -> dict:
        return {
            "beta0": self.beta0,
            "betas": self.betas,
            "topk_fraction": self.topk_fraction,
            "noise_sigma": self.noise_sigma,
        }


# ---------------------------------------------------------------------------
# matrix synthesis
# ---------------------------------------------------------------------------

def _band_trends(bands: tuple[str, ...], rng: np.random.Generator) -> dict[str, float]:
    """Per-band severity trends, alternating sign, magnitude in [0.35, 1]."""
    magnitudes = rng.uniform(0.35, 1.0, size=len(bands))
    signs = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(len(bands))])
    return {b: float(m * s) for b, m, s in zip(bands, magnitudes, signs)}


def _band_matrix(
    u: float,
    trend: float,
    decay: np.ndarray,
    rng: np.random.Generator,
    community_rank: int = 3,
) -> np.ndarray:
    n = decay.shape[0]
    base = 0.42 + 0.32 * trend * (u - 0.5)  # in [0.26, 0.58] for |trend| <= 1
    z = rng.normal(size=(n, community_rank))
    community = 0.06 * (z @ z.T) / community_rank
    jitter = rng.normal(scale=0.015, size=(n, n))
    m = base * decay + community + jitter
    m = np.triu(m, k=1)
    m = m + m.T
    np.clip(m, 0.0, 1.0, out=m)
    np.fill_diagonal(m, 0.0)
    return m


def _distance_decay(atlas: RegionAtlas) -> np.ndarray:
    diffs = atlas.coords[:, None, :] - atlas.coords[None, :, :]
    dist = np.sqrt((diffs * diffs).sum(axis=-1))
    scale = np.median(dist[dist > 0])
    return np.exp(-dist / scale)


def _calibrate_planted(
    spec: CohortSpec,
    atlas: RegionAtlas,
    trends: dict[str, float],
    rng: np.random.Generator,
    probes: int = 8,
) -> PlantedModel:
    """Probe the generator at low/high severity and fit the affine map."""
    decay = _distance_decay(atlas)
    planted_probe = PlantedModel(beta0=0.0, betas={b: 0.0 for b in spec.bands})
    stats = {}
    for u in (0.15, 0.85):
        per_band = {b: [] for b in spec.bands}
        for _ in range(probes):
            for band in spec.bands:
                m = _band_matrix(u, trends[band], decay, rng)
                per_band[band].append(planted_probe.topk_mean(m))
        stats[u] = {b: float(np.mean(v)) for b, v in per_band.items()}
    weights = rng.uniform(0.5, 1.5, size=len(spec.bands))
    weights *= len(spec.bands) / weights.sum()
    betas: dict[str, float] = {}
    intercept_sum = 0.0
    for band, w in zip(spec.bands, weights):
        slope = (stats[0.85][band] - stats[0.15][band]) / 0.7
        if abs(slope) < 1e-6:
            raise DatagenError(f"band {band} slope degenerate; generator misconfigured")
        beta = (LABEL_HI - LABEL_LO) * w / (len(spec.bands) * slope)
        betas[band] = float(beta)
        intercept = stats[0.15][band] - slope * 0.15
        intercept_sum += beta * intercept
    beta0 = LABEL_LO - intercept_sum
    return PlantedModel(beta0=float(beta0), betas=betas, noise_sigma=spec.label_noise_sigma)


# ---------------------------------------------------------------------------
# severity targets and shard windows
# ---------------------------------------------------------------------------

def _shard_ranges(n_shards: int) -> list[tuple[int, int]]:
    """Contiguous partition of [1, 42] into n_shards label slices."""
    bounds = [LABEL_LO + round((LABEL_HI - LABEL_LO + 1) * s / n_shards) for s in range(n_shards + 1)]
    return [(bounds[s], bounds[s + 1] - 1) for s in range(n_shards)]


def _severity_targets(
    spec: CohortSpec, sizes: tuple[int, ...], rng: np.random.Generator
) -> list[list[float]]:
    """Per-shard latent severities u in [0, 1].

    Stratified quantile grids keep every shard representative at h = 0;
    as h grows each shard's grid is pulled into its own label slice.
    """
    h = spec.heterogeneity
    ranges = _shard_ranges(len(sizes))
    out: list[list[float]] = []
    for shard, size in enumerate(sizes):
        lo, hi = ranges[shard]
        u_lo = (lo - LABEL_LO) / (LABEL_HI - LABEL_LO)
        u_hi = (hi - LABEL_LO) / (LABEL_HI - LABEL_LO)
        targets = []
        for j in range(size):
            q = (j + rng.uniform(0.1, 0.9)) / size
            global_u = q
            shard_u = u_lo + q * (u_hi - u_lo)
            targets.append(float((1.0 - h) * global_u + h * shard_u))
        rng.shuffle(targets)
        out.append(targets)
    return out


def _clamp_window(shard: int, n_shards: int, h: float) -> tuple[int, int]:
    lo, hi = _shard_ranges(n_shards)[shard]
    lo_h = round((1.0 - h) * LABEL_LO + h * lo)
    hi_h = round((1.0 - h) * LABEL_HI + h * hi)
    return int(lo_h), int(hi_h)


# ---------------------------------------------------------------------------
# generation entry points
# ---------------------------------------------------------------------------

def generate_cohort(spec: CohortSpec, out_dir: Path) -> Cohort:
    """Write a dataset directory for the spec and load it back.

    Regeneration from the same (spec, seed) is byte-identical; the
    planted map and band trends are recorded in cohort.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(spec.seed)
    atlas = default_atlas(spec.n_regions)
    trends = _band_trends(spec.bands, master)
    planted = _calibrate_planted(spec, atlas, trends, master)
    decay = _distance_decay(atlas)
    sizes = spec.shard_sizes()
    hospitals = spec.hospital_ids()
    severities = _severity_targets(spec, sizes, master)

    write_atlas(out / "atlas.json", atlas)
    (out / "matrices").mkdir(exist_ok=True)
    index: list[dict] = []
    patient_no = 0
    for shard, hospital in enumerate(hospitals):
        lo, hi = _clamp_window(shard, len(sizes), spec.heterogeneity)
        for u in severities[shard]:
            pid = f"p{patient_no:03d}"
            patient_rng = np.random.default_rng([spec.seed, patient_no])
            matrices: dict[str, np.ndarray] = {}
            refs: dict[str, str] = {}
            for band in spec.bands:
                m = _band_matrix(u, trends[band], decay, patient_rng)
                matrices[band] = m
                rel = f"matrices/{pid}_{band}.fgcm"
                write_matrix(out / rel, band, m)
                refs[band] = rel
            label = planted.label(matrices, patient_rng, lo=lo, hi=hi)
            index.append({"id": pid, "hospital": hospital, "label": label, "bands": refs})
            patient_no += 1
    write_patient_index(out / "patients.jsonl", index)
    atomic_write_json(
        out / "cohort.json",
        {
            "spec": spec.to_json_dict(),
            "planted_model": planted.to_json_dict(),
            "band_trends": trends,
            "shard_sizes": list(sizes),
            "hospitals": list(hospitals),
        },
    )
    return load_dataset(out)


# ---------------------------------------------------------------------------
# partitioners and the shared held-out test set
# ---------------------------------------------------------------------------

def partition_realistic(records: list[PatientRecord]) -> dict[str, list[PatientRecord]]:
    """Group by hospital id: the natural multi-institution distribution."""
    shards: dict[str, list[PatientRecord]] = {}
    for rec in records:
        shards.setdefault(rec.hospital_id, []).append(rec)
    return dict(sorted(shards.items()))


def partition_idealized(records: list[PatientRecord], n_clients: int = 3) -> dict[str, list[PatientRecord]]:
    """Curated shards: equal sizes (+-1), label-stratified round robin."""
    if n_clients > len(records):
        raise DatagenError(f"cannot split {len(records)} patients into {n_clients} clients")
    ordered = sorted(records, key=lambda r: (r.label, r.patient_id))
    shards: dict[str, list[PatientRecord]] = {
        f"site-{i}": [] for i in range(n_clients)
    }
    keys = list(shards)
    for i, rec in enumerate(ordered):
        shards[keys[i % n_clients]].append(rec)
    return shards


def hold_out_test(
    records: list[PatientRecord], k: int = 11, seed: int = 0
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Label-quartile-stratified test sample shared by every arm."""
    if k >= len(records):
        raise DatagenError(f"test size {k} must be below the population {len(records)}")
    ordered = sorted(records, key=lambda r: (r.label, r.patient_id))
    labels = np.array([r.label for r in ordered], dtype=np.float64)
    qs = np.percentile(labels, [25, 50, 75])
    bins: dict[int, list[PatientRecord]] = {0: [], 1: [], 2: [], 3: []}
    for rec in ordered:
        bins[int(np.searchsorted(qs, rec.label, side="right"))].append(rec)
    rng = np.random.default_rng(seed)
    occupied = [b for b in (0, 1, 2, 3) if bins[b]]
    base, extra = divmod(k, len(occupied))
    test: list[PatientRecord] = []
    for pos, b in enumerate(occupied):
        want = base + (1 if pos < extra else 0)
        want = min(want, len(bins[b]))
        chosen = rng.choice(len(bins[b]), size=want, replace=False)
        test.extend(bins[b][i] for i in sorted(chosen))
    bi = 0
    while len(test) < k:  # top up if a bin ran short
        b = occupied[bi % len(occupied)]
        rest = [r for r in bins[b] if r not in test]
        if rest:
            test.append(rest[int(rng.integers(len(rest)))])
        bi += 1
    test_ids = {r.patient_id for r in test}
    train = [r for r in records if r.patient_id not in test_ids]
    test_in_order = [r for r in records if r.patient_id in test_ids]
    return train, test_in_order
