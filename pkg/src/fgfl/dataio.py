"""Dataset directory format: atlas.json, patients.jsonl, binary matrices.

One directory per cohort:

* ``atlas.json``      -- ``{"regions": [{"id": int, "coord": [x, y, z]}, ...]}``
* ``patients.jsonl``  -- one record per line:
  ``{"id": str, "hospital": str, "label": int, "bands": {band: relative path}}``
* per-band matrix files -- magic ``FGCM``, version u16, V u16, band label
  (u16 length prefix + UTF-8), then V*V float64 little-endian, row-major.
* ``cohort.json``     -- generator provenance manifest (spec + seed).

All writers go through a temp file plus atomic rename, so failures never
leave partial outputs behind.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import ConnectivityMatrix, GraphError, RegionAtlas

MATRIX_MAGIC = b"FGCM"
MATRIX_VERSION = 1


class DatasetError(ValueError):
    pass


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# binary connectivity matrices
# ---------------------------------------------------------------------------

def encode_matrix(band: str, values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DatasetError(f"matrix must be square, got shape {values.shape}")
    n = values.shape[0]
    if n > 0xFFFF:
        raise DatasetError(f"matrix dimension {n} exceeds u16 range")
    label = band.encode("utf-8")
    head = MATRIX_MAGIC + struct.pack("<HHH", MATRIX_VERSION, n, len(label)) + label
    return head + values.astype("<f8").tobytes(order="C")


def decode_matrix(payload: bytes) -> ConnectivityMatrix:
    if len(payload) < 10 or payload[:4] != MATRIX_MAGIC:
        raise DatasetError("not an FGCM matrix file")
    version, n, label_len = struct.unpack_from("<HHH", payload, 4)
    if version != MATRIX_VERSION:
        raise DatasetError(f"unsupported FGCM version {version}")
    offset = 10
    label = payload[offset : offset + label_len].decode("utf-8")
    offset += label_len
    expected = offset + 8 * n * n
    if len(payload) != expected:
        raise DatasetError(f"FGCM payload truncated: {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f8", count=n * n, offset=offset).reshape(n, n)
    return ConnectivityMatrix(band=label, values=values.copy())


def write_matrix(path: Path, band: str, values: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_matrix(band, values))


def read_matrix(path: Path) -> ConnectivityMatrix:
    return decode_matrix(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# atlas and patient records
# ---------------------------------------------------------------------------

def write_atlas(path: Path, atlas: RegionAtlas) -> None:
    obj = {
        "regions": [
            {"id": int(rid), "coord": [float(c) for c in coord]}
            for rid, coord in zip(atlas.ids, atlas.coords)
        ]
    }
    atomic_write_json(Path(path), obj)


def read_atlas(path: Path) -> RegionAtlas:
    obj = json.loads(Path(path).read_text())
    regions = obj.get("regions")
    if not isinstance(regions, list) or not regions:
        raise DatasetError(f"{path}: malformed atlas file")
    ids = tuple(int(r["id"]) for r in regions)
    coords = np.array([r["coord"] for r in regions], dtype=np.float64)
    return RegionAtlas(ids=ids, coords=coords)


@dataclass
class PatientRecord:
    """Raw on-disk patient entry (matrices loaded, graph not yet built)."""

    patient_id: str
    hospital_id: str
    label: int
    matrices: dict[str, ConnectivityMatrix]


@dataclass
class Cohort:
    """A loaded dataset directory."""

    root: Path
    atlas: RegionAtlas
    patients: list[PatientRecord]
    manifest: dict | None = None

    @property
    def bands(self) -> tuple[str, ...]:
        return tuple(self.patients[0].matrices) if self.patients else ()

    def by_hospital(self) -> dict[str, list[PatientRecord]]:
        shards: dict[str, list[PatientRecord]] = {}
        for p in self.patients:
            shards.setdefault(p.hospital_id, []).append(p)
        return shards


def write_patient_index(path: Path, records: list[dict]) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_dataset(root: Path) -> Cohort:
    """Read a cohort directory into memory, validating every matrix."""
    root = Path(root)
    atlas_path = root / "atlas.json"
    index_path = root / "patients.jsonl"
    if not atlas_path.is_file() or not index_path.is_file():
        raise DatasetError(f"{root}: not a dataset directory (missing atlas.json/patients.jsonl)")
    atlas = read_atlas(atlas_path)
    patients: list[PatientRecord] = []
    for line_no, line in enumerate(index_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{index_path}:{line_no}: invalid JSON: {exc}") from exc
        matrices: dict[str, ConnectivityMatrix] = {}
        for band, rel in rec["bands"].items():
            matrix = read_matrix(root / rel)
            if matrix.band != band:
                raise DatasetError(
                    f"{root / rel}: file reports band {matrix.band!r}, index says {band!r}"
                )
            if matrix.n != atlas.count:
                raise DatasetError(f"{root / rel}: matrix size {matrix.n} != atlas size {atlas.count}")
            matrices[band] = matrix
        try:
            patients.append(
                PatientRecord(
                    patient_id=str(rec["id"]),
                    hospital_id=str(rec["hospital"]),
                    label=int(rec["label"]),
                    matrices=matrices,
                )
            )
        except (KeyError, GraphError) as exc:
            raise DatasetError(f"{index_path}:{line_no}: bad patient record: {exc}") from exc
    manifest_path = root / "cohort.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else None
    return Cohort(root=root, atlas=atlas, patients=patients, manifest=manifest)
