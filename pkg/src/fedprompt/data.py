"""Deterministic multi-domain, multi-class patch-vector datasets.

Each (class, domain) cell draws samples around a cell mean built from a
class prototype plus a scaled per-domain style transform (orthogonal map
and bias); raising ``domain_strength`` pushes domains apart without
destroying within-domain class structure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, DataError, ParameterError

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class DatasetSpec:
    n_domains: int = 3
    n_classes: int = 5
    samples_per_class_per_domain: int = 40
    domain_strength: float = 1.5
    noise_sigma: float = 0.1
    seed: int = 0
    patch_count: int = 16
    d_v: int = 24

    def validate(self) -> None:
        for name in ("n_domains", "n_classes", "samples_per_class_per_domain",
                     "patch_count", "d_v"):
            if getattr(self, name) < 1:
                raise ConfigError(f"DatasetSpec.{name} must be >= 1")
        if self.domain_strength < 0:
            raise ConfigError("domain_strength must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SampleRecord:
    patches: np.ndarray  # [patch_count, d_v]
    class_id: int
    domain_id: int


@dataclass
class DomainDataset:
    spec: DatasetSpec
    train: list[SampleRecord]
    test: list[SampleRecord]

    def train_for_domain(self, domain_id: int) -> list[SampleRecord]:
        return [s for s in self.train if s.domain_id == domain_id]

    def test_for_domain(self, domain_id: int) -> list[SampleRecord]:
        return [s for s in self.test if s.domain_id == domain_id]


def _orthogonalish(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(0.0, 1.0, (d, d)))
    # Fix the sign convention so the map is fully determined by the draw.
    return q * np.sign(np.diag(r))


def generate_domains(spec: DatasetSpec) -> DomainDataset:
    """Build the train/test pair; the same spec always yields identical bytes."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5D0]))
    p, dv = spec.patch_count, spec.d_v

    prototypes = rng.normal(0.0, 1.0, (spec.n_classes, p, dv))
    styles = []
    for _ in range(spec.n_domains):
        a = _orthogonalish(rng, dv)
        b = rng.normal(0.0, 1.0, (1, dv))
        styles.append((a, b))

    n_cell = spec.samples_per_class_per_domain
    n_train = int(n_cell * TRAIN_FRACTION)
    train: list[SampleRecord] = []
    test: list[SampleRecord] = []
    for domain in range(spec.n_domains):
        a, b = styles[domain]
        for cls in range(spec.n_classes):
            proto = prototypes[cls]
            mean = proto + spec.domain_strength * (proto @ a.T + b)
            noise = rng.normal(0.0, spec.noise_sigma, (n_cell, p, dv))
            order = rng.permutation(n_cell)
            for rank, idx in enumerate(order):
                rec = SampleRecord(patches=mean + noise[idx], class_id=cls, domain_id=domain)
                (train if rank < n_train else test).append(rec)
    return DomainDataset(spec=spec, train=train, test=test)


def few_shot_subset(dataset: DomainDataset, k: int, seed: int = 0) -> DomainDataset:
    """Keep exactly ``k`` seeded training samples per (class, domain) cell."""
    if k < 1:
        raise ParameterError(f"shot count must be >= 1, got {k}")
    spec = dataset.spec
    cells: dict[tuple[int, int], list[int]] = {}
    for i, rec in enumerate(dataset.train):
        cells.setdefault((rec.class_id, rec.domain_id), []).append(i)
    keep: list[int] = []
    for domain in range(spec.n_domains):
        for cls in range(spec.n_classes):
            idxs = cells.get((cls, domain), [])
            if len(idxs) < k:
                raise DataError(
                    f"cell (class={cls}, domain={domain}) has {len(idxs)} samples, needs {k}"
                )
            if len(idxs) == k:
                keep.extend(idxs)
                continue
            rng = np.random.default_rng(np.random.SeedSequence([seed, domain, cls, 0xF5]))
            chosen = rng.choice(len(idxs), size=k, replace=False)
            keep.extend(idxs[int(c)] for c in sorted(chosen))
    keep.sort()
    return DomainDataset(spec=spec, train=[dataset.train[i] for i in keep], test=list(dataset.test))


# ---------------------------------------------------------------------------
# binary dump/load: header + per-record (class_id, domain_id, patches)

_DATA_MAGIC = b"FPDS"
_DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<4sIIIIddqIIII")


def save_dataset(dataset: DomainDataset, fh: BinaryIO) -> None:
    spec = dataset.spec
    fh.write(_DATA_HEADER.pack(
        _DATA_MAGIC, _DATA_VERSION,
        spec.n_domains, spec.n_classes, spec.samples_per_class_per_domain,
        spec.domain_strength, spec.noise_sigma, spec.seed,
        spec.patch_count, spec.d_v,
        len(dataset.train), len(dataset.test),
    ))
    for rec in list(dataset.train) + list(dataset.test):
        fh.write(struct.pack("<II", rec.class_id, rec.domain_id))
        fh.write(np.ascontiguousarray(rec.patches, dtype="<f8").tobytes())


def load_dataset(fh: BinaryIO) -> DomainDataset:
    header = fh.read(_DATA_HEADER.size)
    if len(header) != _DATA_HEADER.size:
        raise ConfigError("dataset file truncated before header end")
    (magic, version, n_domains, n_classes, per_cell, strength, sigma, seed,
     patch_count, d_v, n_train, n_test) = _DATA_HEADER.unpack(header)
    if magic != _DATA_MAGIC:
        raise ConfigError(f"bad magic {magic!r} in dataset file")
    if version != _DATA_VERSION:
        raise ConfigError(f"unsupported dataset file version {version}")
    spec = DatasetSpec(
        n_domains=n_domains, n_classes=n_classes,
        samples_per_class_per_domain=per_cell,
        domain_strength=strength, noise_sigma=sigma, seed=seed,
        patch_count=patch_count, d_v=d_v,
    )
    records: list[SampleRecord] = []
    payload = patch_count * d_v * 8
    for _ in range(n_train + n_test):
        meta = fh.read(8)
        raw = fh.read(payload)
        if len(meta) != 8 or len(raw) != payload:
            raise ConfigError("dataset file truncated inside a record")
        cls, dom = struct.unpack("<II", meta)
        patches = np.frombuffer(raw, dtype="<f8").reshape(patch_count, d_v).copy()
        records.append(SampleRecord(patches=patches, class_id=cls, domain_id=dom))
    if fh.read(1):
        raise ConfigError("trailing bytes after final record")
    return DomainDataset(spec=spec, train=records[:n_train], test=records[n_train:])
