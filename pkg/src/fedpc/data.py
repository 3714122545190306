"""Synthetic non-IID client federations, double splitting, CSV feature tables.

Client ``k`` riding in vehicle ``v`` draws class-``c`` samples from

    N(vehicle_centroid[v] + driver_offset[k] + class_direction[c], noise_sigma^2 I)

Vehicle centroids sit on a regular simplex (pairwise distance
``cluster_separation``) so vehicles form well-separated groups; driver offsets
are isotropic with expected norm close to ``driver_dispersion``; class
directions are shared by every client.

All randomness comes from the keyed PCG64 streams in ``fedpc.rng``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .rng import CLIENT_SPLIT, DATA, SAMPLE_SPLIT, make_rng

TEST_FRACTION_DENOMINATOR = 5  # 0.8 / 0.2


def holdout_count(n: int) -> int:
    """Size of the 0.2 side of a 0.8/0.2 split: floor(0.2 n), at least 1."""
    return max(1, n // TEST_FRACTION_DENOMINATOR)


@dataclass(frozen=True)
class FederationConfig:
    num_vehicles: int = 3
    drivers_per_vehicle: int = 4
    classes: int = 4
    feature_dim: int = 16
    samples_per_client_per_class: int = 40
    cluster_separation: float = 10.0
    driver_dispersion: float = 1.0
    noise_sigma: float = 0.5
    class_separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_vehicles", "drivers_per_vehicle", "classes", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.samples_per_client_per_class < 2:
            raise ConfigError("samples_per_client_per_class must be >= 2")
        if self.num_vehicles * self.drivers_per_vehicle < 2:
            raise ConfigError("a federation needs at least 2 clients")
        if not self.cluster_separation > self.driver_dispersion >= 0:
            raise ConfigError("need cluster_separation > driver_dispersion >= 0")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def num_clients(self) -> int:
        return self.num_vehicles * self.drivers_per_vehicle


@dataclass(frozen=True, eq=False)
class ClientSamples:
    """One client's pooled samples before the local train/test split."""

    client_id: int
    vehicle_id: int
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    vehicle_id: int
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    @property
    def n_test(self) -> int:
        return len(self.test_labels)


@dataclass(frozen=True)
class FederationSplit:
    training_clients: tuple[int, ...]
    test_clients: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Federation:
    clients: dict[int, ClientDataset]
    split: FederationSplit
    num_classes: int
    feature_dim: int
    config: FederationConfig | None = field(default=None)

    def training(self) -> list[ClientDataset]:
        return [self.clients[c] for c in self.split.training_clients]

    def testing(self) -> list[ClientDataset]:
        return [self.clients[c] for c in self.split.test_clients]


def _directions(rng: np.random.Generator, count: int, dim: int, length: float) -> np.ndarray:
    """``count`` vectors with pairwise distance ``length`` (exact when count <= dim)."""
    if count <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        basis = q[:, :count].T
    else:
        basis = rng.normal(size=(count, dim))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    return basis * (length / math.sqrt(2.0))


def generate_samples(cfg: FederationConfig) -> list[ClientSamples]:
    rng = make_rng(cfg.seed, DATA)
    d = cfg.feature_dim
    vehicles = _directions(rng, cfg.num_vehicles, d, cfg.cluster_separation)
    classes = _directions(rng, cfg.classes, d, cfg.class_separation)
    labels = np.repeat(np.arange(cfg.classes), cfg.samples_per_client_per_class)

    out = []
    for v in range(cfg.num_vehicles):
        for k in range(cfg.drivers_per_vehicle):
            offset = rng.normal(0.0, cfg.driver_dispersion / math.sqrt(d), size=d)
            means = vehicles[v] + offset + classes[labels]
            x = means + rng.normal(0.0, cfg.noise_sigma, size=means.shape)
            out.append(ClientSamples(v * cfg.drivers_per_vehicle + k, v, x, labels.copy()))
    return out


def split_clients(client_ids: Sequence[int], rng: np.random.Generator) -> FederationSplit:
    ids = sorted(int(c) for c in client_ids)
    if len(ids) < 2:
        raise ConfigError(f"need at least 2 clients to split, got {len(ids)}")
    n_test = holdout_count(len(ids))
    order = rng.permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return FederationSplit(tuple(train), tuple(test))


def split_samples(labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 0.8/0.2 split of sample indices.

    Indices are shuffled within each class and interleaved class by class;
    the first ``holdout_count(n)`` of the interleaved order become the test set,
    which keeps every class represented in the train side.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split, got {n}")
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    interleaved = []
    for rank in range(max(len(p) for p in per_class)):
        interleaved.extend(int(p[rank]) for p in per_class if rank < len(p))
    n_test = holdout_count(n)
    test = np.sort(np.array(interleaved[:n_test]))
    train = np.sort(np.array(interleaved[n_test:]))
    return train, test


def double_split(
    clients: Sequence[ClientSamples], seed: int
) -> tuple[list[ClientDataset], FederationSplit]:
    """Client-level 0.8/0.2 partition, then a per-client 0.8/0.2 sample split."""
    if len(clients) < 2:
        raise ConfigError(f"need at least 2 clients to split, got {len(clients)}")
    split = split_clients([c.client_id for c in clients], make_rng(seed, CLIENT_SPLIT))
    datasets = []
    for c in clients:
        tr, te = split_samples(c.labels, make_rng(seed, SAMPLE_SPLIT, c.client_id))
        datasets.append(
            ClientDataset(
                c.client_id, c.vehicle_id,
                c.features[tr], c.labels[tr], c.features[te], c.labels[te],
            )
        )
    return datasets, split


def generate_federation(cfg: FederationConfig) -> Federation:
    datasets, split = double_split(generate_samples(cfg), cfg.seed)
    return Federation(
        {d.client_id: d for d in datasets}, split, cfg.classes, cfg.feature_dim, cfg
    )


def federation_from_datasets(datasets: Sequence[ClientDataset], seed: int) -> Federation:
    """Wrap already-split client datasets with a seeded client-level split."""
    split = split_clients([d.client_id for d in datasets], make_rng(seed, CLIENT_SPLIT))
    labels = np.concatenate([np.concatenate([d.train_labels, d.test_labels]) for d in datasets])
    dim = datasets[0].train_features.shape[1]
    return Federation({d.client_id: d for d in datasets}, split, int(labels.max()) + 1, dim)


def ingest_feature_table(path: str | Path) -> list[ClientDataset]:
    """Read a ``client_id,label,f0..f{d-1}`` CSV into per-client datasets.

    Each client's last ``holdout_count(n)`` rows, in file order, form its test
    split.  ``export_feature_table`` writes train rows before test rows, so a
    round trip reproduces the split exactly.
    """
    path = Path(path)
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path} is empty", line=1)
        header = [h.strip() for h in header]
        dim = len(header) - 2
        expected = ["client_id", "label"] + [f"f{i}" for i in range(dim)]
        if dim < 1 or header != expected:
            raise ParseError(
                f"unknown header {header!r}; expected client_id,label,f0..f<d-1>", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dim + 2:
                raise ParseError(f"expected {dim + 2} fields, found {len(row)}", line=lineno)
            try:
                client, label = int(row[0]), int(row[1])
            except ValueError:
                raise ParseError("client_id and label must be integers", line=lineno) from None
            if label < 0:
                raise ParseError(f"negative label {label}", line=lineno)
            try:
                feats = [float(cell) for cell in row[2:]]
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno) from None
            if not all(math.isfinite(f) for f in feats):
                raise ParseError("non-finite feature value", line=lineno)
            rows.setdefault(client, []).append((label, feats))
    if not rows:
        raise ParseError(f"{path} has no data rows", line=2)

    out = []
    for client in sorted(rows):
        samples = rows[client]
        if len(samples) < 2:
            raise ParseError(f"client {client} has fewer than 2 rows")
        y = np.array([s[0] for s in samples], dtype=np.int64)
        x = np.array([s[1] for s in samples], dtype=np.float64)
        cut = len(samples) - holdout_count(len(samples))
        out.append(ClientDataset(client, 0, x[:cut], y[:cut], x[cut:], y[cut:]))
    return out


def export_feature_table(datasets: Sequence[ClientDataset], path: str | Path) -> None:
    path = Path(path)
    dim = datasets[0].train_features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "label"] + [f"f{i}" for i in range(dim)])
        for d in datasets:
            for x, y in ((d.train_features, d.train_labels), (d.test_features, d.test_labels)):
                for feats, label in zip(x, y):
                    w.writerow([d.client_id, int(label)] + [repr(float(f)) for f in feats])
