"""
Synthetic labelled records, the held-out split, and the per-silo/per-user
shards the training rounds consume.
"""
import csv
import json
import logging
from pathlib import Path
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .allocation import RecordAllocation, histogram_of
from .errors import DomainError

log = logging.getLogger('Dataset')


@dataclass
class DatasetSpec:
    dim: int = 10
    classes: int = 2
    records: int = 10000
    separation: float = 1.0
    noise: float = 1.0
    non_iid: bool = False
    labels_per_user: int = 2
    test_fraction: float = 0.2

    def problems(self) -> List[str]:
        found = []
        if self.dim < 1:
            found.append('dataset dim must be >= 1')
        if self.classes < 2:
            found.append('dataset classes must be >= 2')
        if self.records < 1:
            found.append('dataset records must be >= 1')
        if self.separation < 0 or self.noise <= 0:
            found.append('separation must be >= 0 and noise > 0')
        if self.labels_per_user < 1:
            found.append('labels_per_user must be >= 1')
        if not 0 < self.test_fraction < 1:
            found.append('test_fraction must be in (0, 1)')
        return found


@dataclass(eq=False)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    allocation: RecordAllocation
    train_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def train_allocation(self) -> RecordAllocation:
        return self.allocation.subset(self.train_index)

    def test_set(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.features[self.test_index], self.labels[self.test_index]


@dataclass(eq=False)
class Shard:
    x: np.ndarray
    y: np.ndarray
    # positions in the parent dataset
    index: np.ndarray

    def __len__(self):
        return int(self.y.size)

    def filtered(self, keep: np.ndarray) -> 'Shard':
        return Shard(self.x[keep], self.y[keep], self.index[keep])


@dataclass(eq=False)
class Federation:
    """shards[s][u] holds user u's records in silo s (possibly empty)."""
    shards: List[List[Shard]]
    num_users: int
    num_silos: int

    def histogram(self) -> np.ndarray:
        return np.array([[len(shard) for shard in silo] for silo in self.shards], dtype=np.int64)

    def silo_data(self, silo: int) -> Shard:
        parts = self.shards[silo]
        return Shard(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.index for p in parts]),
        )

    def replace_user(self, user: int, shards: List[Shard]) -> 'Federation':
        """Copy with user u's shards swapped out (neighbouring federation)."""
        new = [list(silo) for silo in self.shards]
        for s, shard in enumerate(shards):
            new[s][user] = shard
        return Federation(new, self.num_users, self.num_silos)


def generate_dataset(spec: DatasetSpec, allocation: RecordAllocation, seed: int) -> SyntheticDataset:
    """
    Gaussian class clusters: centres ~ N(0, separation^2 I), records ~ N(centre, noise^2 I).
    With non_iid each user only draws labels from its own random label subset.
    """
    problems = spec.problems()
    if problems:
        raise DomainError('dataset', spec, '; '.join(problems))
    rng = np.random.default_rng(seed)
    n = allocation.num_records
    centres = rng.normal(0.0, spec.separation, size=(spec.classes, spec.dim))

    if spec.non_iid:
        per_user = min(spec.labels_per_user, spec.classes)
        label_sets = np.stack([rng.choice(spec.classes, size=per_user, replace=False)
                               for _ in range(allocation.num_users)])
        labels = label_sets[allocation.users, rng.integers(0, per_user, size=n)]
    else:
        labels = rng.integers(0, spec.classes, size=n)

    features = centres[labels] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    dataset = SyntheticDataset(features, labels.astype(np.int64), allocation)
    dataset.train_index, dataset.test_index = stratified_split(dataset.labels, spec.test_fraction, rng)
    return dataset


def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        cut = int(round(test_fraction * members.size))
        test.append(members[:cut])
        train.append(members[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def federate(features: np.ndarray, labels: np.ndarray, allocation: RecordAllocation,
             indices: Optional[np.ndarray] = None) -> Federation:
    """Group records (optionally a subset) into shards[silo][user]."""
    if indices is None:
        indices = np.arange(allocation.num_records)
    indices = np.asarray(indices, dtype=np.int64)
    users = allocation.users[indices]
    silos = allocation.silos[indices]

    shards = []
    for s in range(allocation.num_silos):
        row = []
        in_silo = silos == s
        for u in range(allocation.num_users):
            idx = indices[in_silo & (users == u)]
            row.append(Shard(features[idx], labels[idx], idx))
        shards.append(row)
    return Federation(shards, allocation.num_users, allocation.num_silos)


def training_federation(dataset: SyntheticDataset) -> Federation:
    return federate(dataset.features, dataset.labels, dataset.allocation, dataset.train_index)


def write_allocation_csv(path: Path, allocation: RecordAllocation,
                         features: Optional[np.ndarray] = None, labels: Optional[np.ndarray] = None) -> Path:
    """record_id,user_id,silo_id[,f0..f{d-1},label] plus a <name>.hist.json sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ['record_id', 'user_id', 'silo_id']
    if features is not None:
        header += [f'f{i}' for i in range(features.shape[1])] + ['label']

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for rid, (user, silo) in enumerate(allocation.assignments):
            row = [rid, user, silo]
            if features is not None:
                row += [repr(float(v)) for v in features[rid]] + [int(labels[rid])]
            writer.writerow(row)

    sidecar = path.with_suffix('.hist.json')
    with open(sidecar, 'w') as f:
        json.dump({
            'num_users': allocation.num_users,
            'num_silos': allocation.num_silos,
            'histogram': histogram_of(allocation).tolist(),
        }, f, indent=2)
    log.info(f'wrote {allocation.num_records} records to {path}')
    return path

