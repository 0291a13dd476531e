"""
User/record/silo assignment generators and the contribution flags used by
the group-privacy baseline.
"""
import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, InfeasibleAllocationError

log = logging.getLogger('Allocation')

DISTRIBUTIONS = ('uniform', 'zipf', 'fixed-zipf')


@dataclass(eq=False)
class RecordAllocation:
    users: np.ndarray
    silos: np.ndarray
    num_users: int
    num_silos: int

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.silos = np.asarray(self.silos, dtype=np.int64)
        if self.num_users < 1 or self.num_silos < 1:
            raise DomainError('allocation', (self.num_users, self.num_silos), 'at least one user and one silo')
        if self.users.shape != self.silos.shape or self.users.ndim != 1:
            raise DomainError('assignments', (self.users.shape, self.silos.shape), 'one (user, silo) pair per record')
        if self.users.size and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise DomainError('user_id', int(self.users.max()), f'ids in [0, {self.num_users})')
        if self.silos.size and (self.silos.min() < 0 or self.silos.max() >= self.num_silos):
            raise DomainError('silo_id', int(self.silos.max()), f'ids in [0, {self.num_silos})')

    @property
    def num_records(self) -> int:
        return int(self.users.size)

    @property
    def assignments(self) -> List[Tuple[int, int]]:
        return list(zip(self.users.tolist(), self.silos.tolist()))

    def histogram(self) -> np.ndarray:
        return histogram_of(self)

    def user_counts(self) -> np.ndarray:
        """N_u for every user."""
        return np.bincount(self.users, minlength=self.num_users)

    def subset(self, indices: Sequence[int]) -> 'RecordAllocation':
        indices = np.asarray(indices, dtype=np.int64)
        return RecordAllocation(self.users[indices], self.silos[indices], self.num_users, self.num_silos)

    def equals(self, other: 'RecordAllocation') -> bool:
        return (
            self.num_users == other.num_users
            and self.num_silos == other.num_silos
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.silos, other.silos)
        )


@dataclass
class DistributionSpec:
    kind: str = 'uniform'
    alpha_user: float = 0.5
    alpha_silo: float = 2.0
    primary_fraction: float = 0.8
    seed: int = 0
    min_records_per_pair: int = 0
    # fixed-zipf only: records held by each silo
    per_silo_records: Optional[List[int]] = None

    def problems(self) -> List[str]:
        found = []
        if self.kind not in DISTRIBUTIONS:
            found.append(f'distribution kind must be one of {DISTRIBUTIONS}, got {self.kind!r}')
        if not self.alpha_user > 0 or not self.alpha_silo > 0:
            found.append('zipf parameters must be > 0')
        if not 0 < self.primary_fraction <= 1:
            found.append('primary_fraction must be in (0, 1]')
        if self.min_records_per_pair < 0:
            found.append('min_records_per_pair must be >= 0')
        if self.per_silo_records is not None and min(self.per_silo_records, default=0) < 0:
            found.append('per_silo_records must be non-negative')
        return found

    def validate(self):
        found = self.problems()
        if found:
            raise DomainError('distribution', self.kind, '; '.join(found))


@dataclass(eq=False)
class ContributionFlags:
    flags: np.ndarray
    k: int

    def kept_per_user(self, alloc: RecordAllocation) -> np.ndarray:
        return np.bincount(alloc.users[self.flags], minlength=alloc.num_users)

    def respects_cap(self, alloc: RecordAllocation) -> bool:
        return bool(np.all(self.kept_per_user(alloc) <= self.k))


def _check_counts(**counts: int):
    for name, value in counts.items():
        if int(value) != value or value < 1:
            raise DomainError(name, value, 'an integer >= 1')


def zipf_weights(size: int, alpha: float) -> np.ndarray:
    """Normalised rank weights i^-alpha over ranks 1..size."""
    if not alpha > 0:
        raise DomainError('alpha', alpha, 'a zipf exponent > 0')
    weights = np.arange(1, size + 1, dtype=float) ** -alpha
    return weights / weights.sum()


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of `total` proportional to weights; exact total, ties to the lower index."""
    raw = total * np.asarray(weights, dtype=float) / np.sum(weights)
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind='stable')
        counts[order[:short]] += 1
    return counts


def _from_matrix(matrix: np.ndarray, rng: np.random.Generator, silo_major: bool = False) -> RecordAllocation:
    num_silos, num_users = matrix.shape
    silo_idx, user_idx = np.nonzero(matrix)
    reps = matrix[silo_idx, user_idx]
    silos = np.repeat(silo_idx, reps)
    users = np.repeat(user_idx, reps)
    if silo_major:
        # keep silo blocks in order, shuffle users inside each block
        order = np.lexsort((rng.random(silos.size), silos))
    else:
        order = rng.permutation(silos.size)
    return RecordAllocation(users[order], silos[order], num_users, num_silos)


def allocate_uniform(num_records: int, num_users: int, num_silos: int, seed: int) -> RecordAllocation:
    _check_counts(num_records=num_records, num_users=num_users, num_silos=num_silos)
    rng = np.random.default_rng(seed)
    users = rng.integers(0, num_users, size=num_records)
    silos = rng.integers(0, num_silos, size=num_records)
    return RecordAllocation(users, silos, num_users, num_silos)


def zipf_user_counts(num_records: int, num_users: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Per-user record counts with a zipf(alpha) profile; ranks are assigned to users at random."""
    ranked = largest_remainder(num_records, zipf_weights(num_users, alpha))
    counts = np.zeros(num_users, dtype=np.int64)
    counts[rng.permutation(num_users)] = ranked
    return counts


def allocate_zipf(
        num_records: int,
        num_users: int,
        num_silos: int,
        alpha_user: float,
        alpha_silo: float,
        seed: int
    ) -> RecordAllocation:
    _check_counts(num_records=num_records, num_users=num_users, num_silos=num_silos)
    rng = np.random.default_rng(seed)
    user_counts = zipf_user_counts(num_records, num_users, alpha_user, rng)
    silo_weights = zipf_weights(num_silos, alpha_silo)

    matrix = np.zeros((num_silos, num_users), dtype=np.int64)
    for user, count in enumerate(user_counts):
        ranking = rng.permutation(num_silos)
        matrix[ranking, user] = largest_remainder(int(count), silo_weights)
    log.debug(f'zipf allocation: max user share {user_counts.max() / num_records:.4f}')
    return _from_matrix(matrix, rng)


def _spill(amounts: np.ndarray, capacity: np.ndarray, fallback_order: Sequence[int]) -> np.ndarray:
    """Clamp amounts to capacity and push the overflow into silos with room, in fallback order."""
    placed = np.minimum(amounts, capacity)
    overflow = int((amounts - placed).sum())
    room = capacity - placed
    for silo in fallback_order:
        if overflow == 0:
            break
        take = min(overflow, int(room[silo]))
        placed[silo] += take
        room[silo] -= take
        overflow -= take
    return placed


def allocate_fixed_silo_zipf(
        per_silo_record_counts: Sequence[int],
        num_users: int,
        alpha_user: float,
        primary_fraction: float = 0.8,
        seed: int = 0,
        min_records_per_pair: int = 0
    ) -> RecordAllocation:
    """
    Zipf user counts over silos whose record totals are fixed. Every
    (silo, user) pair first receives `min_records_per_pair` records; the rest of
    each user's records go ceil(primary_fraction * count) to a random primary silo
    with room and uniformly over the others, subject to the silo totals.
    """
    capacity = np.asarray(per_silo_record_counts, dtype=np.int64)
    num_silos = int(capacity.size)
    _check_counts(num_users=num_users, num_silos=num_silos)
    if capacity.min() < 0:
        raise DomainError('per_silo_record_counts', list(capacity), 'non-negative counts')
    if not 0 < primary_fraction <= 1:
        raise DomainError('primary_fraction', primary_fraction, 'a fraction in (0, 1]')

    floor = int(min_records_per_pair)
    required = floor * num_users * num_silos
    total = int(capacity.sum())
    if required > total or np.any(capacity < floor * num_users):
        raise InfeasibleAllocationError(required, total)

    rng = np.random.default_rng(seed)
    matrix = np.full((num_silos, num_users), floor, dtype=np.int64)
    room = capacity - floor * num_users
    user_counts = zipf_user_counts(int(room.sum()), num_users, alpha_user, rng)

    for user in np.argsort(-user_counts, kind='stable'):
        count = int(user_counts[user])
        if count == 0:
            continue
        share = int(math.ceil(primary_fraction * count))
        fits = np.flatnonzero(room >= share)
        primary = int(rng.choice(fits)) if fits.size else int(np.argmax(room))
        primary_take = min(share, int(room[primary]))

        amounts = np.zeros(num_silos, dtype=np.int64)
        amounts[primary] = primary_take
        rest = count - primary_take
        others = [s for s in range(num_silos) if s != primary]
        if rest and others:
            amounts[others] = rng.multinomial(rest, np.full(len(others), 1 / len(others)))
        else:
            amounts[primary] += rest

        fallback = others + [primary]
        placed = _spill(amounts, room, fallback)
        room -= placed
        matrix[:, user] += placed

    return _from_matrix(matrix, rng, silo_major=True)


def allocate(spec: DistributionSpec, num_records: int, num_users: int, num_silos: int) -> RecordAllocation:
    spec.validate()
    if spec.kind == 'uniform':
        return allocate_uniform(num_records, num_users, num_silos, spec.seed)
    if spec.kind == 'zipf':
        return allocate_zipf(num_records, num_users, num_silos, spec.alpha_user, spec.alpha_silo, spec.seed)

    per_silo = spec.per_silo_records
    if per_silo is None:
        per_silo = largest_remainder(num_records, np.ones(num_silos)).tolist()
    if len(per_silo) != num_silos:
        raise DomainError('per_silo_records', per_silo, f'{num_silos} entries')
    return allocate_fixed_silo_zipf(
        per_silo, num_users, spec.alpha_user, spec.primary_fraction, spec.seed, spec.min_records_per_pair
    )


def histogram_of(alloc: RecordAllocation) -> np.ndarray:
    """n[s, u]: number of user u's records held by silo s."""
    hist = np.zeros((alloc.num_silos, alloc.num_users), dtype=np.int64)
    np.add.at(hist, (alloc.silos, alloc.users), 1)
    return hist


def contribution_flags(alloc: RecordAllocation, k: int, seed: int = 0, policy: str = 'stable') -> ContributionFlags:
    """
    Keep at most k records per user. 'stable' keeps the first k in
    (silo id, record index) order; 'random' keeps a seeded random k.
    """
    if int(k) != k or k < 1:
        raise DomainError('k', k, 'an integer k >= 1')
    if policy not in ('stable', 'random'):
        raise DomainError('policy', policy, "'stable' or 'random'")

    record_index = np.arange(alloc.num_records)
    if policy == 'stable':
        order = np.lexsort((record_index, alloc.silos, alloc.users))
    else:
        tiebreak = np.random.default_rng(seed).random(alloc.num_records)
        order = np.lexsort((tiebreak, alloc.users))

    flags = np.zeros(alloc.num_records, dtype=bool)
    sorted_users = alloc.users[order]
    # rank of each record within its user's block
    starts = np.searchsorted(sorted_users, sorted_users, side='left')
    rank = np.arange(order.size) - starts
    flags[order[rank < k]] = True
    return ContributionFlags(flags=flags, k=int(k))


def group_size_choices(alloc: RecordAllocation) -> dict:
    """Named k values used by the group baseline: max, median, 2 and 8."""
    counts = alloc.user_counts()
    active = counts[counts > 0]
    median = int(np.median(active)) if active.size else 1
    return {
        'max': int(active.max()) if active.size else 1,
        'median': max(1, median),
        '2': 2,
        '8': 8,
    }
