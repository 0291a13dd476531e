"""
Training rounds: FedAVG with two-sided learning rates and the user-level DP
variants (NAIVE, GROUP-k, SGD, AVG, AVG with user sub-sampling).

All model deltas follow one convention: local - global.
"""
import math
import logging
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .dataset import Federation, Shard
from .errors import DomainError
from .models import Model

log = logging.getLogger('FLCore')

ALGORITHMS = ('default', 'naive', 'group', 'sgd', 'avg', 'avg-w', 'avg-sub')
MINI_BATCH = 32
_STREAMS = {'train': 1, 'noise': 2, 'sample': 3, 'dpsgd': 4}


class RoundRng:
    """
    Per-party random streams for one round. Every (silo, purpose) pair gets an
    independent generator so serial and threaded schedules draw identical numbers.
    """

    def __init__(self, seed: int, round_index: int):
        self.seed = int(seed)
        self.round_index = int(round_index)

    def silo(self, silo: int, purpose: str) -> np.random.Generator:
        return self._stream(silo + 1, purpose)

    def pair(self, silo: int, user: int, purpose: str) -> np.random.Generator:
        """One stream per (silo, user): a user leaving the federation leaves the others' draws intact."""
        return self._stream(silo + 1, purpose, user)

    def server(self, purpose: str) -> np.random.Generator:
        return self._stream(0, purpose)

    def _stream(self, party: int, purpose: str, *extra: int) -> np.random.Generator:
        seq = np.random.SeedSequence([self.seed, self.round_index, party, _STREAMS[purpose], *extra])
        return np.random.default_rng(seq)


@dataclass(eq=False)
class ClippingDiagnostics:
    alpha_bar: float
    # |alpha~(s,u) - alpha_bar| per (silo, user)
    deviations: np.ndarray
    abs_deviation_sum: float
    sq_deviation_sum: float


@dataclass(eq=False)
class RoundTrace:
    aggregate: np.ndarray
    noise: np.ndarray
    update: np.ndarray
    diagnostics: Optional[ClippingDiagnostics] = None
    sampled: Optional[np.ndarray] = None


@dataclass(eq=False)
class ModelState:
    params: np.ndarray
    architecture: Model
    # how the round that produced this state went
    trace: Optional[RoundTrace] = field(default=None, repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.architecture.num_params,):
            raise DomainError('params', self.params.shape, f'a vector of {self.architecture.num_params} entries')
        if not np.all(np.isfinite(self.params)):
            raise DomainError('params', 'non-finite', 'finite model parameters')

    @property
    def dim(self) -> int:
        return int(self.params.size)

    def with_params(self, params: np.ndarray, trace: Optional[RoundTrace] = None) -> 'ModelState':
        return ModelState(params, self.architecture, trace)


@dataclass
class TrainConfig:
    eta_l: float = 0.1
    eta_g: float = 1.0
    clip: float = 1.0
    sigma: float = 5.0
    rounds: int = 50
    epochs: int = 1
    q_user: float = 1.0
    # record-level Poisson rate of the DP-SGD baseline
    gamma: float = 0.1
    batch_size: int = MINI_BATCH
    workers: int = 1

    def problems(self) -> List[str]:
        found = []
        if not self.eta_l > 0:
            found.append('eta_l must be > 0')
        if not self.eta_g > 0:
            found.append('eta_g must be > 0')
        if not self.clip > 0:
            found.append('clip must be > 0')
        if not self.sigma >= 0:
            found.append('sigma must be >= 0')
        if self.rounds < 1:
            found.append('rounds must be >= 1')
        if self.epochs < 1:
            found.append('epochs must be >= 1')
        if not 0 < self.q_user <= 1:
            found.append('q_user must be in (0, 1]')
        if not 0 < self.gamma <= 1:
            found.append('gamma must be in (0, 1]')
        if self.batch_size < 1:
            found.append('batch_size must be >= 1')
        if self.workers < 1:
            found.append('workers must be >= 1')
        return found

    def validate(self):
        found = self.problems()
        if found:
            raise DomainError('train', self, '; '.join(found))


@dataclass(eq=False)
class WeightMatrix:
    w: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        if self.w.ndim != 2 or self.active.shape != (self.w.shape[1],):
            raise DomainError('weights', self.w.shape, 'a (silos x users) matrix with one flag per user')
        if np.any(self.w < 0):
            raise DomainError('weights', float(self.w.min()), 'non-negative weights')

    @property
    def num_silos(self) -> int:
        return self.w.shape[0]

    @property
    def num_users(self) -> int:
        return self.w.shape[1]

    def column_sums(self) -> np.ndarray:
        return self.w.sum(axis=0)

    def satisfies_constraint(self, tol: float = 1e-12) -> bool:
        """Every active user's weights sum to 1 across silos."""
        sums = self.column_sums()[self.active]
        return bool(np.all(np.abs(sums - 1.0) <= tol))

    def zeroed(self, keep_users: np.ndarray) -> 'WeightMatrix':
        keep_users = np.asarray(keep_users, dtype=bool)
        return WeightMatrix(self.w * keep_users[None, :], self.active & keep_users)


class ClientUpdate(NamedTuple):
    silo: int
    delta: np.ndarray
    noise: np.ndarray


class LocalDelta(NamedTuple):
    delta: np.ndarray
    empty: bool


# Weighting
############################################

def optimal_weights(histogram: np.ndarray) -> WeightMatrix:
    """w[s, u] = n[s, u] / N_u; users without records get an all-zero column and are inactive."""
    hist = np.asarray(histogram, dtype=float)
    if np.any(hist < 0):
        raise DomainError('histogram', float(hist.min()), 'non-negative counts')
    totals = hist.sum(axis=0)
    active = totals > 0
    w = np.divide(hist, totals[None, :], out=np.zeros_like(hist), where=active[None, :])
    return WeightMatrix(w, active)


def uniform_weights(histogram: np.ndarray) -> WeightMatrix:
    """w[s, u] = 1/|S| for every user with records."""
    hist = np.asarray(histogram)
    active = hist.sum(axis=0) > 0
    w = np.where(active[None, :], 1.0 / hist.shape[0], 0.0) * np.ones(hist.shape)
    return WeightMatrix(w, active)


# Local computation
############################################

def model_loss_grad(model: ModelState, batch: Shard) -> Tuple[float, np.ndarray]:
    return model.architecture.loss_grad(model.params, batch.x, batch.y)


def local_delta(
        model: ModelState,
        data: Shard,
        eta_l: float,
        epochs: int,
        batch_size: int = MINI_BATCH,
        rng: Optional[np.random.Generator] = None
    ) -> LocalDelta:
    """
    Q epochs of SGD from the broadcast model; returns local - global.
    Shards smaller than batch_size train full-batch, larger ones in shuffled mini-batches.
    """
    if epochs < 1:
        raise DomainError('epochs', epochs, 'Q >= 1')
    if len(data) == 0:
        return LocalDelta(np.zeros(model.dim), True)

    arch = model.architecture
    params = model.params.copy()
    n = len(data)
    for _ in range(epochs):
        if n < batch_size:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n) if rng is not None else np.arange(n)
            batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        for idx in batches:
            _, grad = arch.loss_grad(params, data.x[idx], data.y[idx])
            params -= eta_l * grad
    return LocalDelta(params - model.params, False)


def weighted_clip(delta: np.ndarray, w: float, clip: float) -> np.ndarray:
    """w * delta * min(1, C/||delta||); the result has norm <= w*C."""
    if w < 0 or not clip > 0:
        raise DomainError('weighted_clip', (w, clip), 'w >= 0 and C > 0')
    norm = float(np.linalg.norm(delta))
    factor = 1.0 if norm == 0 or norm <= clip else clip / norm
    return w * factor * delta


def clipping_diagnostics(deltas: np.ndarray, weights: WeightMatrix, clip: float, eta_l: float = 1.0) -> ClippingDiagnostics:
    """
    alpha~(s,u) = w(s,u) C / max(C, eta_l ||delta(s,u)||), alpha_bar their mean over
    every (silo, user) pair, and the absolute and squared deviation sums.
    """
    norms = eta_l * np.linalg.norm(np.asarray(deltas, dtype=float), axis=-1)
    alpha = weights.w * clip / np.maximum(clip, norms)
    alpha_bar = float(alpha.mean())
    deviations = np.abs(alpha - alpha_bar)
    return ClippingDiagnostics(
        alpha_bar=alpha_bar,
        deviations=deviations,
        abs_deviation_sum=float(deviations.sum()),
        sq_deviation_sum=float((deviations ** 2).sum()),
    )


def _map_silos(fn: Callable[[int], object], num_silos: int, workers: int) -> list:
    if workers <= 1 or num_silos == 1:
        return [fn(s) for s in range(num_silos)]
    with ThreadPoolExecutor(max_workers=min(workers, num_silos)) as executor:
        return list(executor.map(fn, range(num_silos)))


# Noise
############################################

def silo_noise_std(algorithm: str, sigma: float, clip: float, num_silos: int) -> float:
    """Per-silo, per-coordinate noise std."""
    if algorithm == 'default' or sigma == 0:
        return 0.0
    if algorithm == 'naive':
        return sigma * clip * math.sqrt(num_silos)
    if algorithm in ('sgd', 'avg', 'avg-w', 'avg-sub'):
        return sigma * clip / math.sqrt(num_silos)
    raise DomainError('algorithm', algorithm, 'an algorithm with silo-level noise')


def silo_noise(std: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    if std == 0:
        return np.zeros(dim)
    return rng.normal(0.0, std, size=dim)


def summed_silo_noise(algorithm: str, sigma: float, clip: float, num_silos: int, dim: int, rng: RoundRng) -> np.ndarray:
    """Sum of the per-silo draws: what the server sees after aggregation."""
    std = silo_noise_std(algorithm, sigma, clip, num_silos)
    return np.sum([silo_noise(std, dim, rng.silo(s, 'noise')) for s in range(num_silos)], axis=0)


def centralized_noise(algorithm: str, sigma: float, clip: float, num_silos: int, dim: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Single draw with the variance of the summed per-silo noise."""
    std = silo_noise_std(algorithm, sigma, clip, num_silos) * math.sqrt(num_silos)
    return silo_noise(std, dim, rng)


# Per-user weighted clipping rounds
############################################

@dataclass(eq=False)
class PairDeltas:
    """Per (silo, user) local deltas before and after clipping to C (unweighted)."""
    raw: np.ndarray
    clipped: np.ndarray
    noise: np.ndarray


Aggregator = Callable[[PairDeltas, WeightMatrix], np.ndarray]


def weighted_aggregate(pairs: PairDeltas, weights: WeightMatrix) -> np.ndarray:
    """sum_s (sum_u w(s,u) clip(delta(s,u)) + z_s)."""
    return np.einsum('su,sud->d', weights.w, pairs.clipped) + pairs.noise.sum(axis=0)


def pre_noise_aggregate(pairs: PairDeltas, weights: WeightMatrix) -> np.ndarray:
    return np.einsum('su,sud->d', weights.w, pairs.clipped)


def user_pair_deltas(
        model: ModelState,
        federation: Federation,
        weights: WeightMatrix,
        config: TrainConfig,
        rng: RoundRng,
        noise_std: float,
        gradient_only: bool = False
    ) -> PairDeltas:
    """
    Every silo trains each of its users separately from the broadcast model.
    Pairs with no records or zero weight contribute zero. gradient_only
    returns one full-shard gradient per user instead of a Q-epoch delta.
    """
    num_users, dim = federation.num_users, model.dim

    def silo_job(s: int):
        raw = np.zeros((num_users, dim))
        clipped = np.zeros((num_users, dim))
        for u, shard in enumerate(federation.shards[s]):
            if len(shard) == 0 or weights.w[s, u] == 0:
                continue
            if gradient_only:
                _, raw[u] = model_loss_grad(model, shard)
            else:
                raw[u] = local_delta(model, shard, config.eta_l, config.epochs, config.batch_size,
                                     rng.pair(s, u, 'train')).delta
            clipped[u] = weighted_clip(raw[u], 1.0, config.clip)
        return raw, clipped, silo_noise(noise_std, dim, rng.silo(s, 'noise'))

    results = _map_silos(silo_job, federation.num_silos, config.workers)
    return PairDeltas(
        raw=np.stack([r[0] for r in results]),
        clipped=np.stack([r[1] for r in results]),
        noise=np.stack([r[2] for r in results]),
    )


def _weighted_round(
        model: ModelState,
        federation: Federation,
        weights: WeightMatrix,
        config: TrainConfig,
        rng: RoundRng,
        sampled: Optional[np.ndarray],
        q: float,
        sign: float,
        gradient_only: bool,
        aggregator: Optional[Aggregator]
    ) -> ModelState:
    effective = weights if sampled is None else weights.zeroed(sampled)
    std = silo_noise_std('avg', config.sigma, config.clip, federation.num_silos)
    pairs = user_pair_deltas(model, federation, effective, config, rng, std, gradient_only)

    aggregate = (aggregator or weighted_aggregate)(pairs, effective)
    scale = config.eta_g / (q * federation.num_users * federation.num_silos)
    update = sign * scale * aggregate
    trace = RoundTrace(
        aggregate=pre_noise_aggregate(pairs, effective),
        noise=pairs.noise.sum(axis=0),
        update=update,
        diagnostics=clipping_diagnostics(pairs.raw, effective, config.clip),
        sampled=sampled,
    )
    return model.with_params(model.params + update, trace)


def round_uldp_avg(
        model: ModelState,
        federation: Federation,
        weights: WeightMatrix,
        config: TrainConfig,
        rng: RoundRng,
        aggregator: Optional[Aggregator] = None
    ) -> ModelState:
    """x + eta_g/(|U||S|) sum_s (sum_u w(s,u) clip(delta(s,u)) + N(0, sigma^2 C^2/|S|))."""
    return _weighted_round(model, federation, weights, config, rng, None, 1.0, 1.0, False, aggregator)


def sample_users(num_users: int, q_user: float, rng: RoundRng) -> np.ndarray:
    return rng.server('sample').random(num_users) < q_user


def round_uldp_avg_subsampled(
        model: ModelState,
        federation: Federation,
        weights: WeightMatrix,
        config: TrainConfig,
        rng: RoundRng,
        aggregator: Optional[Aggregator] = None
    ) -> ModelState:
    """Poisson-sample users at q_user, zero the others' weights, scale by 1/(q|U||S|)."""
    sampled = sample_users(federation.num_users, config.q_user, rng)
    log.debug(f'round {rng.round_index}: {int(sampled.sum())}/{sampled.size} users sampled')
    return _weighted_round(model, federation, weights, config, rng, sampled, config.q_user, 1.0, False, aggregator)


def round_uldp_sgd(
        model: ModelState,
        federation: Federation,
        weights: WeightMatrix,
        config: TrainConfig,
        rng: RoundRng
    ) -> ModelState:
    """One weighted-clipped gradient per user, x - eta_g/(|U||S|) sum."""
    return _weighted_round(model, federation, weights, config, rng, None, 1.0, -1.0, True, None)


# Silo-level rounds
############################################

def _silo_deltas(model: ModelState, federation: Federation, config: TrainConfig, rng: RoundRng,
                 clip: Optional[float], noise_std: float) -> List[ClientUpdate]:
    def silo_job(s: int) -> ClientUpdate:
        data = federation.silo_data(s)
        delta = local_delta(model, data, config.eta_l, config.epochs, config.batch_size, rng.silo(s, 'train')).delta
        if clip is not None:
            delta = weighted_clip(delta, 1.0, clip)
        return ClientUpdate(s, delta, silo_noise(noise_std, model.dim, rng.silo(s, 'noise')))

    return _map_silos(silo_job, federation.num_silos, config.workers)


def _average_round(model: ModelState, updates: Sequence[ClientUpdate], eta_g: float) -> ModelState:
    aggregate = np.sum([u.delta for u in updates], axis=0)
    noise = np.sum([u.noise for u in updates], axis=0)
    update = eta_g * (aggregate + noise) / len(updates)
    trace = RoundTrace(aggregate=aggregate, noise=noise, update=update)
    return model.with_params(model.params + update, trace)


def round_uldp_naive(model: ModelState, federation: Federation, config: TrainConfig, rng: RoundRng) -> ModelState:
    """Silo deltas clipped to C, noise N(0, sigma^2 C^2 |S|) per silo, averaged over |S|."""
    std = silo_noise_std('naive', config.sigma, config.clip, federation.num_silos)
    return _average_round(model, _silo_deltas(model, federation, config, rng, config.clip, std), config.eta_g)


def round_default(model: ModelState, federation: Federation, config: TrainConfig, rng: RoundRng) -> ModelState:
    """Non-private FedAVG with two-sided learning rates."""
    return _average_round(model, _silo_deltas(model, federation, config, rng, None, 0.0), config.eta_g)


def dp_sgd_epochs(
        model: ModelState,
        data: Shard,
        clip: float,
        sigma: float,
        eta_l: float,
        gamma: float,
        epochs: int,
        rng: np.random.Generator
    ) -> ModelState:
    """
    DP-SGD over one silo: each step Poisson-samples records at gamma, clips
    per-record gradients to C, adds N(0, (sigma C)^2), divides by gamma |D|.
    ceil(1/gamma) steps per epoch.
    """
    if not 0 < gamma <= 1:
        raise DomainError('gamma', gamma, 'a sampling rate in (0, 1]')
    arch = model.architecture
    params = model.params.copy()
    n = len(data)
    lot_size = gamma * n if n else 1.0
    steps = epochs * int(math.ceil(1 / gamma))

    for _ in range(steps):
        total = np.zeros_like(params)
        if n:
            lot = rng.random(n) < gamma
            if lot.any():
                _, grads = arch.per_example_grads(params, data.x[lot], data.y[lot])
                norms = np.linalg.norm(grads, axis=1)
                factors = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
                total = (grads * factors[:, None]).sum(axis=0)
        if sigma > 0:
            total = total + rng.normal(0.0, sigma * clip, size=params.size)
        params -= eta_l * total / lot_size
    return model.with_params(params)


def filter_federation(federation: Federation, flags: np.ndarray) -> Federation:
    """Keep only flagged records (flags indexed by dataset position)."""
    shards = [[shard.filtered(flags[shard.index]) for shard in silo] for silo in federation.shards]
    return Federation(shards, federation.num_users, federation.num_silos)


def round_uldp_group(
        model: ModelState,
        federation: Federation,
        flags: np.ndarray,
        config: TrainConfig,
        rng: RoundRng
    ) -> ModelState:
    """Silos filter by flags, run DP-SGD, the server averages the deltas over |S|."""
    filtered = filter_federation(federation, flags)

    def silo_job(s: int):
        local = dp_sgd_epochs(model, filtered.silo_data(s), config.clip, config.sigma,
                              config.eta_l, config.gamma, config.epochs, rng.silo(s, 'dpsgd'))
        return ClientUpdate(s, local.params - model.params, np.zeros(model.dim))

    return _average_round(model, _map_silos(silo_job, filtered.num_silos, config.workers), config.eta_g)
