"""
Private weighting protocol: the server learns only the ULDP-AVG aggregate
with weights n(s,u)/N_u, never the per-silo histograms or deltas.

Parties run in one process and talk over an in-memory bus that keeps a
transcript of every payload (digest and size) plus per-phase timings.
"""
import os
import csv
import math
import json
import hashlib
import logging
from pathlib import Path
from time import perf_counter
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from .crypto import (
    DEFAULT_KEY_BITS,
    DH_GROUP_14,
    MIN_KEY_BITS,
    DhParty,
    MaskStream,
    PaillierKeypair,
    RandFunc,
    decode,
    encode,
    lcm_of,
    lcm_up_to,
    mod_inverse,
    paillier_keygen,
)
from .decorators import job_tracker
from .errors import DomainError, NotInvertibleError, PreflightError
from .fl_core import optimal_weights

log = logging.getLogger('SecureProtocol')

PHASES = ('keyex', 'blind', 'train', 'aggregate')
SERVER = 'server'
DEFAULT_PRECISION = 1e-10
DEFAULT_N_MAX = 2000


def silo_name(s: int) -> str:
    return f'silo{s}'


@dataclass(frozen=True)
class FixedPointConfig:
    precision: float
    n_max: int
    c_lcm: int
    n: int
    # restricted record counts, when users are limited to a few sizes
    count_set: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not self.precision > 0:
            raise DomainError('precision', self.precision, 'P > 0')
        if self.n_max < 1:
            raise DomainError('n_max', self.n_max, 'N_max >= 1')
        if any(self.c_lcm % count for count in self.admissible_counts()):
            raise DomainError('c_lcm', self.c_lcm, 'a multiple of every admissible record count')

    @classmethod
    def build(cls, n: int, precision: float = DEFAULT_PRECISION, n_max: int = DEFAULT_N_MAX,
              count_set: Optional[Sequence[int]] = None) -> 'FixedPointConfig':
        if count_set:
            counts = tuple(sorted({int(c) for c in count_set}))
            return cls(precision, max(counts), lcm_of(counts), n, counts)
        return cls(precision, n_max, lcm_up_to(n_max), n)

    def admissible_counts(self) -> Sequence[int]:
        return self.count_set if self.count_set else range(1, self.n_max + 1)

    def admissible(self, count: int) -> bool:
        if self.count_set:
            return count in self.count_set
        return 1 <= count <= self.n_max


@dataclass
class FixedPointSettings:
    """Protocol parameters as they appear in an experiment config (n is only known after keygen)."""
    precision: float = DEFAULT_PRECISION
    n_max: int = DEFAULT_N_MAX
    key_bits: int = DEFAULT_KEY_BITS
    count_set: Optional[List[int]] = None

    def problems(self) -> List[str]:
        found = []
        if not self.precision > 0:
            found.append('fixed_point precision must be > 0')
        if self.n_max < 1:
            found.append('fixed_point n_max must be >= 1')
        if self.key_bits < MIN_KEY_BITS:
            found.append(f'fixed_point key_bits must be >= {MIN_KEY_BITS}')
        if self.count_set is not None and (not self.count_set or min(self.count_set) < 1):
            found.append('fixed_point count_set must hold positive record counts')
        return found


@dataclass
class PreflightReport:
    ok: bool
    condition: Optional[int] = None
    detail: str = ''
    quantity: Optional[float] = None


@dataclass
class PreflightBounds:
    """Worst-case magnitudes of a clipped delta coordinate and a noise coordinate."""
    max_delta: float
    max_noise: float


def correctness_preflight(config: FixedPointConfig, user_counts: Sequence[int],
                          bounds: PreflightBounds, num_silos: int) -> PreflightReport:
    """
    (1) every user's record count divides C_LCM (N_u <= N_max, or in the count set);
    (2) the worst-case encoded aggregate stays inside the signed half of Z_n.
    """
    for user, count in enumerate(int(c) for c in user_counts):
        if count > 0 and not config.admissible(count):
            limit = f'count set {list(config.count_set)}' if config.count_set else f'N_max={config.n_max}'
            return PreflightReport(False, 1, f'user {user} has N_u={count} outside {limit}', count)

    active = sum(1 for c in user_counts if c > 0)
    per_delta = int(bounds.max_delta / config.precision) + 1
    per_noise = int(bounds.max_noise / config.precision) + 1
    magnitude = (active * per_delta + num_silos * per_noise) * config.c_lcm
    if 2 * magnitude >= config.n:
        return PreflightReport(
            False, 2,
            f'worst-case aggregate magnitude 2^{magnitude.bit_length()} reaches n/2 (n has {config.n.bit_length()} bits)',
            float(magnitude.bit_length()),
        )
    return PreflightReport(True)


# Transport
############################################

@dataclass
class Message:
    phase: str
    sender: str
    receiver: str
    round: int
    payload_digest: str
    bytes: int


@dataclass
class TimingRecord:
    phase: str
    party: str
    round: int
    ms: float


@dataclass
class ProtocolTranscript:
    messages: List[Message] = field(default_factory=list)
    timings: List[TimingRecord] = field(default_factory=list)

    @contextmanager
    def timed(self, phase: str, party: str, round_index: int):
        """Accumulate wall time into the (phase, party, round) record."""
        start = perf_counter()
        try:
            yield
        finally:
            elapsed = (perf_counter() - start) * 1000.0
            for record in self.timings:
                if (record.phase, record.party, record.round) == (phase, party, round_index):
                    record.ms += elapsed
                    break
            else:
                self.timings.append(TimingRecord(phase, party, round_index, elapsed))

    def phase_order_ok(self) -> bool:
        """Within every round, messages never step back to an earlier phase."""
        last: Dict[int, int] = {}
        for msg in self.messages:
            rank = PHASES.index(msg.phase)
            if rank < last.get(msg.round, 0):
                return False
            last[msg.round] = rank
        return True

    def phase_ms(self, phase: str) -> float:
        return sum(t.ms for t in self.timings if t.phase == phase)

    def dump_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            for msg in self.messages:
                f.write(json.dumps({
                    'phase': msg.phase, 'from': msg.sender, 'to': msg.receiver,
                    'payload_digest': msg.payload_digest, 'bytes': msg.bytes,
                }) + '\n')
        return path

    def write_timings_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['phase', 'party', 'round', 'ms'])
            for t in self.timings:
                writer.writerow([t.phase, t.party, t.round, f'{t.ms:.3f}'])
        return path

    def __str__(self):
        totals = defaultdict(float)
        for t in self.timings:
            totals[t.phase] += t.ms
        sent = defaultdict(int)
        for msg in self.messages:
            sent[msg.phase] += msg.bytes
        data = [[phase, round(totals[phase], 3), sent[phase]] for phase in PHASES]
        return tabulate(data, headers=['Phase', 'Total (ms)', 'Bytes sent'], tablefmt='grid')


class MessageBus:
    """In-memory delivery; FIFO per (sender, receiver) pair."""

    def __init__(self, transcript: ProtocolTranscript):
        self.transcript = transcript
        self._queues: Dict[Tuple[str, str], Deque] = defaultdict(deque)

    def send(self, phase: str, sender: str, receiver: str, payload, round_index: int = 0):
        wire = repr(payload).encode()
        self.transcript.messages.append(Message(
            phase=phase, sender=sender, receiver=receiver, round=round_index,
            payload_digest=hashlib.sha256(wire).hexdigest(), bytes=len(wire),
        ))
        self._queues[(sender, receiver)].append(payload)

    def receive(self, sender: str, receiver: str):
        queue = self._queues[(sender, receiver)]
        if not queue:
            raise LookupError(f'no message from {sender} to {receiver}')
        return queue.popleft()


# Party material
############################################

@dataclass(eq=False)
class MaskMaterial:
    silo: int
    num_silos: int
    pair_keys: Dict[int, bytes] = field(default_factory=dict)
    seed: bytes = b''
    blinds: List[int] = field(default_factory=list)

    def pair_masks(self, peer: int, n: int, label: bytes, count: int) -> List[int]:
        """r(s,s') masks; both ends of a pair draw the same values."""
        stream = MaskStream(self.pair_keys[peer], label)
        return [stream.below(n) for _ in range(count)]

    def net_mask(self, n: int, label: bytes, count: int) -> List[int]:
        """sum over s' > s of r(s,s') minus sum over s' < s, mod n; cancels across silos."""
        total = [0] * count
        for peer in range(self.num_silos):
            if peer == self.silo:
                continue
            sign = 1 if peer > self.silo else -1
            for j, mask in enumerate(self.pair_masks(peer, n, label, count)):
                total[j] = (total[j] + sign * mask) % n
        return total


def derive_blinds(seed: bytes, num_users: int, n: int) -> List[int]:
    """Multiplicative blinds r_u from the silos' shared seed, each invertible mod n."""
    stream = MaskStream(seed, b'blind')
    blinds = []
    for _ in range(num_users):
        r = stream.below(n)
        while r < 2 or math.gcd(r, n) != 1:
            r = stream.below(n)
        blinds.append(r)
    return blinds


@dataclass(eq=False)
class ProtocolState:
    keypair: PaillierKeypair
    fixed_point: FixedPointConfig
    silos: List[MaskMaterial]
    histogram: np.ndarray
    b_inv: List[int]
    active: np.ndarray

    @property
    def n(self) -> int:
        return self.keypair.n

    @property
    def num_silos(self) -> int:
        return self.histogram.shape[0]

    @property
    def num_users(self) -> int:
        return self.histogram.shape[1]


class SecureWeighting:
    """
    Server and silos of the private weighting protocol. After setup() the
    instance can be handed to the ULDP-AVG round as its aggregator.
    """

    def __init__(
            self,
            histogram: np.ndarray,
            key_bits: int = DEFAULT_KEY_BITS,
            precision: float = DEFAULT_PRECISION,
            n_max: int = DEFAULT_N_MAX,
            count_set: Optional[Sequence[int]] = None,
            randfunc: Optional[RandFunc] = None,
            dh_group: Tuple[int, int] = DH_GROUP_14,
            blinds: Optional[Sequence[int]] = None
        ):
        self.histogram = np.asarray(histogram, dtype=np.int64)
        if self.histogram.ndim != 2 or self.histogram.shape[0] < 1:
            raise DomainError('histogram', self.histogram.shape, 'a (silos x users) count matrix')
        if self.histogram.shape[0] == 1:
            log.warning('single silo: pairwise masks are empty and hide nothing')
        self.key_bits = key_bits
        self.precision = precision
        self.n_max = n_max
        self.count_set = count_set
        self.randfunc = randfunc
        self.dh_group = dh_group
        self.fixed_blinds = list(blinds) if blinds is not None else None

        self.transcript = ProtocolTranscript()
        self.bus = MessageBus(self.transcript)
        self.state: Optional[ProtocolState] = None
        self.rounds_run = 0

    @property
    def num_silos(self) -> int:
        return self.histogram.shape[0]

    @property
    def num_users(self) -> int:
        return self.histogram.shape[1]

    # Setup
    ############################################

    def setup(self) -> ProtocolState:
        keypair = self._key_exchange()
        fixed_point = FixedPointConfig.build(keypair.n, self.precision, self.n_max, self.count_set)
        report = correctness_preflight(
            fixed_point, self.histogram.sum(axis=0), PreflightBounds(0.0, 0.0), self.num_silos
        )
        if not report.ok and report.condition == 1:
            raise PreflightError(report)

        materials = self._pairwise_material(keypair.n)
        b_inv, active = self._blinded_histogram(keypair, materials)
        self.state = ProtocolState(keypair, fixed_point, materials, self.histogram, b_inv, active)
        log.debug(f'setup complete: {self.num_silos} silos, {int(active.sum())} active users')
        return self.state

    @job_tracker(name='keyex')
    def _key_exchange(self) -> PaillierKeypair:
        with self.transcript.timed('keyex', SERVER, 0):
            keypair = paillier_keygen(self.key_bits, self.randfunc)
        for s in range(self.num_silos):
            self.bus.send('keyex', SERVER, silo_name(s), (keypair.public.n, keypair.public.g))
        return keypair

    @job_tracker(name='keyex')
    def _pairwise_material(self, n: int) -> List[MaskMaterial]:
        silos = range(self.num_silos)
        materials = [MaskMaterial(s, self.num_silos) for s in silos]
        parties = {}
        for s in silos:
            with self.transcript.timed('keyex', silo_name(s), 0):
                parties[s] = DhParty(self.dh_group)
                for peer in silos:
                    if peer != s:
                        self.bus.send('keyex', silo_name(s), silo_name(peer), parties[s].public_number)

        for s in silos:
            with self.transcript.timed('keyex', silo_name(s), 0):
                for peer in silos:
                    if peer != s:
                        peer_public = self.bus.receive(silo_name(peer), silo_name(s))
                        materials[s].pair_keys[peer] = parties[s].shared_key(peer_public)

        # silo 0 draws the common seed R and hands it to every other silo under the pair key
        seed = self.randfunc(32) if self.randfunc else os.urandom(32)
        materials[0].seed = seed
        for peer in silos:
            if peer == 0:
                continue
            pad = MaskStream(materials[0].pair_keys[peer], b'seed').keystream(len(seed))
            self.bus.send('keyex', silo_name(0), silo_name(peer), bytes(a ^ b for a, b in zip(seed, pad)))
        for s in silos:
            if s == 0:
                continue
            sealed = self.bus.receive(silo_name(0), silo_name(s))
            pad = MaskStream(materials[s].pair_keys[0], b'seed').keystream(len(sealed))
            materials[s].seed = bytes(a ^ b for a, b in zip(sealed, pad))

        for material in materials:
            if self.fixed_blinds is not None:
                material.blinds = [int(r) % n for r in self.fixed_blinds]
            else:
                material.blinds = derive_blinds(material.seed, self.num_users, n)
        return materials

    @job_tracker(name='blind')
    def _blinded_histogram(self, keypair: PaillierKeypair, materials: List[MaskMaterial]) -> Tuple[List[int], np.ndarray]:
        n = keypair.n
        for s, material in enumerate(materials):
            with self.transcript.timed('blind', silo_name(s), 0):
                masks = material.net_mask(n, b'hist', self.num_users)
                blinded = [
                    (material.blinds[u] * int(self.histogram[s, u]) + masks[u]) % n
                    for u in range(self.num_users)
                ]
            self.bus.send('blind', silo_name(s), SERVER, blinded)

        with self.transcript.timed('blind', SERVER, 0):
            totals = [0] * self.num_users
            for s in range(self.num_silos):
                for u, value in enumerate(self.bus.receive(silo_name(s), SERVER)):
                    totals[u] = (totals[u] + value) % n

            b_inv, active, failed = [], np.zeros(self.num_users, dtype=bool), []
            for u, blinded_total in enumerate(totals):
                if blinded_total == 0:
                    b_inv.append(0)
                    continue
                try:
                    b_inv.append(mod_inverse(blinded_total, n))
                    active[u] = True
                except NotInvertibleError:
                    failed.append(u)
                    b_inv.append(0)
        if failed:
            raise NotInvertibleError(totals[failed[0]], failed)
        return b_inv, active

    # Weighting rounds
    ############################################

    def weighting_round(
            self,
            clipped: np.ndarray,
            noise: np.ndarray,
            round_index: Optional[int] = None,
            sampled: Optional[np.ndarray] = None
        ) -> np.ndarray:
        """
        clipped[s, u] is user u's delta clipped to C in silo s, noise[s] the silo's
        Gaussian draw. Returns sum_s (sum_u n(s,u)/N_u clipped[s,u] + noise[s]).
        """
        if self.state is None:
            self.setup()
        state = self.state
        clipped = np.asarray(clipped, dtype=float)
        noise = np.asarray(noise, dtype=float)
        if clipped.shape[:2] != state.histogram.shape or noise.shape != (self.num_silos, clipped.shape[2]):
            raise DomainError('deltas', (clipped.shape, noise.shape), 'shapes (silos, users, d) and (silos, d)')
        if round_index is None:
            round_index = self.rounds_run + 1
        self.rounds_run = max(self.rounds_run, round_index)

        bounds = PreflightBounds(float(np.abs(clipped).max(initial=0.0)), float(np.abs(noise).max(initial=0.0)))
        report = correctness_preflight(state.fixed_point, state.histogram.sum(axis=0), bounds, self.num_silos)
        if not report.ok:
            raise PreflightError(report)

        enc_b_inv = self._distribute_inverses(round_index, sampled)
        for s in range(self.num_silos):
            ciphertexts = self._silo_ciphertexts(s, clipped[s], noise[s], enc_b_inv[s], round_index)
            self.bus.send('train', silo_name(s), SERVER, ciphertexts, round_index)
        return self._server_aggregate(clipped.shape[2], round_index)

    @job_tracker(name='blind')
    def _distribute_inverses(self, round_index: int, sampled: Optional[np.ndarray]) -> List[List[int]]:
        """Enc(B_inv(u)) to every silo; users outside the round get Enc(0)."""
        state = self.state
        keep = np.ones(self.num_users, dtype=bool) if sampled is None else np.asarray(sampled, dtype=bool)
        with self.transcript.timed('blind', SERVER, round_index):
            encrypted = [
                state.keypair.encrypt(state.b_inv[u] if keep[u] else 0, self.randfunc)
                for u in range(self.num_users)
            ]
        for s in range(self.num_silos):
            self.bus.send('blind', SERVER, silo_name(s), encrypted, round_index)
        return [self.bus.receive(SERVER, silo_name(s)) for s in range(self.num_silos)]

    @job_tracker(name='train')
    def _silo_ciphertexts(self, s: int, clipped: np.ndarray, noise: np.ndarray,
                          enc_b_inv: List[int], round_index: int) -> List[int]:
        state = self.state
        pk, fp, n = state.keypair.public, state.fixed_point, state.n
        material = state.silos[s]
        counts = state.histogram[s]
        dim = clipped.shape[1]

        with self.transcript.timed('train', silo_name(s), round_index):
            masks = material.net_mask(n, f'round|{round_index}'.encode(), dim)
            out = []
            for j in range(dim):
                noise_term = encode(noise[j], fp.precision, n) * fp.c_lcm % n
                c = pk.encrypt(noise_term, self.randfunc)
                for u in np.flatnonzero(counts):
                    scalar = encode(clipped[u, j], fp.precision, n) * int(counts[u]) * material.blinds[u] * fp.c_lcm
                    c = pk.add(c, pk.scalar_mul(enc_b_inv[u], scalar % n))
                out.append(pk.add(c, pk.encrypt(masks[j], self.randfunc)))
        return out

    @job_tracker(name='aggregate')
    def _server_aggregate(self, dim: int, round_index: int) -> np.ndarray:
        state = self.state
        pk, fp = state.keypair.public, state.fixed_point
        with self.transcript.timed('aggregate', SERVER, round_index):
            product = [1] * dim
            for s in range(self.num_silos):
                for j, c in enumerate(self.bus.receive(silo_name(s), SERVER)):
                    product[j] = pk.add(product[j], c)
            result = np.array([
                decode(state.keypair.decrypt(c), fp.precision, fp.c_lcm, state.n) for c in product
            ])
        for s in range(self.num_silos):
            self.bus.send('aggregate', SERVER, silo_name(s), result.tolist(), round_index)
        return result

    def tolerance(self) -> float:
        """Accumulated fixed-point truncation bound P (|S||U| + |S|)."""
        return self.precision * (self.num_silos * self.num_users + self.num_silos)

    def __call__(self, pairs, weights) -> np.ndarray:
        """
        Aggregator hook for the ULDP-AVG round. The protocol always applies
        n(s,u)/N_u, so weights.w must equal those weights zeroed outside weights.active.
        """
        expected = optimal_weights(self.histogram).zeroed(weights.active).w
        if weights.w.shape != expected.shape or not np.allclose(weights.w, expected):
            raise DomainError('weights', 'custom', 'the n(s,u)/N_u weights of the session histogram')
        return self.weighting_round(pairs.clipped, pairs.noise, sampled=weights.active)


def setup_phase(
        histogram: np.ndarray,
        key_bits: int = DEFAULT_KEY_BITS,
        n_max: int = DEFAULT_N_MAX,
        randfunc: Optional[RandFunc] = None,
        **kwargs
    ) -> SecureWeighting:
    session = SecureWeighting(histogram, key_bits=key_bits, n_max=n_max, randfunc=randfunc, **kwargs)
    session.setup()
    return session


def weighting_round(session: SecureWeighting, clipped: np.ndarray, noise: np.ndarray,
                    round_index: Optional[int] = None, sampled: Optional[np.ndarray] = None) -> np.ndarray:
    return session.weighting_round(clipped, noise, round_index, sampled)


# Benchmark
############################################

@dataclass
class BenchScenario:
    silos: int = 3
    users: int = 10
    dim: int = 8
    rounds: int = 1
    key_bits: int = DEFAULT_KEY_BITS
    precision: float = DEFAULT_PRECISION
    n_max: int = DEFAULT_N_MAX
    seed: int = 0
    records_per_user: int = 10
    sigma: float = 1.0
    clip: float = 1.0


@dataclass
class BenchResult:
    scenario: BenchScenario
    transcript: ProtocolTranscript
    max_abs_error: float
    tolerance: float

    @property
    def correct(self) -> bool:
        return self.max_abs_error <= self.tolerance

    def report(self) -> dict:
        return {
            'scenario': asdict(self.scenario),
            'max_abs_error': self.max_abs_error,
            'tolerance': self.tolerance,
            'correct': self.correct,
            'phase_order_ok': self.transcript.phase_order_ok(),
            'phase_ms': {phase: round(self.transcript.phase_ms(phase), 3) for phase in PHASES},
        }


def bench_phases(scenario: BenchScenario) -> BenchResult:
    """
    Setup plus `rounds` weighting rounds on a synthetic federation. The train
    phase of each silo covers its local training and its encryption work.
    """
    from .allocation import allocate_uniform
    from .dataset import DatasetSpec, generate_dataset, training_federation
    from .fl_core import (
        ModelState, RoundRng, TrainConfig, local_delta, optimal_weights,
        silo_noise, silo_noise_std, weighted_aggregate, weighted_clip, PairDeltas,
    )
    from .models import SoftmaxRegression
    from .crypto import seeded_randfunc

    records = scenario.users * scenario.records_per_user
    allocation = allocate_uniform(records, scenario.users, scenario.silos, scenario.seed)
    spec = DatasetSpec(dim=scenario.dim, classes=2, records=records)
    federation = training_federation(generate_dataset(spec, allocation, scenario.seed))
    histogram = federation.histogram()

    session = SecureWeighting(histogram, key_bits=scenario.key_bits, precision=scenario.precision,
                              n_max=scenario.n_max, randfunc=seeded_randfunc(scenario.seed))
    session.setup()

    arch = SoftmaxRegression(scenario.dim, 2)
    model = ModelState(arch.init_params(np.random.default_rng(scenario.seed)), arch)
    config = TrainConfig(clip=scenario.clip, sigma=scenario.sigma)
    std = silo_noise_std('avg', config.sigma, config.clip, scenario.silos)
    weights = optimal_weights(histogram)
    worst = 0.0

    for r in range(1, scenario.rounds + 1):
        rng = RoundRng(scenario.seed, r)
        clipped = np.zeros((scenario.silos, scenario.users, model.dim))
        noise = np.zeros((scenario.silos, model.dim))
        for s in range(scenario.silos):
            with session.transcript.timed('train', silo_name(s), r):
                for u, shard in enumerate(federation.shards[s]):
                    if len(shard):
                        delta = local_delta(model, shard, config.eta_l, config.epochs, config.batch_size,
                                            rng.pair(s, u, 'train')).delta
                        clipped[s, u] = weighted_clip(delta, 1.0, config.clip)
                noise[s] = silo_noise(std, model.dim, rng.silo(s, 'noise'))

        secure = session.weighting_round(clipped, noise, r)
        plain = weighted_aggregate(PairDeltas(clipped, clipped, noise), weights)
        worst = max(worst, float(np.max(np.abs(secure - plain))))
        log.debug(f'bench round {r}: max |secure - plaintext| = {worst:.3e}')

    return BenchResult(scenario, session.transcript, worst, session.tolerance())
