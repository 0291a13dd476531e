"""
Cryptographic building blocks for the private weighting protocol:
Paillier, fixed-point encoding over Z_n, DH pairwise secrets and an
AES-CTR generator that expands a secret into masks below n.
"""
import math
import hashlib
import logging
from functools import reduce
from dataclasses import dataclass
from decimal import Decimal, ROUND_FLOOR, localcontext
from typing import Callable, Iterable, Optional, Tuple

import numpy as np
from Crypto.Util import number
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import dh
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DomainError, EncodingOverflowError, KeyGenerationError, NotInvertibleError

log = logging.getLogger('SecureProtocol')

DEFAULT_KEY_BITS = 3072
MIN_KEY_BITS = 128
KEYGEN_ATTEMPTS = 64
DECIMAL_PRECISION = 2048

# RFC 3526 2048-bit MODP group 14
DH_GROUP_14 = (
    int(
        "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
        "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
        "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
        "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
        "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
        "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
        "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
        "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
        "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
        "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
        "15728E5A8AACAA68FFFFFFFFFFFFFFFF", 16
    ),
    2,
)

RandFunc = Callable[[int], bytes]


def seeded_randfunc(seed: int) -> RandFunc:
    """Deterministic byte source for reproducible test keys. Not for real deployments."""
    gen = np.random.default_rng(seed)
    return lambda size: gen.bytes(size)


# Paillier
############################################

@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    g: int

    @property
    def n_square(self) -> int:
        return self.n * self.n

    def encrypt(self, m: int, randfunc: Optional[RandFunc] = None) -> int:
        n, nsq = self.n, self.n_square
        while True:
            r = number.getRandomRange(1, n, randfunc)
            if math.gcd(r, n) == 1:
                break
        # g = n + 1, so g^m = 1 + m n (mod n^2)
        return (1 + (m % n) * n) * pow(r, n, nsq) % nsq

    def add(self, c1: int, c2: int) -> int:
        return c1 * c2 % self.n_square

    def add_plain(self, c: int, m: int) -> int:
        return c * (1 + (m % self.n) * self.n) % self.n_square

    def scalar_mul(self, c: int, k: int) -> int:
        return pow(c, k % self.n, self.n_square)


@dataclass(frozen=True)
class PaillierKeypair:
    public: PaillierPublicKey
    lam: int
    mu: int
    key_bits: int

    @property
    def n(self) -> int:
        return self.public.n

    def encrypt(self, m: int, randfunc: Optional[RandFunc] = None) -> int:
        return self.public.encrypt(m, randfunc)

    def decrypt(self, c: int) -> int:
        n = self.public.n
        x = pow(c, self.lam, self.public.n_square)
        return (x - 1) // n * self.mu % n


def paillier_keygen(key_bits: int = DEFAULT_KEY_BITS, randfunc: Optional[RandFunc] = None) -> PaillierKeypair:
    if key_bits < MIN_KEY_BITS:
        raise DomainError('key_bits', key_bits, f'at least {MIN_KEY_BITS} bits')
    if key_bits < DEFAULT_KEY_BITS:
        log.warning(f'Paillier key of {key_bits} bits is for testing only ({DEFAULT_KEY_BITS} recommended)')

    half = key_bits // 2
    for attempt in range(1, KEYGEN_ATTEMPTS + 1):
        p = number.getPrime(half, randfunc)
        q = number.getPrime(key_bits - half, randfunc)
        n = p * q
        if p == q or n.bit_length() != key_bits or math.gcd(n, (p - 1) * (q - 1)) != 1:
            log.debug(f'keygen attempt {attempt} rejected')
            continue
        lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
        mu = number.inverse(lam, n)
        return PaillierKeypair(PaillierPublicKey(n, n + 1), lam, mu, key_bits)
    raise KeyGenerationError(KEYGEN_ATTEMPTS)


# Field arithmetic and fixed point
############################################

def mod_inverse(a: int, n: int) -> int:
    if math.gcd(a, n) != 1:
        raise NotInvertibleError(a)
    return number.inverse(a, n)


def lcm_up_to(n_max: int) -> int:
    """LCM of 1..n_max."""
    if n_max < 1:
        raise DomainError('n_max', n_max, 'n_max >= 1')
    return reduce(math.lcm, range(1, n_max + 1), 1)


def lcm_of(counts: Iterable[int]) -> int:
    """LCM of a restricted set of admissible record counts."""
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise DomainError('count_set', counts, 'positive counts')
    return reduce(math.lcm, counts, 1)


def _decimal(value) -> Decimal:
    return Decimal(repr(float(value))) if not isinstance(value, int) else Decimal(value)


def encode(x: float, precision: float, n: int) -> int:
    """floor(x/P) mapped into Z_n (negatives wrap)."""
    with localcontext() as ctx:
        ctx.prec = DECIMAL_PRECISION
        scaled = (_decimal(x) / _decimal(precision)).to_integral_value(rounding=ROUND_FLOOR)
    value = int(scaled)
    if 2 * abs(value) >= n:
        raise EncodingOverflowError(x, precision)
    return value % n


def signed_lift(v: int, n: int) -> int:
    return v - n if v > n // 2 else v


def decode(v: int, precision: float, c_lcm: int, n: int) -> float:
    """Signed lift, divide by C_LCM, multiply by P."""
    with localcontext() as ctx:
        ctx.prec = DECIMAL_PRECISION
        return float(Decimal(signed_lift(v % n, n)) / Decimal(c_lcm) * _decimal(precision))


# Pairwise secrets and masks
############################################

class DhParty:
    """Finite-field DH key agreement; the shared secret is stretched with HKDF-SHA256."""

    def __init__(self, group: Tuple[int, int] = DH_GROUP_14):
        self.parameters = dh.DHParameterNumbers(group[0], group[1]).parameters()
        self._private_key = self.parameters.generate_private_key()

    @property
    def public_number(self) -> int:
        return self._private_key.public_key().public_numbers().y

    def shared_key(self, peer_public_number: int, info: bytes = b'uldpfl pairwise mask') -> bytes:
        peer = dh.DHPublicNumbers(peer_public_number, self.parameters.parameter_numbers()).public_key()
        secret = self._private_key.exchange(peer)
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(secret)


class MaskStream:
    """AES-256-CTR keystream turned into uniform integers below n by rejection sampling."""

    def __init__(self, key: bytes, label: bytes):
        nonce = hashlib.sha256(label).digest()[:16]
        self._encryptor = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()

    def keystream(self, size: int) -> bytes:
        return self._encryptor.update(b'\x00' * size)

    def below(self, n: int) -> int:
        bits = n.bit_length()
        size = (bits + 7) // 8
        excess = size * 8 - bits
        while True:
            value = int.from_bytes(self.keystream(size), 'big') >> excess
            if value < n:
                return value
