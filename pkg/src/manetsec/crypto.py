"""Number-theoretic primitives for identity-secured ad hoc networking.

Textbook RSA over bare integers on purpose: the chained aggregate signature
signs across different moduli and needs direct access to (N, e, d), which
padded library RSA does not expose. Key sizes are configurable down to toy
widths so tests can pin hand-checkable values.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import random
from dataclasses import dataclass
from typing import Sequence, Tuple

DIGEST_BYTES = 32
DEFAULT_KEY_BITS = 512
DEFAULT_DH_BITS = 256
RSA_PUBLIC_EXPONENT = 65537

_SMALL_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
                 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113,
                 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181,
                 191, 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251]

# Deterministic Miller-Rabin bases; enough for the toy widths used in tests,
# and supplemented with rng-drawn bases for production widths.
_MR_BASES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37]


def digest(data: bytes) -> bytes:
    """Fixed 256-bit hash used for node ids, message hashes, and tag input."""
    return hashlib.sha256(data).digest()


def digest_int(data: bytes) -> int:
    return int.from_bytes(data, "big")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed for a named substream of a run's master seed."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


@dataclass(frozen=True)
class RsaKeyPair:
    """One RSA pair; a node holds two with distinct moduli (sign + encrypt)."""

    n: int
    e: int
    d: int

    @property
    def public(self) -> Tuple[int, int]:
        return (self.n, self.e)


@dataclass(frozen=True)
class AggregateSignature:
    """Chained signature state: current value plus per-step overflow bits.

    overflow_bits[i] records whether signer i+1 had to subtract its modulus
    from the incoming value before signing; verification cannot re-add the
    modulus without it. len(overflow_bits) == signer_count - 1 always.
    """

    value: int
    overflow_bits: Tuple[int, ...]
    signer_count: int


@dataclass(frozen=True)
class DhParams:
    p: int
    g: int
    r: int


@dataclass(frozen=True)
class SessionKey:
    value: int

    @property
    def key_bytes(self) -> bytes:
        width = max(1, (self.value.bit_length() + 7) // 8)
        return self.value.to_bytes(width, "big")


def _miller_rabin(n: int, base: int) -> bool:
    if base % n == 0:
        return True
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    x = pow(base, d, n)
    if x in (1, n - 1):
        return True
    for _ in range(s - 1):
        x = (x * x) % n
        if x == n - 1:
            return True
    return False


def is_probable_prime(n: int, rng: random.Random | None = None) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    for base in _MR_BASES:
        if not _miller_rabin(n, base):
            return False
    if rng is not None and n.bit_length() > 80:
        for _ in range(8):
            if not _miller_rabin(n, rng.randrange(2, n - 1)):
                return False
    return True


def generate_prime(bits: int, rng: random.Random) -> int:
    """Random prime with the top two bits set, so products keep exact width."""
    if bits < 8:
        raise ValueError("prime width too small: %d" % bits)
    while True:
        cand = rng.getrandbits(bits)
        cand |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if is_probable_prime(cand, rng):
            return cand


def generate_keypair(bits: int, rng: random.Random,
                     e: int = RSA_PUBLIC_EXPONENT) -> RsaKeyPair:
    while True:
        p = generate_prime(bits // 2, rng)
        q = generate_prime(bits - bits // 2, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        phi = (p - 1) * (q - 1)
        if phi % e == 0 or _gcd(e, phi) != 1:
            continue
        return RsaKeyPair(n=n, e=e, d=pow(e, -1, phi))


def _gcd(a: int, b: int) -> int:
    while b:
        a, b = b, a % b
    return a


def generate_node_keys(seed: int, key_bits: int = DEFAULT_KEY_BITS
                       ) -> Tuple[RsaKeyPair, RsaKeyPair]:
    """Deterministic (signing, encryption) pair for one node.

    Same-width moduli are a correctness requirement, not cosmetics: the
    aggregate step subtracts the local modulus at most once, which is only
    sound when every signature value fits within one modulus width.
    """
    if key_bits < 64 or key_bits % 2 != 0:
        raise ValueError("key_bits must be even and >= 64, got %d" % key_bits)
    rng = random.Random(seed)
    signing = generate_keypair(key_bits, rng)
    while True:
        encryption = generate_keypair(key_bits, rng)
        if encryption.n != signing.n:
            return signing, encryption


# --- sequential aggregate signatures ---------------------------------------

def rsa_sign_first(h: int, key: RsaKeyPair) -> AggregateSignature:
    """Originator signature: sigma = (h mod N)^d mod N."""
    value = pow(h % key.n, key.d, key.n)
    return AggregateSignature(value=value, overflow_bits=(), signer_count=1)


def sas_aggregate_step(prev: AggregateSignature, h: int,
                       key: RsaKeyPair) -> AggregateSignature:
    """Fold one more signer over a predecessor signature.

    The incoming value may exceed this signer's modulus by less than one
    modulus width; subtract once and record the overflow bit so the verifier
    can undo it.
    """
    carried = prev.value
    bit = 0
    if carried >= key.n:
        carried -= key.n
        bit = 1
    value = pow((carried + h % key.n) % key.n, key.d, key.n)
    return AggregateSignature(value=value,
                              overflow_bits=prev.overflow_bits + (bit,),
                              signer_count=prev.signer_count + 1)


def sas_unwind_step(sigma: int, h: int, public: Tuple[int, int],
                    bit: int) -> int:
    """Invert one aggregate step, recovering the predecessor value."""
    n, e = public
    sig_hat = (pow(sigma, e, n) - h) % n
    return sig_hat + bit * n


def sas_unwind_verify(agg: AggregateSignature,
                      per_signer: Sequence[Tuple[int, Tuple[int, int]]]) -> bool:
    """Unwind last-to-first and check the originator relation.

    per_signer lists (hash, public key) in signing order, originator first.
    A count/shape mismatch is malformed input and raises; a failed relation
    returns False.
    """
    if len(per_signer) != agg.signer_count:
        raise ValueError("signer list length %d != signer_count %d"
                         % (len(per_signer), agg.signer_count))
    if len(agg.overflow_bits) != agg.signer_count - 1:
        raise ValueError("overflow bit count %d != signer_count-1 %d"
                         % (len(agg.overflow_bits), agg.signer_count - 1))
    sigma = agg.value
    for i in range(agg.signer_count - 1, 0, -1):
        h, public = per_signer[i]
        n = public[0]
        if not 0 <= sigma < n:
            return False
        sigma = sas_unwind_step(sigma, h, public, agg.overflow_bits[i - 1])
    h0, public0 = per_signer[0]
    n0, e0 = public0
    if not 0 <= sigma < n0:
        return False
    return pow(sigma, e0, n0) == h0 % n0


# --- block encryption of key-exchange values --------------------------------

def rsa_encrypt(m: int, public: Tuple[int, int]) -> int:
    n, e = public
    if not 0 <= m < n:
        raise ValueError("plaintext block out of range for modulus")
    return pow(m, e, n)


def rsa_decrypt(c: int, key: RsaKeyPair) -> int:
    if not 0 <= c < key.n:
        raise ValueError("ciphertext block out of range for modulus")
    return pow(c, key.d, key.n)


# --- session key exchange ---------------------------------------------------

def generate_dh_group(bits: int, rng: random.Random) -> Tuple[int, int]:
    """Safe prime p = 2q + 1 of exact width, with the smallest usable base."""
    if bits < 8:
        raise ValueError("group width too small: %d" % bits)
    while True:
        q = rng.getrandbits(bits - 1)
        q |= (1 << (bits - 2)) | 1
        p = 2 * q + 1
        if any(p % s == 0 for s in _SMALL_PRIMES if p > s):
            continue
        if not is_probable_prime(q, rng) or not is_probable_prime(p, rng):
            continue
        for g in (2, 3, 5, 7, 11, 13):
            if pow(g, 2, p) != 1 and pow(g, q, p) != 1:
                return p, g


def make_dh_params(p: int, g: int, rng: random.Random) -> DhParams:
    return DhParams(p=p, g=g, r=rng.randrange(2, p - 1))


def dh_public(params: DhParams) -> int:
    return pow(params.g, params.r, params.p)


def dh_shared(peer_public: int, params: DhParams) -> SessionKey:
    if not 0 < peer_public < params.p:
        raise ValueError("peer public value out of range")
    return SessionKey(pow(peer_public, params.r, params.p))


# --- authentication tags ----------------------------------------------------

def mac_tag(message: bytes, key: SessionKey) -> bytes:
    return _hmac.new(key.key_bytes, message, hashlib.sha256).digest()


def mac_verify(message: bytes, key: SessionKey, tag: bytes) -> bool:
    return _hmac.compare_digest(mac_tag(message, key), tag)
