"""CKKS parameter synthesis: RNS bases, keyswitch digit layout, desk-scale defaults.

Primes are capped below 2**28 so a product of two residues fits in 56 bits,
leaving 8 bits of lazy-accumulation headroom in a 64-bit word.
"""

from dataclasses import dataclass
from fractions import Fraction
from math import ceil

from .errors import NoSuchPrimes
from .modmath import is_prime

PRIME_BITS = 28
PRIME_CAP = 1 << PRIME_BITS
WORD_BITS = 32

DEFAULT_SCALE = 1 << 20
DEFAULT_HAMMING_WEIGHT = 64
DEFAULT_SIGMA = 3.2


@dataclass(frozen=True)
class KeySwitchConfig:
    """Digit layout for hybrid keyswitching.

    Limb i of the main basis belongs to digit (i % d); the round-robin
    assignment keeps all digits populated at low levels.
    """

    d: int

    def digit_of(self, limb_index: int) -> int:
        return limb_index % self.d

    def digits_at_level(self, level: int) -> list[list[int]]:
        """Non-empty digit groups over the active limbs 0..level."""
        groups = [[] for _ in range(self.d)]
        for i in range(level + 1):
            groups[i % self.d].append(i)
        return [g for g in groups if g]


@dataclass(frozen=True)
class CkksParams:
    N: int
    rns_basis: tuple[int, ...]
    special_basis: tuple[int, ...]
    scale: Fraction
    hamming_weight: int
    ks: KeySwitchConfig
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    word_bits: int = WORD_BITS

    def __post_init__(self):
        allp = self.rns_basis + self.special_basis
        if len(set(allp)) != len(allp):
            raise ValueError("primes must be pairwise distinct")
        for q in allp:
            if q >= PRIME_CAP:
                raise ValueError(f"prime {q} >= 2^{PRIME_BITS}")
            if q % (2 * self.N) != 1:
                raise ValueError(f"prime {q} not NTT-friendly for N={self.N}")
        if self.scale >= min(self.rns_basis):
            raise ValueError("scale must stay below the smallest main prime")

    @property
    def n(self) -> int:
        """Slot count."""
        return self.N // 2

    @property
    def max_level(self) -> int:
        return len(self.rns_basis) - 1

    @property
    def num_special(self) -> int:
        return len(self.special_basis)

    def extended_basis(self, level: int) -> tuple[int, ...]:
        """Active main primes plus the special primes, as used by keyswitching."""
        return self.rns_basis[: level + 1] + self.special_basis

    def special_product(self) -> int:
        p = 1
        for q in self.special_basis:
            p *= q
        return p

    def main_product(self, level: int) -> int:
        p = 1
        for q in self.rns_basis[: level + 1]:
            p *= q
        return p


def _scan_down(N: int, count: int, below: int = PRIME_CAP, exclude=()):
    """The `count` largest primes p = 1 (mod 2N) below `below`."""
    step = 2 * N
    out = []
    p = below - (below - 1) % step  # largest candidate <= below-1
    while p > step and len(out) < count:
        if p not in exclude and is_prime(p):
            out.append(p)
        p -= step
    return out


def _scan_up_from(N: int, start: int, count: int, exclude=()):
    """The `count` smallest primes p = 1 (mod 2N) with start < p < 2^28."""
    step = 2 * N
    out = []
    p = start + step - (start % step) + 1
    if p <= start:
        p += step
    while p < PRIME_CAP and len(out) < count:
        if p not in exclude and is_prime(p):
            out.append(p)
        p += step
    return out


def gen_params(
    N: int,
    num_levels: int,
    d: int = 3,
    seed: int = 0,
    scale=DEFAULT_SCALE,
    hamming_weight: int = DEFAULT_HAMMING_WEIGHT,
) -> CkksParams:
    """Synthesize a desk-scale parameter set.

    Produces num_levels+1 main primes and ceil((num_levels+1)/d) special
    primes, all NTT-friendly for N and below 2**28. The first main prime is
    the largest available (decryption headroom), the remaining main primes
    hug the scale so rescaling keeps scales stable, and the special primes
    take the largest remaining candidates. Deterministic for fixed inputs.
    """
    if N < 16 or N & (N - 1):
        raise ValueError("N must be a power of two, at least 16")
    if d < 1:
        raise ValueError("digit count must be >= 1")
    scale = Fraction(scale)

    num_main = num_levels + 1
    num_sp = ceil(num_main / d)
    top = _scan_down(N, 1 + num_sp)
    if len(top) < 1 + num_sp:
        raise NoSuchPrimes(
            f"only {len(top)} NTT-friendly primes below 2^{PRIME_BITS} for "
            f"N={N}; need at least {num_main + num_sp} (shrink N or levels)"
        )
    q0, special = top[0], top[1:]

    scale_primes = _scan_up_from(N, int(scale), num_levels, exclude=set(top))
    if len(scale_primes) < num_levels:
        raise NoSuchPrimes(
            f"not enough NTT-friendly primes above the scale for N={N}: "
            f"found {len(scale_primes)}, need {num_levels} (shrink N or levels)"
        )

    return CkksParams(
        N=N,
        rns_basis=(q0, *scale_primes),
        special_basis=tuple(sorted(special)),
        scale=scale,
        hamming_weight=hamming_weight,
        ks=KeySwitchConfig(d=d),
        seed=seed,
    )
