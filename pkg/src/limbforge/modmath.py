"""Modular arithmetic helpers: primality, inverses, roots of unity, CRT."""

import numpy as np

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for all n < 3.3 * 10^24."""
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def mod_inverse(a: int, m: int) -> int:
    """Inverse of a modulo m; Python's pow handles the extended gcd."""
    return pow(a, -1, m)


def find_generator(q: int) -> int:
    """Smallest generator of the multiplicative group mod prime q."""
    order = q - 1
    factors = _prime_factors(order)
    for g in range(2, q):
        if all(pow(g, order // f, q) != 1 for f in factors):
            return g
    raise ValueError(f"no generator found for {q}")


def _prime_factors(n: int) -> list[int]:
    out = []
    d = 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


def primitive_root_of_unity(order: int, q: int) -> int:
    """A primitive `order`-th root of unity mod prime q (requires order | q-1)."""
    if (q - 1) % order != 0:
        raise ValueError(f"{order} does not divide {q}-1")
    g = find_generator(q)
    psi = pow(g, (q - 1) // order, q)
    assert pow(psi, order, q) == 1 and pow(psi, order // 2, q) != 1
    return psi


def bit_reverse_indices(n: int) -> np.ndarray:
    """Permutation mapping index i to its bit reversal over log2(n) bits."""
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def crt_reconstruct_centered(residue_rows, primes) -> list[int]:
    """Exact CRT lift of residue rows into centered integers in (-Q/2, Q/2].

    Arbitrary-precision reference used by decode and by base-conversion
    oracles; rows are per-prime residue vectors of equal length.
    """
    primes = [int(p) for p in primes]
    q_prod = 1
    for p in primes:
        q_prod *= p
    coeffs = [0] * len(residue_rows[0])
    for row, p in zip(residue_rows, primes):
        qi_hat = q_prod // p
        factor = qi_hat * mod_inverse(qi_hat % p, p)
        for j, r in enumerate(row):
            coeffs[j] = (coeffs[j] + int(r) * factor) % q_prod
    half = q_prod // 2
    return [c - q_prod if c > half else c for c in coeffs]
