"""Key material: ternary secrets, public keys, and hybrid keyswitch evalkeys.

Evalkeys follow the hybrid digit decomposition: digit j of the full main
basis encrypts P * (Q_L / Q_Dj) * s' over the extended basis, where P is the
special-prime product. The matching level-independent decomposition scalars
live in ckks.py. All sampling is driven by a seeded generator, so identical
seeds give bit-identical keys.
"""

from dataclasses import dataclass
import numpy as np

from .ntt import U64, ntt_forward
from .params import CkksParams
from .poly import (
    Domain,
    RnsPolynomial,
    extended_ids,
    main_ids,
    prime_for_id,
)


@dataclass(frozen=True)
class SecretKey:
    coeffs: np.ndarray          # (N,) int8 ternary, exactly h nonzeros
    eval_rows: dict             # basis id -> uint64[N] NTT(s) mod prime

    def eval_poly(self, ids) -> RnsPolynomial:
        rows = np.stack([self.eval_rows[b] for b in ids])
        return RnsPolynomial(rows, Domain.EVAL, tuple(ids))


@dataclass(frozen=True)
class PublicKey:
    b: RnsPolynomial
    a: RnsPolynomial


@dataclass(frozen=True)
class EvalKey:
    """Per-digit (b, a) pairs over the extended basis, tagged by purpose."""

    purpose: object             # "relin" or ("rot", galois_element)
    digits: tuple               # tuple of (RnsPolynomial, RnsPolynomial)

    def digit(self, j: int):
        return self.digits[j]


def _signed_rows(ints: np.ndarray, params: CkksParams, ids) -> np.ndarray:
    """Reduce small signed integers into each prime of `ids` (coeff domain)."""
    rows = np.empty((len(ids), params.N), dtype=U64)
    for i, bid in enumerate(ids):
        q = prime_for_id(params, bid)
        rows[i] = np.mod(ints, q).astype(U64)
    return rows


def sample_ternary(rng, N: int, weight: int) -> np.ndarray:
    coeffs = np.zeros(N, dtype=np.int8)
    support = rng.choice(N, size=weight, replace=False)
    coeffs[support] = rng.integers(0, 2, size=weight, dtype=np.int8) * 2 - 1
    return coeffs


def sample_gaussian(rng, N: int, sigma: float) -> np.ndarray:
    return np.rint(rng.normal(0.0, sigma, size=N)).astype(np.int64)


def sample_uniform_poly(rng, params: CkksParams, ids) -> RnsPolynomial:
    rows = np.empty((len(ids), params.N), dtype=U64)
    for i, bid in enumerate(ids):
        rows[i] = rng.integers(0, prime_for_id(params, bid), size=params.N, dtype=np.uint64)
    return RnsPolynomial(rows, Domain.EVAL, tuple(ids))


def _eval_rows_from_signed(ints, params, ids) -> RnsPolynomial:
    rows = _signed_rows(ints, params, ids)
    for i, bid in enumerate(ids):
        rows[i] = ntt_forward(rows[i], prime_for_id(params, bid))
    return RnsPolynomial(rows, Domain.EVAL, tuple(ids))


def digit_hat_factor(params: CkksParams, j: int) -> int:
    """Q_L / Q_Dj: the CRT complement of digit j over the full main basis."""
    d = params.ks.d
    f = 1
    for i in range(params.max_level + 1):
        if i % d != j:
            f *= params.rns_basis[i]
    return f


def digit_key_factor(params: CkksParams, j: int) -> int:
    """P * Q_L / Q_Dj: the constant the digit-j evalkey scales s' by."""
    return params.special_product() * digit_hat_factor(params, j)


def _encrypt_key_poly(rng, params, sk, target_rows: dict, factor: int, ids):
    """(b, a) with b = -a*s + e + factor*target over the given basis ids."""
    a = sample_uniform_poly(rng, params, ids)
    e = _eval_rows_from_signed(sample_gaussian(rng, params.N, params.sigma), params, ids)
    rows = np.empty((len(ids), params.N), dtype=U64)
    for i, bid in enumerate(ids):
        q = prime_for_id(params, bid)
        qv = U64(q)
        t = a.limbs[i] * sk.eval_rows[bid] % qv          # a*s
        t = (qv - t + e.limbs[i]) % qv                    # -a*s + e
        rows[i] = (t + target_rows[bid] * U64(factor % q) % qv) % qv
    return RnsPolynomial(rows, Domain.EVAL, tuple(ids)), a


def make_secret(params: CkksParams, rng) -> SecretKey:
    coeffs = sample_ternary(rng, params.N, params.hamming_weight)
    ids = extended_ids(params, params.max_level)
    evp = _eval_rows_from_signed(coeffs.astype(np.int64), params, ids)
    eval_rows = {bid: evp.limbs[i] for i, bid in enumerate(ids)}
    return SecretKey(coeffs=coeffs, eval_rows=eval_rows)


def make_public_key(params: CkksParams, sk: SecretKey, rng) -> PublicKey:
    ids = main_ids(params.max_level)
    zero = {bid: np.zeros(params.N, dtype=U64) for bid in ids}
    b, a = _encrypt_key_poly(rng, params, sk, zero, 0, ids)
    return PublicKey(b=b, a=a)


def _make_evalkey(params, sk, target_eval_rows: dict, purpose, rng) -> EvalKey:
    ids = extended_ids(params, params.max_level)
    digits = []
    for j in range(params.ks.d):
        factor = digit_key_factor(params, j)
        b, a = _encrypt_key_poly(rng, params, sk, target_eval_rows, factor, ids)
        digits.append((b, a))
    return EvalKey(purpose=purpose, digits=tuple(digits))


def make_relin_key(params: CkksParams, sk: SecretKey, rng) -> EvalKey:
    ids = extended_ids(params, params.max_level)
    s_sq = {}
    for bid in ids:
        q = U64(prime_for_id(params, bid))
        s_sq[bid] = sk.eval_rows[bid] * sk.eval_rows[bid] % q
    return _make_evalkey(params, sk, s_sq, "relin", rng)


def make_rotation_key(params: CkksParams, sk: SecretKey, steps: int, rng) -> EvalKey:
    """Evalkey switching sigma_g(s) back to s, for g = 5**steps mod 2N."""
    from .ntt import automorphism_permutation, galois_element

    steps = steps % params.n
    if steps == 0:
        raise ValueError("identity rotation needs no key")
    g = galois_element(params.N, steps)
    perm = automorphism_permutation(params.N, g)
    ids = extended_ids(params, params.max_level)
    rot_s = {bid: sk.eval_rows[bid][perm] for bid in ids}
    return _make_evalkey(params, sk, rot_s, ("rot", g), rng)


def keygen(params: CkksParams, seed=None):
    """Deterministic (secret, public, relinearization) key generation."""
    seed = params.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    sk = make_secret(params, rng)
    pk = make_public_key(params, sk, rng)
    rlk = make_relin_key(params, sk, rng)
    return sk, pk, rlk
