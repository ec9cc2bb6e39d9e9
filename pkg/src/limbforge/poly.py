"""RNS polynomials and the limb-level primitive operations.

Every homomorphic operation in this package, whether run through the
reference evaluator or through compiled kernel plans, bottoms out in the
row primitives defined here, so the two execution paths agree bit for bit.

Basis ids: main primes are numbered 0..L; special (keyswitch) primes are
numbered SPECIAL_BASE + j so ids stay unique and sortable.
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .ntt import U64, apply_automorphism, automorphism_permutation, ntt_forward, ntt_inverse
from .params import CkksParams

SPECIAL_BASE = 1 << 16


class Domain(Enum):
    COEFF = "coeff"
    EVAL = "eval"


def prime_for_id(params: CkksParams, bid: int) -> int:
    if bid >= SPECIAL_BASE:
        return params.special_basis[bid - SPECIAL_BASE]
    return params.rns_basis[bid]


def main_ids(level: int) -> tuple[int, ...]:
    return tuple(range(level + 1))


def special_ids(params: CkksParams) -> tuple[int, ...]:
    return tuple(SPECIAL_BASE + j for j in range(params.num_special))


def extended_ids(params: CkksParams, level: int) -> tuple[int, ...]:
    return main_ids(level) + special_ids(params)


@dataclass
class RnsPolynomial:
    """Residue rows of one polynomial over a subset of the RNS basis."""

    limbs: np.ndarray  # (num_limbs, N) uint64 residues
    domain: Domain
    basis_ids: tuple[int, ...]

    def __post_init__(self):
        assert self.limbs.ndim == 2
        assert len(self.basis_ids) == self.limbs.shape[0]
        assert len(set(self.basis_ids)) == len(self.basis_ids)

    @property
    def N(self) -> int:
        return self.limbs.shape[1]

    def row(self, bid: int) -> np.ndarray:
        return self.limbs[self.basis_ids.index(bid)]

    def validate(self, params: CkksParams):
        for bid, row in zip(self.basis_ids, self.limbs):
            q = prime_for_id(params, bid)
            assert row.max(initial=0) < q, f"residue >= prime on base {bid}"


def zero_poly(params: CkksParams, basis_ids, domain=Domain.EVAL) -> RnsPolynomial:
    return RnsPolynomial(
        limbs=np.zeros((len(basis_ids), params.N), dtype=U64),
        domain=domain,
        basis_ids=tuple(basis_ids),
    )


# --- row primitives -------------------------------------------------------
#
# Each primitive takes uint64 rows below its prime and returns canonical
# residues. `out` may alias any input.

def row_add(a, b, q, out=None):
    out = np.add(a, b, out=out)
    return np.mod(out, U64(q), out=out)

def row_sub(a, b, q, out=None):
    out = np.subtract(U64(q), b, out=out)
    np.add(out, a, out=out)
    return np.mod(out, U64(q), out=out)

def row_mul(a, b, q, out=None):
    out = np.multiply(a, b, out=out)
    return np.mod(out, U64(q), out=out)

def row_mulacc(acc, a, b, q, out=None):
    """(acc + a*b) mod q; safe since acc < 2^28 and a*b < 2^56."""
    out = np.multiply(a, b, out=out)
    np.add(out, acc, out=out)
    return np.mod(out, U64(q), out=out)

def row_neg(a, q, out=None):
    out = np.subtract(U64(q), a, out=out)
    return np.mod(out, U64(q), out=out)

def row_scalar_mul(a, scalar, q, out=None):
    out = np.multiply(a, U64(scalar % q), out=out)
    return np.mod(out, U64(q), out=out)

def row_modstep(a, b, scalar, q, out=None):
    """(a - b) * scalar mod q: the closing step of rescale and mod-down."""
    out = np.subtract(U64(q), b, out=out)
    np.add(out, a, out=out)
    np.mod(out, U64(q), out=out)
    np.multiply(out, U64(scalar % q), out=out)
    return np.mod(out, U64(q), out=out)

def row_automorph(a, perm, out=None):
    return np.take(a, perm, out=out)

def row_ntt(a, q, out=None):
    res = ntt_forward(a, q)
    if out is not None:
        np.copyto(out, res)
        return out
    return res

def row_intt(a, q, out=None):
    res = ntt_inverse(a, q)
    if out is not None:
        np.copyto(out, res)
        return out
    return res


# --- exact fast base conversion -------------------------------------------

@lru_cache(maxsize=None)
def _bconv_tables(src_primes: tuple, dst_prime: int):
    big = 1
    for s in src_primes:
        big *= s
    inv = np.array([pow(big // s, -1, s) for s in src_primes], dtype=U64)
    weights = np.array([(big // s) % dst_prime for s in src_primes], dtype=U64)
    return inv, weights, big % dst_prime, big


def row_base_convert(src_rows, src_primes, dst_prime, out=None):
    """Exact CRT lift of the value held in src_rows, reduced mod dst_prime.

    Residues are scaled by the per-prime CRT inverses, combined against the
    destination prime, and corrected by the overflow count u = floor(sum
    y_i/s_i). u is computed in float64 with an exact integer fallback for
    coefficients that land within 2^-40 of an integer boundary, so the
    result always equals the arbitrary-precision lift.
    """
    src_primes = tuple(int(p) for p in src_primes)
    inv, weights, big_mod_dst, big = _bconv_tables(src_primes, int(dst_prime))
    q = U64(dst_prime)

    y = src_rows * inv[:, None] % np.array(src_primes, dtype=U64)[:, None]
    # products < 2^56, so up to 2^8 sources accumulate without overflow
    acc = (y * weights[:, None]).sum(axis=0, dtype=np.uint64) % q

    v = (y / np.array(src_primes, dtype=np.float64)[:, None]).sum(axis=0)
    u = np.floor(v)
    risky = np.abs(v - np.rint(v)) < 2.0**-40
    if risky.any():
        for j in np.nonzero(risky)[0]:
            total = sum(int(yi) * (big // s) for yi, s in zip(y[:, j], src_primes))
            u[j] = total // big
    u_term = u.astype(np.uint64) * U64(big_mod_dst % dst_prime) % q

    out = np.subtract(q, u_term, out=out)
    np.add(out, acc, out=out)
    return np.mod(out, q, out=out)


# --- polynomial-level helpers ---------------------------------------------

def _binary(op):
    def run(a: RnsPolynomial, b: RnsPolynomial, params: CkksParams) -> RnsPolynomial:
        assert a.basis_ids == b.basis_ids and a.domain == b.domain
        out = np.empty_like(a.limbs)
        for i, bid in enumerate(a.basis_ids):
            op(a.limbs[i], b.limbs[i], prime_for_id(params, bid), out=out[i])
        return RnsPolynomial(out, a.domain, a.basis_ids)
    return run

poly_add = _binary(row_add)
poly_sub = _binary(row_sub)
poly_mul = _binary(row_mul)


def poly_neg(a: RnsPolynomial, params: CkksParams) -> RnsPolynomial:
    out = np.empty_like(a.limbs)
    for i, bid in enumerate(a.basis_ids):
        row_neg(a.limbs[i], prime_for_id(params, bid), out=out[i])
    return RnsPolynomial(out, a.domain, a.basis_ids)


def poly_scalar_mul(a: RnsPolynomial, scalars, params: CkksParams) -> RnsPolynomial:
    """Per-limb scalar multiply; scalars maps basis id -> int."""
    out = np.empty_like(a.limbs)
    for i, bid in enumerate(a.basis_ids):
        row_scalar_mul(a.limbs[i], scalars[bid], prime_for_id(params, bid), out=out[i])
    return RnsPolynomial(out, a.domain, a.basis_ids)


def poly_ntt(a: RnsPolynomial, params: CkksParams) -> RnsPolynomial:
    assert a.domain == Domain.COEFF
    out = np.empty_like(a.limbs)
    for i, bid in enumerate(a.basis_ids):
        out[i] = ntt_forward(a.limbs[i], prime_for_id(params, bid))
    return RnsPolynomial(out, Domain.EVAL, a.basis_ids)


def poly_intt(a: RnsPolynomial, params: CkksParams) -> RnsPolynomial:
    assert a.domain == Domain.EVAL
    out = np.empty_like(a.limbs)
    for i, bid in enumerate(a.basis_ids):
        out[i] = ntt_inverse(a.limbs[i], prime_for_id(params, bid))
    return RnsPolynomial(out, Domain.COEFF, a.basis_ids)


def poly_automorph(a: RnsPolynomial, g: int, params: CkksParams) -> RnsPolynomial:
    assert a.domain == Domain.EVAL
    perm = automorphism_permutation(a.N, g)
    return RnsPolynomial(apply_automorphism(a.limbs, perm), Domain.EVAL, a.basis_ids)


def base_convert(a: RnsPolynomial, target_ids, params: CkksParams) -> RnsPolynomial:
    """Convert coefficient-domain residues onto target primes.

    Target rows whose prime already appears in the source pass through
    unchanged (the lift reduced into its own prime is the residue itself).
    """
    assert a.domain == Domain.COEFF
    src_primes = tuple(prime_for_id(params, b) for b in a.basis_ids)
    out = np.empty((len(target_ids), a.N), dtype=U64)
    for i, bid in enumerate(target_ids):
        if bid in a.basis_ids:
            out[i] = a.row(bid)
        else:
            row_base_convert(a.limbs, src_primes, prime_for_id(params, bid), out=out[i])
    return RnsPolynomial(out, Domain.COEFF, tuple(target_ids))


def mod_down(a: RnsPolynomial, target_ids, params: CkksParams) -> RnsPolynomial:
    """Divide by the product of the dropped primes, rounding toward the lift.

    Standard RNS mod-down: convert the dropped residues onto the kept primes
    and multiply the difference by the inverse of the dropped product. Used
    with target=main basis to strip the special basis after keyswitching.
    """
    drop_ids = tuple(b for b in a.basis_ids if b not in target_ids)
    assert drop_ids, "mod_down needs at least one dropped prime"
    assert all(b in a.basis_ids for b in target_ids)
    drop_primes = tuple(prime_for_id(params, b) for b in drop_ids)
    p_prod = 1
    for q in drop_primes:
        p_prod *= q

    drop_rows = np.stack([a.row(b) for b in drop_ids])
    if a.domain == Domain.EVAL:
        drop_coeff = np.stack([
            ntt_inverse(r, q) for r, q in zip(drop_rows, drop_primes)
        ])
    else:
        drop_coeff = drop_rows

    out = np.empty((len(target_ids), a.N), dtype=U64)
    for i, bid in enumerate(target_ids):
        q = prime_for_id(params, bid)
        conv = row_base_convert(drop_coeff, drop_primes, q)
        if a.domain == Domain.EVAL:
            conv = ntt_forward(conv, q)
        row_modstep(a.row(bid), conv, pow(p_prod, -1, q), q, out=out[i])
    return RnsPolynomial(out, a.domain, tuple(target_ids))


def rescale_poly(a: RnsPolynomial, params: CkksParams) -> RnsPolynomial:
    """Drop the top main limb, dividing the implicit value by its prime."""
    assert a.basis_ids == main_ids(len(a.basis_ids) - 1), "rescale wants a full main basis"
    return mod_down(a, a.basis_ids[:-1], params)
