"""Negacyclic number theoretic transform over NTT-friendly primes.

The forward transform is a Cooley-Tukey butterfly network taking coefficient
order to bit-reversed evaluation order; the inverse is the matching
Gentleman-Sande network. Twiddle factors are stored pre-permuted in
bit-reversed order, so every butterfly stage reads one contiguous slice of
the table. Evaluation-domain storage throughout the package uses this
bit-reversed ordering, under which the values of a stride-periodic plaintext
repeat in contiguous blocks.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .modmath import bit_reverse_indices, mod_inverse, primitive_root_of_unity

U64 = np.uint64


@dataclass(frozen=True)
class NttTables:
    """Per-prime twiddle data for ring dimension N.

    psi_brv[i] = psi ** bitrev(i) for a fixed primitive 2N-th root psi; the
    butterflies of the stage with t blocks read psi_brv[t:2t]. ipsi_brv holds
    the same layout for psi^-1, and n_inv folds the final 1/N scaling.
    """

    N: int
    q: int
    psi: int
    psi_brv: np.ndarray
    ipsi_brv: np.ndarray
    n_inv: int

    def forward_stage_slice(self, t: int) -> np.ndarray:
        return self.psi_brv[t : 2 * t]

    def inverse_stage_slice(self, t: int) -> np.ndarray:
        return self.ipsi_brv[t : 2 * t]


@lru_cache(maxsize=None)
def ntt_tables(N: int, q: int) -> NttTables:
    psi = primitive_root_of_unity(2 * N, q)
    rev = bit_reverse_indices(N)
    powers = np.empty(N, dtype=U64)
    ipowers = np.empty(N, dtype=U64)
    ipsi = mod_inverse(psi, q)
    acc = 1
    iacc = 1
    fwd = [0] * N
    inv = [0] * N
    for i in range(N):
        fwd[i] = acc
        inv[i] = iacc
        acc = acc * psi % q
        iacc = iacc * ipsi % q
    for i in range(N):
        powers[i] = fwd[rev[i]]
        ipowers[i] = inv[rev[i]]
    return NttTables(
        N=N, q=q, psi=psi, psi_brv=powers, ipsi_brv=ipowers,
        n_inv=mod_inverse(N, q),
    )


def ntt_forward(x: np.ndarray, q: int, tables: NttTables | None = None) -> np.ndarray:
    """Forward negacyclic NTT on the last axis (coefficients -> bit-reversed evals)."""
    N = x.shape[-1]
    tables = tables or ntt_tables(N, q)
    qv = U64(q)
    a = np.ascontiguousarray(x, dtype=U64).copy()
    lead = a.shape[:-1]
    t, m = 1, N // 2
    while m >= 1:
        w = tables.psi_brv[t : 2 * t]
        blk = a.reshape(*lead, t, 2, m)
        u = blk[..., 0, :]
        v = blk[..., 1, :] * w[:, None] % qv
        blk[..., 1, :] = (u + (qv - v)) % qv
        blk[..., 0, :] = (u + v) % qv
        t, m = t * 2, m // 2
    return a


def ntt_inverse(x: np.ndarray, q: int, tables: NttTables | None = None) -> np.ndarray:
    """Inverse transform (bit-reversed evals -> coefficients), exact inverse of ntt_forward."""
    N = x.shape[-1]
    tables = tables or ntt_tables(N, q)
    qv = U64(q)
    a = np.ascontiguousarray(x, dtype=U64).copy()
    lead = a.shape[:-1]
    t, m = N // 2, 1
    while m < N:
        w = tables.ipsi_brv[t : 2 * t]
        blk = a.reshape(*lead, t, 2, m)
        u = blk[..., 0, :].copy()
        v = blk[..., 1, :]
        blk[..., 0, :] = (u + v) % qv
        blk[..., 1, :] = (u + (qv - v)) % qv * w[:, None] % qv
        t, m = t // 2, m * 2
    return a * U64(tables.n_inv) % qv


@lru_cache(maxsize=None)
def automorphism_permutation(N: int, g: int) -> np.ndarray:
    """Index permutation applying X -> X**g to evaluation-domain storage.

    g must be odd (a valid automorphism index modulo 2N). Because evaluation
    order is bit-reversed, the permutation is the same for every prime.
    """
    if g % 2 == 0:
        raise ValueError("automorphism index must be odd")
    rev = bit_reverse_indices(N)
    two_n = 2 * N
    exp = (2 * rev + 1) * g % two_n
    src_k = (exp - 1) // 2
    return rev[src_k]


def apply_automorphism(x: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Gather rows of evaluation-domain data through an automorphism table."""
    return x[..., perm]


@lru_cache(maxsize=None)
def galois_element(N: int, steps: int) -> int:
    """Automorphism index realizing a cyclic left rotation by `steps` slots."""
    return pow(5, steps % (N // 2), 2 * N)
