"""Canonical-embedding encoding between real slot vectors and RNS plaintexts.

Slot j of a plaintext corresponds to evaluating the polynomial at the
primitive 2N-th root zeta**(5**j); the conjugate orbit fills the remaining
evaluation points, which keeps coefficients real. Both directions run
through length-N FFTs rather than explicit Vandermonde matrices.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ScaleOverflow
from .modmath import crt_reconstruct_centered
from .ntt import U64, ntt_forward
from .params import CkksParams
from .poly import Domain, RnsPolynomial, main_ids


@lru_cache(maxsize=None)
def _slot_eval_indices(N: int) -> np.ndarray:
    """FFT bin k(j) holding the evaluation at zeta**(5**j), for each slot j."""
    two_n = 2 * N
    t = 1
    idx = np.empty(N // 2, dtype=np.int64)
    for j in range(N // 2):
        idx[j] = (t - 1) // 2
        t = t * 5 % two_n
    return idx


@lru_cache(maxsize=None)
def _conj_eval_indices(N: int) -> np.ndarray:
    two_n = 2 * N
    t = 1
    idx = np.empty(N // 2, dtype=np.int64)
    for j in range(N // 2):
        idx[j] = (two_n - t - 1) // 2
        t = t * 5 % two_n
    return idx


@lru_cache(maxsize=None)
def _half_turn(N: int) -> np.ndarray:
    """exp(-i*pi*c/N) weights linking the negacyclic ring to a plain DFT."""
    return np.exp(-1j * np.pi * np.arange(N) / N)


def embed_inverse(slots: np.ndarray, N: int) -> np.ndarray:
    """Real coefficient vector whose canonical embedding equals `slots`."""
    n = N // 2
    z = np.zeros(n, dtype=np.complex128)
    z[: len(slots)] = slots
    evals = np.zeros(N, dtype=np.complex128)
    evals[_slot_eval_indices(N)] = z
    evals[_conj_eval_indices(N)] = np.conj(z)
    coeffs = np.fft.fft(evals) * _half_turn(N) / N
    return coeffs.real


def embed_forward(coeffs: np.ndarray, N: int) -> np.ndarray:
    """Evaluate real coefficients at the slot roots (inverse of embed_inverse)."""
    evals = np.fft.ifft(coeffs * np.conj(_half_turn(N))) * N
    return evals[_slot_eval_indices(N)]


@dataclass
class Plaintext:
    poly: RnsPolynomial
    scale: Fraction
    level: int
    compression: Optional[object] = None  # CompressionDescriptor when compressed

    def __post_init__(self):
        if self.compression is None:
            assert self.level + 1 == self.poly.limbs.shape[0]


def encode(values, params: CkksParams, level: Optional[int] = None, scale=None) -> Plaintext:
    """Encode up to n real values into an evaluation-domain plaintext."""
    level = params.max_level if level is None else level
    scale = Fraction(params.scale if scale is None else scale)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) > params.n:
        raise ValueError(f"need a vector of at most {params.n} values")

    coeffs = embed_inverse(values, params.N) * float(scale)
    rounded = np.rint(coeffs)
    headroom = params.main_product(level) // 4
    if np.abs(rounded).max(initial=0.0) >= headroom:
        raise ScaleOverflow(
            f"encoded coefficients exceed modulus headroom at level {level}"
        )
    ints = rounded.astype(np.int64)

    ids = main_ids(level)
    limbs = np.empty((level + 1, params.N), dtype=U64)
    for i, bid in enumerate(ids):
        q = params.rns_basis[bid]
        limbs[i] = np.mod(ints, q).astype(U64)
        limbs[i] = ntt_forward(limbs[i], q)
    return Plaintext(RnsPolynomial(limbs, Domain.EVAL, ids), scale, level)


def decode(pt_or_poly, params: CkksParams, scale=None, length: Optional[int] = None) -> np.ndarray:
    """Decode a plaintext (or a coefficient/eval poly plus scale) to real slots."""
    if isinstance(pt_or_poly, Plaintext):
        poly, scale = pt_or_poly.poly, pt_or_poly.scale
    else:
        poly = pt_or_poly
        assert scale is not None
    scale = Fraction(scale)

    from .poly import poly_intt, prime_for_id  # local import avoids cycle at module load

    coeff = poly if poly.domain == Domain.COEFF else poly_intt(poly, params)
    primes = [prime_for_id(params, b) for b in coeff.basis_ids]
    centered = crt_reconstruct_centered(coeff.limbs, primes)
    floats = np.array([float(Fraction(c) / scale) for c in centered])
    slots = embed_forward(floats, params.N).real
    return slots[: length or params.n]
