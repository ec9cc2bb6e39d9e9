"""Compressed encoding for slot vectors that repeat with a power-of-two stride.

A vector with period p over the n slots embeds to a coefficient polynomial
whose nonzeros sit only at multiples of N/(2p). Transforming that sparse
polynomial to the evaluation domain (bit-reversed order) yields rows whose
values repeat in contiguous blocks of length r = n/p, so each limb stores
only the N/r distinct values; the index map from row position to stored
value is position // r. Expansion is exact, making the compressed path
bit-equal to the dense one.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .encoding import Plaintext, embed_inverse
from .errors import BadStride, BaseMismatch, NotPeriodic
from .modmath import bit_reverse_indices
from .ntt import U64, ntt_tables
from .params import CkksParams
from .poly import Domain, RnsPolynomial, main_ids, prime_for_id


@dataclass(frozen=True)
class CompressionDescriptor:
    N: int
    stride: int          # repeat period p
    block: int           # r = n/p: length of each constant run
    unique_count: int    # N/r distinct values per limb

    @classmethod
    def for_params(cls, params: CkksParams, stride: int):
        n = params.n
        if stride < 1 or stride & (stride - 1):
            raise BadStride(f"stride {stride} is not a power of two")
        if n % stride:
            raise BadStride(f"stride {stride} does not divide {n} slots")
        r = n // stride
        return cls(N=params.N, stride=stride, block=r, unique_count=params.N // r)

    def index_map(self) -> np.ndarray:
        """Row position -> stored-value index (equivalence classes)."""
        return np.arange(self.N) // self.block

    def expand_row(self, unique: np.ndarray, out=None) -> np.ndarray:
        if out is None:
            return np.repeat(unique, self.block)
        np.take(unique, self.index_map(), out=out)
        return out


@dataclass
class CompressedPlaintext:
    unique_values: np.ndarray   # (num_limbs, unique_count) uint64
    descriptor: CompressionDescriptor
    scale: Fraction
    level: int

    @property
    def compressed_bytes(self):
        return self.unique_values.size * 8

    @property
    def dense_bytes(self):
        return self.unique_values.shape[0] * self.descriptor.N * 8


def derive_classes_brute_force(params: CkksParams, stride: int, trials=3, seed=0):
    """Recover the position equivalence classes from dense encodings.

    Dense-encodes random stride-periodic vectors and groups evaluation
    positions whose values agree across all trials. Used to validate the
    closed-form index map at setup scale.
    """
    from .encoding import encode

    rng = np.random.default_rng(seed)
    n = params.n
    sigs = None
    for _ in range(trials):
        vec = np.tile(rng.uniform(-1, 1, stride), n // stride)
        pt = encode(vec, params, level=0)
        row = pt.poly.limbs[0]
        sigs = row if sigs is None else np.vstack([sigs, row])
    sigs = np.atleast_2d(sigs)
    classes = {}
    index_map = np.empty(params.N, dtype=np.int64)
    for i in range(params.N):
        key = tuple(sigs[:, i])
        classes.setdefault(key, len(classes))
        index_map[i] = classes[key]
    return index_map


def encode_compressed(values, params: CkksParams, level=None, scale=None,
                      stride=None) -> CompressedPlaintext:
    """Encode an exactly stride-periodic vector, storing only unique values.

    The sparse coefficient support is computed once (it has 2p entries) and
    each limb's distinct evaluation values come from evaluating that sparse
    polynomial at one representative root per contiguous block.
    """
    level = params.max_level if level is None else level
    scale = Fraction(params.scale if scale is None else scale)
    values = np.asarray(values, dtype=np.float64)
    n = params.n
    if len(values) != n:
        values = np.resize(values, n) if len(values) and n % len(values) == 0 else values
    if len(values) != n:
        raise NotPeriodic(f"need all {n} slots to check periodicity")

    if stride is None:
        stride = _smallest_period(values)
    desc = CompressionDescriptor.for_params(params, stride)
    if not np.array_equal(values, np.tile(values[:stride], n // stride)):
        raise NotPeriodic(f"vector is not exactly periodic with stride {stride}")

    coeffs = np.rint(embed_inverse(values, params.N) * float(scale)).astype(np.int64)
    r = desc.block
    support = np.arange(0, params.N, r)
    off_support = np.delete(np.arange(params.N), support)
    assert not coeffs[off_support].any(), \
        "periodic vector must embed to a sparse polynomial"
    sparse = coeffs[support]  # 2p entries

    rev = bit_reverse_indices(params.N)
    two_n = 2 * params.N
    reps = [int(rev[b * r]) for b in range(desc.unique_count)]
    rows = np.empty((level + 1, desc.unique_count), dtype=U64)
    for li, bid in enumerate(main_ids(level)):
        q = prime_for_id(params, bid)
        psi = ntt_tables(params.N, q).psi
        for b, k in enumerate(reps):
            acc = 0
            for u, m in enumerate(sparse):
                e = (2 * k + 1) * u * r % two_n
                acc = (acc + (int(m) % q) * pow(psi, e, q)) % q
            rows[li, b] = acc
    return CompressedPlaintext(rows, desc, scale, level)


def _smallest_period(values: np.ndarray) -> int:
    n = len(values)
    p = 1
    while p < n:
        if np.array_equal(values, np.tile(values[:p], n // p)):
            return p
        p *= 2
    return n


def expand(cp: CompressedPlaintext, params: CkksParams) -> Plaintext:
    """Dense evaluation-domain plaintext: row[i] = unique[indexMap[i]]."""
    desc = cp.descriptor
    rows = np.empty((cp.unique_values.shape[0], desc.N), dtype=U64)
    for i in range(rows.shape[0]):
        desc.expand_row(cp.unique_values[i], out=rows[i])
    poly = RnsPolynomial(rows, Domain.EVAL, main_ids(cp.level))
    return Plaintext(poly=poly, scale=cp.scale, level=cp.level)


def compressed_mul_row(ct_row: np.ndarray, cp: CompressedPlaintext, base_id: int,
                       params: CkksParams, scratch=None) -> np.ndarray:
    """Multiply one ciphertext limb by a compressed plaintext limb.

    Reads the stored unique values through the index map instead of a dense
    buffer; bit-equal to a dense MulPlain on the expanded row.
    """
    ids = main_ids(cp.level)
    if base_id not in ids:
        raise BaseMismatch(f"compressed plaintext has no limb for base {base_id}")
    q = U64(prime_for_id(params, base_id))
    unique = cp.unique_values[ids.index(base_id)]
    dense = cp.descriptor.expand_row(unique, out=scratch)
    return ct_row * dense % q
