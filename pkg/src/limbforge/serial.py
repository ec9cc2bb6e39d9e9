"""Bit-exact serialization for polynomials, plaintexts, ciphertexts, and keys.

Wire layout (all little-endian):
    magic   "LFHE"
    version u16
    kind    u8      (poly / plaintext / ciphertext / secret / public / evalkey)
    N       u32
    count   u16     number of basis primes
    primes  u64[count]
    level   u8
    scale   f64
    domain  u8      (0 coeff, 1 eval)
    ...kind-specific payload, limb rows as u64[N] each
"""

import struct
from fractions import Fraction

import numpy as np

from .encoding import Plaintext
from .ntt import U64
from .params import CkksParams
from .poly import Domain, RnsPolynomial, prime_for_id

MAGIC = b"LFHE"
VERSION = 1

KIND_POLY = 0
KIND_PLAINTEXT = 1
KIND_CIPHERTEXT = 2
KIND_SECRET = 3
KIND_EVALKEY = 4
KIND_COMPRESSED = 5


def detect_kind(data: bytes) -> int:
    """Peek at a blob's kind tag (all LFHE blobs share the header layout)."""
    kind, *_ = _read_header(data)
    return kind

_HEADER = struct.Struct("<4sHBIH")


def _write_header(buf, kind, N, primes, level, scale, domain):
    buf.append(_HEADER.pack(MAGIC, VERSION, kind, N, len(primes)))
    buf.append(np.asarray(primes, dtype="<u8").tobytes())
    buf.append(struct.pack("<Bd B", level & 0xFF, float(scale), domain))


def _read_header(data, off=0):
    magic, version, kind, N, count = _HEADER.unpack_from(data, off)
    if magic != MAGIC:
        raise ValueError("not a limbforge LFHE blob")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    off += _HEADER.size
    primes = np.frombuffer(data, dtype="<u8", count=count, offset=off)
    off += 8 * count
    level, scale, domain = struct.unpack_from("<Bd B", data, off)
    off += struct.calcsize("<Bd B")
    return kind, N, tuple(int(p) for p in primes), level, scale, domain, off


def _rows_bytes(limbs: np.ndarray) -> bytes:
    return np.ascontiguousarray(limbs, dtype="<u8").tobytes()


def _rows_from(data, off, count, N):
    rows = np.frombuffer(data, dtype="<u8", count=count * N, offset=off)
    return rows.reshape(count, N).astype(U64), off + 8 * count * N


def poly_to_bytes(poly: RnsPolynomial, params: CkksParams, scale=0.0, level=None, kind=KIND_POLY) -> bytes:
    primes = [prime_for_id(params, b) for b in poly.basis_ids]
    level = len(poly.basis_ids) - 1 if level is None else level
    buf = []
    _write_header(buf, kind, poly.N, primes, level,
                  scale, 0 if poly.domain == Domain.COEFF else 1)
    buf.append(_rows_bytes(poly.limbs))
    return b"".join(buf)


def _ids_for_primes(params: CkksParams, primes):
    from .poly import SPECIAL_BASE

    lookup = {q: i for i, q in enumerate(params.rns_basis)}
    lookup.update({q: SPECIAL_BASE + j for j, q in enumerate(params.special_basis)})
    return tuple(lookup[q] for q in primes)


def poly_from_bytes(data: bytes, params: CkksParams):
    kind, N, primes, level, scale, domain, off = _read_header(data)
    limbs, off = _rows_from(data, off, len(primes), N)
    poly = RnsPolynomial(limbs, Domain.COEFF if domain == 0 else Domain.EVAL,
                         _ids_for_primes(params, primes))
    return kind, poly, level, scale, off


def plaintext_to_bytes(pt: Plaintext, params: CkksParams) -> bytes:
    return poly_to_bytes(pt.poly, params, scale=pt.scale, level=pt.level, kind=KIND_PLAINTEXT)


def plaintext_from_bytes(data: bytes, params: CkksParams) -> Plaintext:
    kind, poly, level, scale, _ = poly_from_bytes(data, params)
    assert kind == KIND_PLAINTEXT
    return Plaintext(poly=poly, scale=Fraction(scale), level=level)


def ciphertext_to_bytes(ct, params: CkksParams) -> bytes:
    head = poly_to_bytes(ct.b, params, scale=ct.scale, level=ct.level, kind=KIND_CIPHERTEXT)
    return head + _rows_bytes(ct.a.limbs)


def ciphertext_from_bytes(data: bytes, params: CkksParams):
    from .ckks import Ciphertext

    kind, b, level, scale, off = poly_from_bytes(data, params)
    assert kind == KIND_CIPHERTEXT
    a_limbs, _ = _rows_from(data, off, len(b.basis_ids), b.N)
    a = RnsPolynomial(a_limbs, b.domain, b.basis_ids)
    return Ciphertext(b=b, a=a, scale=Fraction(scale), level=level)


def secret_to_bytes(sk, params: CkksParams) -> bytes:
    buf = []
    _write_header(buf, KIND_SECRET, params.N, params.rns_basis, params.max_level, 0.0, 0)
    buf.append(np.asarray(sk.coeffs, dtype="<i1").tobytes())
    return b"".join(buf)


def secret_from_bytes(data: bytes, params: CkksParams):
    from .keys import SecretKey, _eval_rows_from_signed
    from .poly import extended_ids

    kind, N, _, _, _, _, off = _read_header(data)
    assert kind == KIND_SECRET
    coeffs = np.frombuffer(data, dtype="<i1", count=N, offset=off).copy()
    ids = extended_ids(params, params.max_level)
    evp = _eval_rows_from_signed(coeffs.astype(np.int64), params, ids)
    return SecretKey(coeffs=coeffs, eval_rows={b: evp.limbs[i] for i, b in enumerate(ids)})


def compressed_to_bytes(cp, params: CkksParams) -> bytes:
    """Compressed plaintext: descriptor header, then the unique-value rows."""
    primes = params.rns_basis[: cp.level + 1]
    buf = []
    _write_header(buf, KIND_COMPRESSED, params.N, primes, cp.level, cp.scale, 1)
    buf.append(struct.pack("<II", cp.descriptor.stride, cp.descriptor.unique_count))
    buf.append(np.ascontiguousarray(cp.unique_values, dtype="<u8").tobytes())
    return b"".join(buf)


def compressed_from_bytes(data: bytes, params: CkksParams):
    from .compress import CompressedPlaintext, CompressionDescriptor

    kind, N, primes, level, scale, _, off = _read_header(data)
    assert kind == KIND_COMPRESSED
    stride, unique = struct.unpack_from("<II", data, off)
    off += struct.calcsize("<II")
    rows = np.frombuffer(data, dtype="<u8", count=len(primes) * unique, offset=off)
    desc = CompressionDescriptor.for_params(params, stride)
    assert desc.unique_count == unique
    return CompressedPlaintext(
        unique_values=rows.reshape(len(primes), unique).astype(U64),
        descriptor=desc, scale=Fraction(scale), level=level)


def load_plaintext_auto(data: bytes, params: CkksParams):
    """Dense or compressed plaintext, dispatched on the header's kind tag."""
    kind = detect_kind(data)
    if kind == KIND_COMPRESSED:
        return compressed_from_bytes(data, params)
    return plaintext_from_bytes(data, params)


def evalkey_to_bytes(evk, params: CkksParams) -> bytes:
    """Evalkey container: header, purpose tag, then per-digit (b, a) rows."""
    if evk.purpose == "relin":
        tag, rot = 0, 0
    else:
        tag, rot = 1, evk.purpose[1]
    first = evk.digits[0][0]
    primes = [prime_for_id(params, b) for b in first.basis_ids]
    buf = []
    _write_header(buf, KIND_EVALKEY, params.N, primes, params.max_level, 0.0, 1)
    buf.append(struct.pack("<BIH", tag, rot, len(evk.digits)))
    for b, a in evk.digits:
        buf.append(_rows_bytes(b.limbs))
        buf.append(_rows_bytes(a.limbs))
    return b"".join(buf)


def evalkey_from_bytes(data: bytes, params: CkksParams):
    from .keys import EvalKey

    kind, N, primes, _, _, _, off = _read_header(data)
    assert kind == KIND_EVALKEY
    tag, rot, ndig = struct.unpack_from("<BIH", data, off)
    off += struct.calcsize("<BIH")
    ids = _ids_for_primes(params, primes)
    digits = []
    for _ in range(ndig):
        b_rows, off = _rows_from(data, off, len(primes), N)
        a_rows, off = _rows_from(data, off, len(primes), N)
        digits.append((RnsPolynomial(b_rows, Domain.EVAL, ids),
                       RnsPolynomial(a_rows, Domain.EVAL, ids)))
    purpose = "relin" if tag == 0 else ("rot", rot)
    return EvalKey(purpose=purpose, digits=tuple(digits))
