"""Reference CKKS evaluator: encryption, keyswitching, and homomorphic ops.

This module is the correctness oracle for the whole compiler: the lowering
passes emit instruction sequences that perform exactly the arithmetic below,
so compiled execution must match this evaluator bit for bit at the limb
level. Rotation is written in decompose-then-permute order (the hoisted
form); sharing the decomposition across rotations then changes nothing.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .encoding import Plaintext, decode
from .errors import LevelExhausted, LevelMismatch, MissingEvalKey, ScaleMismatch
from .keys import EvalKey, PublicKey, SecretKey, digit_hat_factor, sample_gaussian, sample_ternary
from .ntt import U64, galois_element
from .params import CkksParams
from .poly import (
    Domain,
    RnsPolynomial,
    base_convert,
    extended_ids,
    main_ids,
    mod_down,
    poly_add,
    poly_automorph,
    poly_intt,
    poly_mul,
    poly_ntt,
    poly_scalar_mul,
    poly_sub,
    prime_for_id,
    rescale_poly,
    zero_poly,
)


@dataclass
class Ciphertext:
    b: RnsPolynomial
    a: RnsPolynomial
    scale: Fraction
    level: int

    def __post_init__(self):
        assert self.b.basis_ids == self.a.basis_ids
        assert self.b.domain == self.a.domain
        assert self.level + 1 == len(self.b.basis_ids)


def _slice_to_level(poly: RnsPolynomial, level: int) -> RnsPolynomial:
    ids = main_ids(level)
    rows = np.stack([poly.row(b) for b in ids])
    return RnsPolynomial(rows, poly.domain, ids)


def encrypt(pt: Plaintext, pk: PublicKey, params: CkksParams, rng=None) -> Ciphertext:
    rng = rng or np.random.default_rng(params.seed + 1)
    level = pt.level
    ids = main_ids(level)
    from .keys import _eval_rows_from_signed

    u = _eval_rows_from_signed(
        sample_ternary(rng, params.N, params.hamming_weight).astype(np.int64), params, ids)
    e0 = _eval_rows_from_signed(sample_gaussian(rng, params.N, params.sigma), params, ids)
    e1 = _eval_rows_from_signed(sample_gaussian(rng, params.N, params.sigma), params, ids)

    pkb = _slice_to_level(pk.b, level)
    pka = _slice_to_level(pk.a, level)
    b = poly_add(poly_add(poly_mul(pkb, u, params), e0, params), pt.poly, params)
    a = poly_add(poly_mul(pka, u, params), e1, params)
    return Ciphertext(b=b, a=a, scale=pt.scale, level=level)


def decrypt(ct: Ciphertext, sk: SecretKey, params: CkksParams) -> np.ndarray:
    s = sk.eval_poly(ct.b.basis_ids)
    m = poly_add(ct.b, poly_mul(ct.a, s, params), params)
    return decode(m, params, scale=ct.scale)


# --- keyswitching ----------------------------------------------------------

def decomposition_scalars(params: CkksParams, digit: int, limbs) -> dict:
    """Per-limb scalars multiplying digit rows before base extension.

    The inverse of Q_L/Q_Dj modulo each of the digit's primes; with that
    factor baked into the evalkey, one key stays valid at every level.
    """
    f = digit_hat_factor(params, digit)
    return {i: pow(f % params.rns_basis[i], -1, params.rns_basis[i]) for i in limbs}


def keyswitch_decompose(x: RnsPolynomial, params: CkksParams):
    """Shared mod-up: scale each digit, lift it onto the extended basis.

    Returns one evaluation-domain RnsPolynomial per active digit, over the
    full extended basis of x's level. This is the hoistable prefix of a
    keyswitch: it depends only on x, not on the target key.
    """
    level = len(x.basis_ids) - 1
    ext = extended_ids(params, level)
    pieces = []
    for group in params.ks.digits_at_level(level):
        j = group[0] % params.ks.d
        scalars = decomposition_scalars(params, j, group)
        own = RnsPolynomial(np.stack([x.row(i) for i in group]), Domain.EVAL, tuple(group))
        scaled = poly_scalar_mul(own, scalars, params)
        coeff = poly_intt(scaled, params)
        other_ids = tuple(b for b in ext if b not in group)
        conv = poly_ntt(base_convert(coeff, other_ids, params), params)
        rows = np.empty((len(ext), params.N), dtype=U64)
        for i, bid in enumerate(ext):
            rows[i] = scaled.row(bid) if bid in group else conv.row(bid)
        pieces.append((j, RnsPolynomial(rows, Domain.EVAL, ext)))
    return pieces


def keyswitch_inner_product(pieces, evk: EvalKey, params: CkksParams):
    """Accumulate sum_j d_j * evk_j over the extended basis."""
    ext = pieces[0][1].basis_ids
    acc_b = zero_poly(params, ext)
    acc_a = zero_poly(params, ext)
    for j, d in pieces:
        kb, ka = evk.digit(j)
        for i, bid in enumerate(ext):
            q = U64(prime_for_id(params, bid))
            acc_b.limbs[i] = (acc_b.limbs[i] + d.limbs[i] * kb.row(bid)) % q
            acc_a.limbs[i] = (acc_a.limbs[i] + d.limbs[i] * ka.row(bid)) % q
    return acc_b, acc_a


def keyswitch(x: RnsPolynomial, evk: EvalKey, params: CkksParams):
    """Full keyswitch of x to the main key; returns the (b, a) correction pair."""
    level = len(x.basis_ids) - 1
    pieces = keyswitch_decompose(x, params)
    acc_b, acc_a = keyswitch_inner_product(pieces, evk, params)
    ids = main_ids(level)
    return mod_down(acc_b, ids, params), mod_down(acc_a, ids, params)


# --- homomorphic operations ------------------------------------------------

def _check_aligned(ct1: Ciphertext, ct2: Ciphertext, op: str):
    if ct1.level != ct2.level:
        raise LevelMismatch(f"{op}: levels {ct1.level} vs {ct2.level}")
    if ct1.scale != ct2.scale:
        raise ScaleMismatch(f"{op}: scales {ct1.scale} vs {ct2.scale}")


def hom_add(ct1: Ciphertext, ct2: Ciphertext, params: CkksParams) -> Ciphertext:
    _check_aligned(ct1, ct2, "add")
    return Ciphertext(poly_add(ct1.b, ct2.b, params), poly_add(ct1.a, ct2.a, params),
                      ct1.scale, ct1.level)


def hom_sub(ct1: Ciphertext, ct2: Ciphertext, params: CkksParams) -> Ciphertext:
    _check_aligned(ct1, ct2, "sub")
    return Ciphertext(poly_sub(ct1.b, ct2.b, params), poly_sub(ct1.a, ct2.a, params),
                      ct1.scale, ct1.level)


def _check_plain(ct: Ciphertext, pt: Plaintext, op: str):
    if ct.level != pt.level:
        raise LevelMismatch(f"{op}: ciphertext level {ct.level}, plaintext level {pt.level}")


def add_plain(ct: Ciphertext, pt: Plaintext, params: CkksParams) -> Ciphertext:
    _check_plain(ct, pt, "addPlain")
    if ct.scale != pt.scale:
        raise ScaleMismatch("addPlain: scales differ")
    return Ciphertext(poly_add(ct.b, pt.poly, params), ct.a, ct.scale, ct.level)


def mul_plain(ct: Ciphertext, pt: Plaintext, params: CkksParams) -> Ciphertext:
    _check_plain(ct, pt, "mulPlain")
    return Ciphertext(poly_mul(ct.b, pt.poly, params), poly_mul(ct.a, pt.poly, params),
                      ct.scale * pt.scale, ct.level)


def hom_mul(ct1: Ciphertext, ct2: Ciphertext, relin_key: EvalKey, params: CkksParams) -> Ciphertext:
    if ct1.level != ct2.level:
        raise LevelMismatch(f"mul: levels {ct1.level} vs {ct2.level}")
    if ct1.level < 1:
        raise LevelExhausted("multiplication at level 0")
    if relin_key is None or relin_key.purpose != "relin":
        raise MissingEvalKey("relinearization key required")
    d0 = poly_mul(ct1.b, ct2.b, params)
    d1 = poly_add(poly_mul(ct1.b, ct2.a, params), poly_mul(ct1.a, ct2.b, params), params)
    d2 = poly_mul(ct1.a, ct2.a, params)
    ks_b, ks_a = keyswitch(d2, relin_key, params)
    return Ciphertext(poly_add(d0, ks_b, params), poly_add(d1, ks_a, params),
                      ct1.scale * ct2.scale, ct1.level)


def hom_rotate(ct: Ciphertext, steps: int, rot_key: EvalKey, params: CkksParams) -> Ciphertext:
    """Cyclic left rotation by `steps` slots.

    Decomposes `a` first and permutes the extended pieces, so that hoisting
    (sharing the decomposition between rotations of one ciphertext) is the
    identity transformation on the computed values.
    """
    steps = steps % params.n
    if steps == 0:
        return ct
    g = galois_element(params.N, steps)
    if rot_key is None or rot_key.purpose != ("rot", g):
        raise MissingEvalKey(f"rotation key for {steps} steps (galois {g})")
    pieces = keyswitch_decompose(ct.a, params)
    rotated = [(j, poly_automorph(d, g, params)) for j, d in pieces]
    acc_b, acc_a = keyswitch_inner_product(rotated, rot_key, params)
    ids = main_ids(ct.level)
    ks_b = mod_down(acc_b, ids, params)
    ks_a = mod_down(acc_a, ids, params)
    b = poly_add(poly_automorph(ct.b, g, params), ks_b, params)
    return Ciphertext(b, ks_a, ct.scale, ct.level)


def rescale(ct: Ciphertext, params: CkksParams) -> Ciphertext:
    if ct.level < 1:
        raise LevelExhausted("rescale at level 0")
    dropped = params.rns_basis[ct.level]
    return Ciphertext(rescale_poly(ct.b, params), rescale_poly(ct.a, params),
                      ct.scale / dropped, ct.level - 1)
