import numpy as np
import pytest

from limbforge.ckks import (
    decrypt,
    encrypt,
    hom_add,
    hom_mul,
    hom_rotate,
    hom_sub,
    mul_plain,
    rescale,
)
from limbforge.encoding import encode
from limbforge.errors import LevelExhausted, LevelMismatch, MissingEvalKey, ScaleMismatch
from limbforge.keys import keygen, make_rotation_key
from limbforge.modmath import crt_reconstruct_centered
from limbforge.poly import (
    Domain,
    RnsPolynomial,
    base_convert,
    main_ids,
    prime_for_id,
    special_ids,
)

TOL = 0.05  # generous working bound for single ops at scale 2^20


@pytest.fixture(scope="module")
def ctx(params_small, keys_small):
    sk, pk, rlk = keys_small
    rng = np.random.default_rng(77)
    v = rng.uniform(-1, 1, params_small.n)
    w = rng.uniform(-1, 1, params_small.n)
    ct_v = encrypt(encode(v, params_small), pk, params_small, rng)
    ct_w = encrypt(encode(w, params_small), pk, params_small, rng)
    return params_small, sk, pk, rlk, v, w, ct_v, ct_w


def test_encrypt_decrypt(ctx):
    p, sk, _, _, v, _, ct_v, _ = ctx
    assert np.abs(decrypt(ct_v, sk, p) - v).max() < TOL


def test_add_zero_is_identity(ctx):
    p, sk, pk, _, v, _, ct_v, _ = ctx
    zero = encrypt(encode(np.zeros(p.n), p), pk, p, np.random.default_rng(1))
    out = decrypt(hom_add(ct_v, zero, p), sk, p)
    assert np.abs(out - v).max() < TOL


def test_sub_self_is_zero(ctx):
    p, sk, _, _, _, _, ct_v, _ = ctx
    assert np.abs(decrypt(hom_sub(ct_v, ct_v, p), sk, p)).max() < TOL


def test_mul_plain_pointwise(ctx):
    p, sk, _, _, v, w, ct_v, _ = ctx
    out = mul_plain(ct_v, encode(w, p), p)
    assert out.scale == p.scale * p.scale
    assert np.abs(decrypt(out, sk, p) - v * w).max() < TOL


def test_hom_mul_then_rescale(ctx):
    p, sk, _, rlk, v, w, ct_v, ct_w = ctx
    out = rescale(hom_mul(ct_v, ct_w, rlk, p), p)
    assert out.level == ct_v.level - 1
    assert out.scale == p.scale * p.scale / p.rns_basis[ct_v.level]
    assert np.abs(decrypt(out, sk, p) - v * w).max() < TOL


def test_rotate_shifts_slots(ctx):
    p, sk, _, _, v, _, ct_v, _ = ctx
    rk = make_rotation_key(p, sk, 1, np.random.default_rng(5))
    out = decrypt(hom_rotate(ct_v, 1, rk, p), sk, p)
    assert np.abs(out - np.roll(v, -1)).max() < TOL


def test_rotate_group_inverse(ctx):
    p, sk, _, _, v, _, ct_v, _ = ctx
    rho = 3
    rk = make_rotation_key(p, sk, rho, np.random.default_rng(6))
    rk_inv = make_rotation_key(p, sk, p.n - rho, np.random.default_rng(7))
    back = hom_rotate(hom_rotate(ct_v, rho, rk, p), p.n - rho, rk_inv, p)
    assert np.abs(decrypt(back, sk, p) - v).max() < TOL


def test_rotation_key_rejects_identity(params_small, keys_small):
    sk = keys_small[0]
    with pytest.raises(ValueError):
        make_rotation_key(params_small, sk, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_rotation_key(params_small, sk, params_small.n, np.random.default_rng(0))


def test_keygen_deterministic(params_small):
    sk1, pk1, rlk1 = keygen(params_small, seed=123)
    sk2, pk2, rlk2 = keygen(params_small, seed=123)
    assert np.array_equal(sk1.coeffs, sk2.coeffs)
    assert np.array_equal(pk1.b.limbs, pk2.b.limbs)
    for (b1, a1), (b2, a2) in zip(rlk1.digits, rlk2.digits):
        assert np.array_equal(b1.limbs, b2.limbs)
        assert np.array_equal(a1.limbs, a2.limbs)


def test_encrypt_deterministic_given_rng(ctx):
    p, _, pk, _, v, _, _, _ = ctx
    c1 = encrypt(encode(v, p), pk, p, np.random.default_rng(9))
    c2 = encrypt(encode(v, p), pk, p, np.random.default_rng(9))
    assert np.array_equal(c1.b.limbs, c2.b.limbs)
    assert np.array_equal(c1.a.limbs, c2.a.limbs)


def test_level_mismatch_rejected(ctx):
    p, _, pk, _, v, _, ct_v, _ = ctx
    low = encrypt(encode(v, p, level=1), pk, p, np.random.default_rng(2))
    with pytest.raises(LevelMismatch):
        hom_add(ct_v, low, p)


def test_scale_mismatch_rejected(ctx):
    p, _, pk, _, v, _, ct_v, _ = ctx
    other = encrypt(encode(v, p, scale=1 << 21), pk, p, np.random.default_rng(2))
    with pytest.raises(ScaleMismatch):
        hom_add(ct_v, other, p)


def test_mul_at_level_zero_exhausted(ctx):
    p, _, pk, rlk, v, _, _, _ = ctx
    ct0 = encrypt(encode(v, p, level=0), pk, p, np.random.default_rng(3))
    with pytest.raises(LevelExhausted):
        hom_mul(ct0, ct0, rlk, p)
    with pytest.raises(LevelExhausted):
        rescale(ct0, p)


def test_missing_evalkey_rejected(ctx):
    p, _, _, rlk, _, _, ct_v, _ = ctx
    with pytest.raises(MissingEvalKey):
        hom_mul(ct_v, ct_v, None, p)
    with pytest.raises(MissingEvalKey):
        hom_rotate(ct_v, 1, rlk, p)  # wrong purpose


def test_residues_below_primes_after_ops(ctx):
    p, _, _, rlk, _, _, ct_v, ct_w = ctx
    out = rescale(hom_mul(ct_v, ct_w, rlk, p), p)
    out.b.validate(p)
    out.a.validate(p)


def test_base_convert_matches_crt_oracle(params16, rng):
    p = params16
    rows = np.stack([rng.integers(0, q, 16, dtype=np.uint64) for q in p.rns_basis])
    poly = RnsPolynomial(rows, Domain.COEFF, main_ids(2))
    targets = special_ids(p)
    out = base_convert(poly, main_ids(2) + targets, p)

    q_prod = 1
    for q in p.rns_basis:
        q_prod *= q
    centered = crt_reconstruct_centered(rows, p.rns_basis)
    lifts = [c % q_prod for c in centered]
    for bid in targets:
        t = prime_for_id(p, bid)
        expect = np.array([l % t for l in lifts], dtype=np.uint64)
        assert np.array_equal(out.row(bid), expect)


def test_base_convert_constant(params16):
    p = params16
    rows = np.stack([np.full(16, 42, dtype=np.uint64)] * 3)
    poly = RnsPolynomial(rows, Domain.COEFF, main_ids(2))
    out = base_convert(poly, main_ids(2) + special_ids(p), p)
    for bid in special_ids(p):
        assert (out.row(bid) == 42).all()


def test_base_convert_near_wraparound_exact(params16):
    # x = Q - 1 stresses the float correction's integer fallback
    p = params16
    q_prod = 1
    for q in p.rns_basis:
        q_prod *= q
    rows = np.stack([np.full(16, q - 1, dtype=np.uint64) for q in p.rns_basis])
    poly = RnsPolynomial(rows, Domain.COEFF, main_ids(2))
    out = base_convert(poly, special_ids(p), p)
    for bid in special_ids(p):
        t = prime_for_id(p, bid)
        assert (out.row(bid) == (q_prod - 1) % t).all()


def test_rescale_metadata(ctx):
    p, _, _, _, _, _, ct_v, _ = ctx
    out = rescale(mul_plain(ct_v, encode(np.ones(p.n), p), p), p)
    assert out.level == ct_v.level - 1
    assert out.scale == p.scale * p.scale / p.rns_basis[ct_v.level]
