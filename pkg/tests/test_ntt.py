import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limbforge.modmath import bit_reverse_indices
from limbforge.ntt import (
    automorphism_permutation,
    galois_element,
    ntt_forward,
    ntt_inverse,
    ntt_tables,
)
from limbforge.params import gen_params


def naive_negacyclic_convolution(a, b, q):
    """Schoolbook product modulo (X^N + 1, q); the independent oracle."""
    N = len(a)
    out = [0] * N
    for i in range(N):
        ai = int(a[i])
        if ai == 0:
            continue
        for j in range(N):
            k = i + j
            term = ai * int(b[j])
            if k >= N:
                out[k - N] = (out[k - N] - term) % q
            else:
                out[k] = (out[k] + term) % q
    return np.array(out, dtype=np.uint64)


@pytest.fixture(scope="module")
def q16():
    return gen_params(16, 2, d=1, seed=7).rns_basis[0]


def test_roundtrip_identity_bit_exact(q16, rng):
    x = rng.integers(0, q16, 16, dtype=np.uint64)
    assert np.array_equal(ntt_inverse(ntt_forward(x, q16), q16), x)


def test_pointwise_product_matches_schoolbook(q16, rng):
    x = rng.integers(0, q16, 16, dtype=np.uint64)
    y = rng.integers(0, q16, 16, dtype=np.uint64)
    ev = ntt_forward(x, q16) * ntt_forward(y, q16) % np.uint64(q16)
    assert np.array_equal(ntt_inverse(ev, q16), naive_negacyclic_convolution(x, y, q16))


def test_zeros_map_to_zeros(q16):
    z = np.zeros(16, dtype=np.uint64)
    assert np.array_equal(ntt_forward(z, q16), z)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([16, 64, 256]))
def test_roundtrip_property(seed, N):
    params = gen_params(N, 1, d=1, seed=0)
    rng = np.random.default_rng(seed)
    for q in params.rns_basis + params.special_basis:
        x = rng.integers(0, q, N, dtype=np.uint64)
        assert np.array_equal(ntt_inverse(ntt_forward(x, q), q), x)


def test_matrix_transform_matches_rowwise(rng):
    params = gen_params(64, 2)
    q = params.rns_basis[1]
    m = rng.integers(0, q, (5, 64), dtype=np.uint64)
    full = ntt_forward(m, q)
    for i in range(5):
        assert np.array_equal(full[i], ntt_forward(m[i], q))


def test_twiddle_table_is_bit_reversed_root_powers():
    params = gen_params(32, 2)
    q = params.rns_basis[0]
    t = ntt_tables(32, q)
    rev = bit_reverse_indices(32)
    for i in range(32):
        assert int(t.psi_brv[i]) == pow(t.psi, int(rev[i]), q)
    # per-stage twiddles are contiguous slices
    assert t.forward_stage_slice(4).base is t.psi_brv


def test_automorphism_matches_coefficient_semantics(rng):
    N = 32
    params = gen_params(N, 2)
    q = params.rns_basis[0]
    x = rng.integers(0, q, N, dtype=np.uint64)
    for steps in (1, 3, 7):
        g = galois_element(N, steps)
        perm = automorphism_permutation(N, g)
        via_eval = ntt_inverse(ntt_forward(x, q)[perm], q)
        expect = np.zeros(N, dtype=np.uint64)
        for i in range(N):
            e = i * g % (2 * N)
            if e < N:
                expect[e] = x[i]
            else:
                expect[e - N] = (q - x[i]) % q if x[i] else 0
        assert np.array_equal(via_eval, expect)


def test_rejects_even_galois_element():
    with pytest.raises(ValueError):
        automorphism_permutation(16, 2)
