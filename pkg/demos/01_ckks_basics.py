"""Walk through the reference CKKS layer: parameters, encoding, homomorphic ops.

Everything here is exact 28-bit RNS arithmetic under the hood; the only
approximation is the fixed-point encoding itself.
"""

import numpy as np

from limbforge import decode, decrypt, encode, encrypt, gen_params, hom_add, hom_mul, hom_rotate, keygen, mul_plain, rescale
from limbforge.keys import make_rotation_key

params = gen_params(N=4096, num_levels=6, d=3, seed=0)
print(f"ring dimension N = {params.N}, slots = {params.n}")
print(f"main primes ({len(params.rns_basis)}): {params.rns_basis}")
print(f"special primes ({len(params.special_basis)}): {params.special_basis}")
print(f"scale = 2^{int(params.scale).bit_length() - 1}")

sk, pk, relin = keygen(params, seed=42)
rng = np.random.default_rng(7)
v = rng.uniform(-1, 1, params.n)
w = rng.uniform(-1, 1, params.n)

pt = encode(v, params)
print(f"\nencode/decode roundtrip error: {np.abs(decode(pt, params) - v).max():.2e}")

ct_v = encrypt(pt, pk, params, rng)
ct_w = encrypt(encode(w, params), pk, params, rng)
print(f"fresh decrypt error:           {np.abs(decrypt(ct_v, sk, params) - v).max():.2e}")

total = hom_add(ct_v, ct_w, params)
print(f"add error:                     {np.abs(decrypt(total, sk, params) - (v + w)).max():.2e}")

prod = rescale(hom_mul(ct_v, ct_w, relin, params), params)
print(f"mul+rescale error:             {np.abs(decrypt(prod, sk, params) - v * w).max():.2e}")
print(f"  level {ct_v.level} -> {prod.level}, scale back near 2^20: {float(prod.scale):.1f}")

masked = mul_plain(ct_v, encode(w, params), params)
print(f"plaintext mul error:           {np.abs(decrypt(masked, sk, params) - v * w).max():.2e}")

rk = make_rotation_key(params, sk, 3, rng)
rot = hom_rotate(ct_v, 3, rk, params)
print(f"rotate-by-3 error:             {np.abs(decrypt(rot, sk, params) - np.roll(v, -3)).max():.2e}")
