"""Sparse compressed plaintexts for stride-periodic slot vectors.

A vector repeating with a power-of-two stride embeds to a sparse polynomial;
its evaluation-domain rows repeat in contiguous blocks, so only the unique
values are stored. Expansion is bit-exact, which keeps the compressed and
dense multiply paths byte-identical.
"""

import numpy as np

from limbforge.compress import CompressionDescriptor, encode_compressed, expand
from limbforge.encoding import encode
from limbforge.params import gen_params

tiny = gen_params(N=16, num_levels=2, d=1, seed=7)
rng = np.random.default_rng(4)

v8 = np.tile(rng.uniform(-1, 1, 2), 4)
print("8 slots repeating with stride 2:", np.round(v8, 3))
cp = encode_compressed(v8, tiny, stride=2)
dense = encode(v8, tiny)
print(f"evaluation row blocks (length {cp.descriptor.block}):")
print(" ", dense.poly.limbs[0].reshape(-1, cp.descriptor.block))
print(f"stored values per limb: {cp.descriptor.unique_count} "
      f"(instead of {tiny.N})")
print("expansion bit-equals dense encoding:",
      np.array_equal(expand(cp, tiny).poly.limbs, dense.poly.limbs))

params = gen_params(N=4096, num_levels=6, d=3, seed=0)
print(f"\nat N={params.N}:")
for stride in (2, 4, 8, 64):
    vec = np.tile(rng.uniform(-1, 1, stride), params.n // stride)
    cp = encode_compressed(vec, params, stride=stride)
    dense = encode(vec, params)
    ok = np.array_equal(expand(cp, params).poly.limbs, dense.poly.limbs)
    print(f"  stride {stride:>2}: {cp.dense_bytes:>7} dense bytes -> "
          f"{cp.compressed_bytes:>6} stored "
          f"({cp.dense_bytes // cp.compressed_bytes}x), bit-exact={ok}")

desc = CompressionDescriptor.for_params(params, 64)
print(f"\nindex map is position // {desc.block}: first 8 entries of the "
      f"stride-64 map: {desc.index_map()[:8]}")
