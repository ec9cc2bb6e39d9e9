"""Frozen numeric tolerances for the default desk-scale configuration.

DEPTH4_TAU was calibrated once against the float oracle: 100 seeded random
circuits (multiplicative depth up to 4, inputs in [-1, 1]) at N=4096,
7 limbs, scale 2^20, observed a maximum decryption error of 0.0719; the
frozen bound is four times that observation. ENCODE_ROUNDTRIP is the
matching regression bound for a bare encode/decode round trip at the same
scale (observed about 2^-13.7).
"""

DEPTH4_TAU = 0.2876

ENCODE_ROUNDTRIP = 2.0 ** -12
