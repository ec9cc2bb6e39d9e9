"""limbforge: a CKKS circuit compiler and runtime.

Lowers circuit programs through a polynomial IR and a limb-level IR into
fused kernel plans, schedules memory statically, and executes the plans on
a portable interpreter, optionally across simulated devices. The reference
evaluator in limbforge.ckks doubles as the correctness oracle for every
compiled path.
"""

from .params import CkksParams, KeySwitchConfig, gen_params
from .encoding import Plaintext, decode, encode
from .keys import EvalKey, PublicKey, SecretKey, keygen, make_rotation_key
from .ckks import (
    Ciphertext,
    add_plain,
    decrypt,
    encrypt,
    hom_add,
    hom_mul,
    hom_rotate,
    hom_sub,
    mul_plain,
    rescale,
)
from .poly import Domain, RnsPolynomial

__all__ = [
    "CkksParams", "KeySwitchConfig", "gen_params",
    "Plaintext", "decode", "encode",
    "EvalKey", "PublicKey", "SecretKey", "keygen", "make_rotation_key",
    "Ciphertext", "add_plain", "decrypt", "encrypt", "hom_add", "hom_mul",
    "hom_rotate", "hom_sub", "mul_plain", "rescale",
    "Domain", "RnsPolynomial",
]

__version__ = "0.1.0"
