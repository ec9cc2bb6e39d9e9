"""Runtime value binding shared by the poly/limb interpreters and the executor.

Maps symbolic IR input references (ciphertext params, named plaintexts at a
required level/scale, evalkey digits) onto concrete residue rows.
"""

from .errors import MissingEvalKey, MissingRotationKey
from .evaluate import KeyBundle, PlaintextCache
from .poly import RnsPolynomial


class Binder:
    def __init__(self, params, keys: KeyBundle, plaintexts, inputs: dict):
        self.params = params
        self.keys = keys
        if not isinstance(plaintexts, PlaintextCache):
            plaintexts = PlaintextCache(plaintexts, params)
        self.plaintexts = plaintexts
        self.inputs = inputs          # name -> Ciphertext

    def ct_poly(self, name: str, comp: str) -> RnsPolynomial:
        ct = self.inputs[name]
        return ct.b if comp == "b" else ct.a

    def pt_poly(self, name: str, level: int, scale) -> RnsPolynomial:
        return self.plaintexts.get(name, level, scale).poly

    def evalkey(self, purpose):
        if purpose == "relin":
            if self.keys.relin is None:
                raise MissingEvalKey("no relinearization key bound")
            return self.keys.relin
        _, g = purpose
        for key in self.keys.rotations.values():
            if key.purpose == ("rot", g):
                return key
        raise MissingRotationKey(f"no rotation key for galois element {g}")

    def evk_poly(self, purpose, digit: int, comp: str) -> RnsPolynomial:
        b, a = self.evalkey(purpose).digit(digit)
        return b if comp == "b" else a
