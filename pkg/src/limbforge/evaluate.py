"""Direct execution of circuit programs on the reference CKKS evaluator.

This is the unlowered oracle path: every compiled artifact is checked
against it, either bit-exactly at the limb level or within the calibrated
noise bound at the value level.
"""

from dataclasses import dataclass, field

import numpy as np

from .ckks import (
    Ciphertext,
    add_plain,
    hom_add,
    hom_mul,
    hom_rotate,
    hom_sub,
    mul_plain,
    rescale,
)
from .encoding import encode
from .errors import MissingEvalKey, MissingRotationKey
from .keys import EvalKey, PublicKey
from .typecheck import TypedProgram


@dataclass
class KeyBundle:
    public: PublicKey = None
    relin: EvalKey = None
    rotations: dict = field(default_factory=dict)   # steps -> EvalKey

    def rotation(self, steps: int, n: int) -> EvalKey:
        key = self.rotations.get(steps % n)
        if key is None:
            raise MissingRotationKey(f"no rotation key for {steps} steps")
        return key


class PlaintextCache:
    """Encodes named plaintext vectors on demand at each required (level, scale)."""

    def __init__(self, vectors: dict, params):
        self.vectors = vectors
        self.params = params
        self._cache = {}

    def get(self, name: str, level: int, scale):
        key = (name, level, scale)
        if key not in self._cache:
            vec = self.vectors[name]
            self._cache[key] = encode(vec, self.params, level=level, scale=scale)
        return self._cache[key]


def run_circuit(typed: TypedProgram, inputs: dict, plaintexts, keys: KeyBundle,
                fn_name: str | None = None) -> Ciphertext:
    """Evaluate the (typechecked) program on ciphertext inputs.

    inputs maps entry-function parameter names to Ciphertexts; plaintexts
    maps declared plaintext names to slot vectors (or is a PlaintextCache).
    """
    prog, params = typed.program, typed.params
    fn_name = fn_name or prog.entry
    if not isinstance(plaintexts, PlaintextCache):
        plaintexts = PlaintextCache(plaintexts, params)

    def run(fname: str, args: dict) -> Ciphertext:
        fn = prog.functions[fname]
        env = dict(args)
        uses = typed.pt_uses[fname]

        def pt_operand(name):
            info = uses[name]
            return plaintexts.get(name, info.level, info.scale)

        for op in fn.body:
            if op.opcode == "add":
                a = env[op.args[0]]
                if op.args[1] in prog.plaintexts:
                    env[op.result] = add_plain(a, pt_operand(op.args[1]), params)
                else:
                    env[op.result] = hom_add(a, env[op.args[1]], params)
            elif op.opcode == "sub":
                if op.args[1] in prog.plaintexts:
                    neg = -np.asarray(plaintexts.vectors[op.args[1]], dtype=float)
                    info = uses[op.args[1]]
                    pt = encode(neg, params, level=info.level, scale=info.scale)
                    env[op.result] = add_plain(env[op.args[0]], pt, params)
                else:
                    env[op.result] = hom_sub(env[op.args[0]], env[op.args[1]], params)
            elif op.opcode == "mul":
                if keys.relin is None:
                    raise MissingEvalKey("program multiplies but no relin key bound")
                env[op.result] = hom_mul(env[op.args[0]], env[op.args[1]], keys.relin, params)
            elif op.opcode == "mulplain":
                env[op.result] = mul_plain(env[op.args[0]], pt_operand(op.args[1]), params)
            elif op.opcode == "rotate":
                key = keys.rotation(op.rho, params.n)
                env[op.result] = hom_rotate(env[op.args[0]], op.rho, key, params)
            elif op.opcode == "rescale":
                env[op.result] = rescale(env[op.args[0]], params)
            elif op.opcode == "call":
                callee = prog.functions[op.callee]
                bound = {p.name: env[a] for p, a in zip(callee.params, op.args)}
                env[op.result] = run(op.callee, bound)
            else:
                raise ValueError(f"unhandled opcode {op.opcode}")
        return env[fn.returns]

    fn = prog.functions[fn_name]
    return run(fn_name, {p.name: inputs[p.name] for p in fn.params})
