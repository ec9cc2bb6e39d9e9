"""Static metadata checking: levels, exact rational scales, key requirements.

Scales are tracked as exact rationals over prime products rather than
floats, so a scale mismatch is a hard structural fact, not a tolerance
call. A program that passes this checker executes on the reference
evaluator without metadata errors.
"""

from dataclasses import dataclass
from fractions import Fraction

from .circuit import CircuitProgram
from .errors import (
    BadStride,
    LevelExhausted,
    LevelMismatch,
    MissingEvalKey,
    MissingRotationKey,
    ScaleMismatch,
)
from .params import CkksParams


@dataclass(frozen=True)
class ValueInfo:
    level: int
    scale: Fraction


@dataclass
class TypedProgram:
    program: CircuitProgram
    params: CkksParams
    value_info: dict                 # fn name -> {value name -> ValueInfo}
    fn_output: dict                  # fn name -> ValueInfo
    pt_uses: dict                    # fn name -> {pt name -> ValueInfo}

    def info(self, fn: str, value: str) -> ValueInfo:
        return self.value_info[fn][value]


def _param_info(p, params: CkksParams) -> ValueInfo:
    level = params.max_level if p.level is None else p.level
    scale = Fraction(params.scale if p.scale is None else p.scale)
    return ValueInfo(level, scale)


def typecheck(prog: CircuitProgram, params: CkksParams) -> TypedProgram:
    if prog.device_count < 1 or prog.device_count & (prog.device_count - 1):
        raise ValueError("device count must be a power of two, at least 1")

    for decl in prog.plaintexts.values():
        if decl.stride is not None:
            p = decl.stride
            if p < 1 or p & (p - 1):
                raise BadStride(f"plaintext {decl.name!r}: stride {p} not a power of two")
            if params.n % p:
                raise BadStride(f"plaintext {decl.name!r}: stride {p} does not divide {params.n}")
        if decl.length > params.n:
            raise BadStride(f"plaintext {decl.name!r}: length {decl.length} exceeds {params.n} slots")

    streams = {op.stream for fn in prog.functions.values() for op in fn.body}
    if streams and streams != set(range(max(streams) + 1)):
        raise ValueError(f"stream ids must be dense from 0, got {sorted(streams)}")

    value_info = {}
    fn_output = {}
    pt_uses = {name: {} for name in prog.functions}

    # callee outputs are needed at call sites; process in dependency order
    order = _callees_first(prog)
    for fname in order:
        fn = prog.functions[fname]
        env = {p.name: _param_info(p, params) for p in fn.params}
        for op in fn.body:
            env[op.result] = _check_op(op, env, prog, params, fn_output, pt_uses[fname])
        value_info[fname] = env
        fn_output[fname] = env[fn.returns]

    return TypedProgram(prog, params, value_info, fn_output, pt_uses)


def _callees_first(prog: CircuitProgram):
    seen, order = set(), []

    def visit(name, stack=()):
        if name in seen:
            return
        if name in stack:
            raise ValueError(f"recursive call cycle through {name!r}")
        for op in prog.functions[name].body:
            if op.opcode == "call":
                visit(op.callee, stack + (name,))
        seen.add(name)
        order.append(name)

    for name in prog.functions:
        visit(name)
    return order


def _ct(env, name, op):
    if name not in env:
        raise LevelMismatch(
            f"line {op.line}: {name!r} is not a ciphertext value in scope")
    return env[name]


def _check_op(op, env, prog, params, fn_output, uses):
    if op.opcode in ("add", "sub"):
        a = _ct(env, op.args[0], op)
        if op.args[1] in prog.plaintexts:
            decl = prog.plaintexts[op.args[1]]
            b = ValueInfo(a.level, Fraction(decl.scale or params.scale))
            _use_pt(uses, decl.name, b, op)
        else:
            b = _ct(env, op.args[1], op)
        if a.level != b.level:
            raise LevelMismatch(
                f"line {op.line}: {op.opcode} of {op.args[0]!r} (level {a.level}) "
                f"and {op.args[1]!r} (level {b.level})")
        if a.scale != b.scale:
            raise ScaleMismatch(
                f"line {op.line}: {op.opcode} of {op.args[0]!r} (scale {a.scale}) "
                f"and {op.args[1]!r} (scale {b.scale})")
        return a

    if op.opcode == "mul":
        a = _ct(env, op.args[0], op)
        b = _ct(env, op.args[1], op)
        if a.level != b.level:
            raise LevelMismatch(
                f"line {op.line}: mul of levels {a.level} and {b.level}")
        if a.level < 1:
            raise LevelExhausted(f"line {op.line}: mul at level 0")
        if not prog.evalkeys.relin:
            raise MissingEvalKey(f"line {op.line}: mul needs 'evk relin' declared")
        return ValueInfo(a.level, a.scale * b.scale)

    if op.opcode == "mulplain":
        a = _ct(env, op.args[0], op)
        if op.args[1] not in prog.plaintexts:
            raise LevelMismatch(
                f"line {op.line}: mulplain operand {op.args[1]!r} is not a declared plaintext")
        decl = prog.plaintexts[op.args[1]]
        pt_scale = Fraction(decl.scale or params.scale)
        _use_pt(uses, decl.name, ValueInfo(a.level, pt_scale), op)
        return ValueInfo(a.level, a.scale * pt_scale)

    if op.opcode == "rotate":
        a = _ct(env, op.args[0], op)
        rho = op.rho % params.n
        if rho == 0:
            raise MissingRotationKey(
                f"line {op.line}: rotation by 0 is the identity; drop the op")
        if rho not in {r % params.n for r in prog.evalkeys.rotations}:
            raise MissingRotationKey(
                f"line {op.line}: no declared rotation key for {rho} steps")
        return a

    if op.opcode == "rescale":
        a = _ct(env, op.args[0], op)
        if a.level < 1:
            raise LevelExhausted(f"line {op.line}: rescale at level 0")
        return ValueInfo(a.level - 1, a.scale / params.rns_basis[a.level])

    if op.opcode == "call":
        callee = prog.functions[op.callee]
        if len(op.args) != len(callee.params):
            raise LevelMismatch(
                f"line {op.line}: {op.callee!r} takes {len(callee.params)} args, "
                f"got {len(op.args)}")
        for arg, p in zip(op.args, callee.params):
            got = _ct(env, arg, op)
            want = _param_info(p, params)
            if got.level != want.level:
                raise LevelMismatch(
                    f"line {op.line}: arg {arg!r} at level {got.level}, "
                    f"{op.callee!r} parameter {p.name!r} wants {want.level}")
            if got.scale != want.scale:
                raise ScaleMismatch(
                    f"line {op.line}: arg {arg!r} scale {got.scale} != "
                    f"parameter {p.name!r} scale {want.scale}")
        return fn_output[op.callee]

    raise ValueError(f"unhandled opcode {op.opcode}")


def _use_pt(uses, name, info, op):
    prev = uses.get(name)
    if prev and prev != info:
        raise ScaleMismatch(
            f"line {op.line}: plaintext {name!r} used at conflicting "
            f"(level, scale): {prev} vs {info}")
    uses[name] = info
