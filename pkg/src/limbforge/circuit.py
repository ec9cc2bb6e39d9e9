"""Circuit-level program representation and its canonical text form.

Programs are lists of functions over SSA values. Ciphertext inputs are
function parameters; plaintext operands reference global declarations and
are bound to concrete vectors at execution time, so one compiled function
can be re-run against different weight sets.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

CATEGORIES = ("Weight", "Mask", "BootstrapMatrix", "Generic")

OPCODES = ("add", "sub", "mul", "mulplain", "rotate", "rescale", "call")


@dataclass
class PlaintextDecl:
    name: str
    length: int
    stride: Optional[int] = None       # repeat stride p (power of two)
    category: str = "Generic"
    scale: Optional[Fraction] = None   # encode scale; default = params scale


@dataclass
class Param:
    name: str
    level: Optional[int] = None
    scale: Optional[Fraction] = None


@dataclass
class CircuitOp:
    result: Optional[str]
    opcode: str
    args: tuple
    rho: int = 0            # rotation steps
    callee: Optional[str] = None
    stream: int = 0
    line: int = field(default=0, compare=False)  # diagnostics only


@dataclass
class FunctionDef:
    name: str
    params: list
    body: list = field(default_factory=list)
    returns: Optional[str] = None


@dataclass
class EvalKeyReqs:
    relin: bool = False
    rotations: set = field(default_factory=set)


@dataclass
class CircuitProgram:
    functions: dict
    entry: str
    device_count: int = 1
    plaintexts: dict = field(default_factory=dict)
    evalkeys: EvalKeyReqs = field(default_factory=EvalKeyReqs)


def _fmt_scale(scale: Fraction) -> str:
    if scale.denominator == 1:
        n = scale.numerator
        if n and n & (n - 1) == 0:
            return f"2^{n.bit_length() - 1}"
        return str(n)
    return f"{scale.numerator}/{scale.denominator}"


def print_program(prog: CircuitProgram) -> str:
    """Canonical text form; parse(print_program(p)) reproduces p."""
    lines = []
    if prog.device_count != 1:
        lines.append(f"!devices {prog.device_count}")
    if prog.evalkeys.relin:
        lines.append("evk relin")
    if prog.evalkeys.rotations:
        rots = " ".join(str(r) for r in sorted(prog.evalkeys.rotations))
        lines.append(f"evk rot {rots}")
    for decl in prog.plaintexts.values():
        parts = [f"pt {decl.name} len={decl.length}"]
        if decl.stride is not None:
            parts.append(f"stride={decl.stride}")
        if decl.category != "Generic":
            parts.append(f"cat={decl.category}")
        if decl.scale is not None:
            parts.append(f"scale={_fmt_scale(decl.scale)}")
        lines.append(" ".join(parts))
    for fn in prog.functions.values():
        sig = []
        for p in fn.params:
            s = f"ct {p.name}"
            if p.level is not None:
                s += f" level={p.level}"
            if p.scale is not None:
                s += f" scale={_fmt_scale(p.scale)}"
            sig.append(s)
        lines.append(f"fn {fn.name}({', '.join(sig)}) {{")
        stream = 0
        for op in fn.body:
            if op.stream != stream:
                lines.append(f"  !stream {op.stream}")
                stream = op.stream
            if op.opcode == "rotate":
                lines.append(f"  {op.result} = rotate {op.args[0]} {op.rho}")
            elif op.opcode == "call":
                lines.append(f"  {op.result} = call {op.callee} {' '.join(op.args)}")
            else:
                lines.append(f"  {op.result} = {op.opcode} {' '.join(op.args)}")
        lines.append(f"  return {fn.returns}")
        lines.append("}")
    return "\n".join(lines) + "\n"
