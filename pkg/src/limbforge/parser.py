"""Line-oriented parser for the circuit text format.

Grammar sketch:
    !devices K
    evk relin
    evk rot R1 R2 ...
    pt NAME len=L [stride=P] [cat=Weight] [scale=2^K]
    fn NAME(ct X [level=L] [scale=S], ...) {
      [!stream S]
      V = add A B | sub A B | mul A B | mulplain A P | rotate A R | rescale A
      V = call F A ...
      return V
    }

Reports the first error with its line number.
"""

import re
from fractions import Fraction

from .circuit import (
    CATEGORIES,
    CircuitOp,
    CircuitProgram,
    EvalKeyReqs,
    FunctionDef,
    Param,
    PlaintextDecl,
)
from .errors import DuplicateDefinition, ParseError, UnknownOp

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _parse_scale(text: str, ln: int) -> Fraction:
    if text.startswith("2^"):
        return Fraction(2) ** int(text[2:])
    if "/" in text:
        num, den = text.split("/", 1)
        return Fraction(int(num), int(den))
    try:
        return Fraction(int(text))
    except ValueError as e:
        raise ParseError(f"bad scale {text!r}", ln) from e


def _parse_kv(parts, ln, allowed):
    out = {}
    for part in parts:
        if "=" not in part:
            raise ParseError(f"expected key=value, got {part!r}", ln)
        k, v = part.split("=", 1)
        if k not in allowed:
            raise ParseError(f"unknown attribute {k!r}", ln)
        out[k] = v
    return out


def _check_name(name, ln):
    if not _NAME.match(name):
        raise ParseError(f"bad identifier {name!r}", ln)
    return name


def parse_program(text: str) -> CircuitProgram:
    functions = {}
    plaintexts = {}
    evalkeys = EvalKeyReqs()
    device_count = 1
    current = None      # FunctionDef being filled
    defined = None      # SSA names visible in current function
    stream = 0

    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue

        if line.startswith("!devices"):
            if current:
                raise ParseError("!devices must appear at top level", ln)
            device_count = int(line.split()[1])
            continue

        if line.startswith("!stream"):
            if not current:
                raise ParseError("!stream only valid inside a function", ln)
            stream = int(line.split()[1])
            continue

        if line.startswith("evk "):
            parts = line.split()
            if parts[1] == "relin":
                evalkeys.relin = True
            elif parts[1] == "rot":
                evalkeys.rotations.update(int(r) for r in parts[2:])
            else:
                raise ParseError(f"unknown evalkey kind {parts[1]!r}", ln)
            continue

        if line.startswith("pt "):
            parts = line.split()
            name = _check_name(parts[1], ln)
            if name in plaintexts:
                raise DuplicateDefinition(f"plaintext {name!r} already declared", ln)
            kv = _parse_kv(parts[2:], ln, ("len", "stride", "cat", "scale"))
            if "len" not in kv:
                raise ParseError("plaintext declaration needs len=", ln)
            cat = kv.get("cat", "Generic")
            if cat not in CATEGORIES:
                raise ParseError(f"unknown category {cat!r}", ln)
            plaintexts[name] = PlaintextDecl(
                name=name,
                length=int(kv["len"]),
                stride=int(kv["stride"]) if "stride" in kv else None,
                category=cat,
                scale=_parse_scale(kv["scale"], ln) if "scale" in kv else None,
            )
            continue

        if line.startswith("fn "):
            if current:
                raise ParseError("nested function definition", ln)
            m = re.match(r"fn\s+(\w+)\s*\((.*)\)\s*\{$", line)
            if not m:
                raise ParseError("malformed function header", ln)
            name = _check_name(m.group(1), ln)
            if name in functions:
                raise DuplicateDefinition(f"function {name!r} already defined", ln)
            params = []
            argtext = m.group(2).strip()
            if argtext:
                for chunk in argtext.split(","):
                    toks = chunk.split()
                    if len(toks) < 2 or toks[0] != "ct":
                        raise ParseError(f"malformed parameter {chunk.strip()!r}", ln)
                    kv = _parse_kv(toks[2:], ln, ("level", "scale"))
                    params.append(Param(
                        name=_check_name(toks[1], ln),
                        level=int(kv["level"]) if "level" in kv else None,
                        scale=_parse_scale(kv["scale"], ln) if "scale" in kv else None,
                    ))
            current = FunctionDef(name=name, params=params)
            defined = {p.name for p in params}
            stream = 0
            continue

        if line == "}":
            if not current:
                raise ParseError("unmatched closing brace", ln)
            if current.returns is None:
                raise ParseError(f"function {current.name!r} has no return", ln)
            functions[current.name] = current
            current = None
            continue

        if not current:
            raise ParseError(f"statement outside function: {line!r}", ln)

        if line.startswith("return"):
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("return takes exactly one value", ln)
            if parts[1] not in defined:
                raise ParseError(f"return of undefined value {parts[1]!r}", ln)
            current.returns = parts[1]
            continue

        m = re.match(r"(\w+)\s*=\s*(\w+)\s*(.*)$", line)
        if not m:
            raise ParseError(f"malformed statement: {line!r}", ln)
        result, opcode, rest = m.group(1), m.group(2), m.group(3)
        args = tuple(rest.split())
        if result in defined:
            raise DuplicateDefinition(f"value {result!r} reassigned (SSA form required)", ln)

        if opcode in ("add", "sub", "mul", "mulplain"):
            if len(args) != 2:
                raise ParseError(f"{opcode} takes two operands", ln)
            op = CircuitOp(result, opcode, args, stream=stream, line=ln)
        elif opcode == "rotate":
            if len(args) != 2:
                raise ParseError("rotate takes a value and a step count", ln)
            op = CircuitOp(result, "rotate", (args[0],), rho=int(args[1]),
                           stream=stream, line=ln)
        elif opcode == "rescale":
            if len(args) != 1:
                raise ParseError("rescale takes one operand", ln)
            op = CircuitOp(result, "rescale", args, stream=stream, line=ln)
        elif opcode == "call":
            if len(args) < 1:
                raise ParseError("call needs a function name", ln)
            op = CircuitOp(result, "call", tuple(args[1:]), callee=args[0],
                           stream=stream, line=ln)
        else:
            raise UnknownOp(f"unknown op {opcode!r}", ln)

        for a in op.args:
            if a not in defined and a not in plaintexts:
                raise ParseError(f"use of undefined value {a!r}", op.line)
        current.body.append(op)
        defined.add(result)

    if current:
        raise ParseError(f"function {current.name!r} missing closing brace",
                         len(text.splitlines()))
    if not functions:
        raise ParseError("no functions defined", 1)

    entry = "main" if "main" in functions else next(iter(functions))
    for fn in functions.values():
        for op in fn.body:
            if op.opcode == "call" and op.callee not in functions:
                raise UnknownOp(f"call of undefined function {op.callee!r}", op.line)

    return CircuitProgram(
        functions=functions,
        entry=entry,
        device_count=device_count,
        plaintexts=plaintexts,
        evalkeys=evalkeys,
    )
