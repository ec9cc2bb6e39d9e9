"""Limb-level IR: every polynomial instruction expanded per RNS base.

A limb instruction carries an opcode, the RNS base id it runs on, one
destination and its sources, plus metadata (scalars, galois element, base
conversion source list). The naive interpreter below executes instructions
one at a time through the shared row primitives; it is the bit-level oracle
that fused kernels, memory-scheduled plans, and multi-device runs must
reproduce exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .ntt import automorphism_permutation
from .params import CkksParams
from .poly import (
    Domain,
    RnsPolynomial,
    prime_for_id,
    row_add,
    row_base_convert,
    row_intt,
    row_modstep,
    row_mul,
    row_mulacc,
    row_neg,
    row_ntt,
    row_scalar_mul,
    row_sub,
)
from .polyir import (
    P_ADD,
    P_AUTOMORPH,
    P_BCONV,
    P_INTT,
    P_KS_INNER,
    P_MODDOWN,
    P_MUL,
    P_NTT,
    P_RESCALE_STEP,
    P_SUB,
    PolyDag,
)

OP_NTT = "NTT"
OP_INTT = "INTT"
OP_BCONV = "BConv"
OP_AUTOMORPH = "Automorph"
OP_ADD = "Add"
OP_SUB = "Sub"
OP_MUL = "Mul"
OP_MULACC = "MulAcc"
OP_NEG = "Neg"
OP_SCALARMUL = "ScalarMul"
OP_MODSTEP = "ModStep"

ELEMENTWISE_OPS = frozenset(
    {OP_ADD, OP_SUB, OP_MUL, OP_MULACC, OP_NEG, OP_SCALARMUL, OP_MODSTEP})

# categories drive the memory pool layout
CAT_INPUT = "CiphertextInputs"
CAT_WEIGHT = "PlaintextWeights"
CAT_PLAIN = "Plaintexts"
CAT_EVALKEY = "EvalKeys"
CAT_INTERMEDIATE = "Intermediates"


@dataclass
class LimbValue:
    lvid: int
    base_id: int
    ref: tuple = None       # input reference, None for computed rows
    category: str = CAT_INTERMEDIATE


@dataclass
class LimbInstr:
    idx: int
    opcode: str
    base_id: int
    dst: int
    srcs: tuple
    meta: dict = field(default_factory=dict)
    tag: tuple = None

    @property
    def is_elementwise(self):
        return self.opcode in ELEMENTWISE_OPS


class LimbDag:
    def __init__(self, params: CkksParams, name="seg"):
        self.params = params
        self.name = name
        self.values: list[LimbValue] = []
        self.instrs: list[LimbInstr] = []
        self.inputs: dict = {}        # ref tuple -> lvid
        self.outputs: dict = {}       # name -> dict(b=[lvids], a=[lvids], ids, level, scale)
        self.pt_categories: dict = {}

    def input_value(self, ref, base_id, category) -> int:
        if ref not in self.inputs:
            lvid = len(self.values)
            self.values.append(LimbValue(lvid, base_id, ref, category))
            self.inputs[ref] = lvid
        return self.inputs[ref]

    def new_value(self, base_id) -> int:
        lvid = len(self.values)
        self.values.append(LimbValue(lvid, base_id))
        return lvid

    def emit(self, opcode, base_id, dst, srcs, meta=None, tag=None):
        ins = LimbInstr(len(self.instrs), opcode, base_id, dst, tuple(srcs),
                        meta or {}, tag)
        self.instrs.append(ins)
        return ins

    def producer_map(self):
        return {ins.dst: ins.idx for ins in self.instrs}

    def opcode_counts(self):
        out = {}
        for ins in self.instrs:
            out[ins.opcode] = out.get(ins.opcode, 0) + 1
        return out


def lower_to_limb_ir(dag: PolyDag, pt_categories: dict | None = None) -> LimbDag:
    """Expand each poly instruction into one limb instruction per base row."""
    params = dag.params
    out = LimbDag(params, name=dag.name)
    out.pt_categories = dict(pt_categories or {})
    rowmap = {}   # (poly vid, base id) -> lvid

    def get_row(vid, bid):
        key = (vid, bid)
        if key not in rowmap:
            value = dag.values[vid]
            assert value.is_input, f"row {key} read before definition"
            ref = value.ref + (bid,)
            kind = value.ref[0]
            if kind == "ct":
                cat = CAT_INPUT
            elif kind == "pt":
                name = value.ref[1]
                cat = CAT_WEIGHT if out.pt_categories.get(name) == "Weight" else CAT_PLAIN
            else:
                cat = CAT_EVALKEY
            rowmap[key] = out.input_value(ref, bid, cat)
        return rowmap[key]

    def set_row(vid, bid, lvid):
        rowmap[(vid, bid)] = lvid

    for ins in dag.instrs:
        dst_val = dag.values[ins.dsts[0]]
        ids = dst_val.basis_ids

        if ins.opcode in (P_ADD, P_SUB) or (ins.opcode == P_MUL and "scalars" not in ins.meta):
            op = {P_ADD: OP_ADD, P_SUB: OP_SUB, P_MUL: OP_MUL}[ins.opcode]
            for bid in ids:
                d = out.new_value(bid)
                out.emit(op, bid, d,
                         (get_row(ins.srcs[0], bid), get_row(ins.srcs[1], bid)),
                         tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_MUL:  # scalar form
            scalars = ins.meta["scalars"]
            for bid in ids:
                d = out.new_value(bid)
                out.emit(OP_SCALARMUL, bid, d, (get_row(ins.srcs[0], bid),),
                         meta={"scalar": scalars[bid]}, tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_AUTOMORPH:
            g = ins.meta["galois"]
            for bid in ids:
                d = out.new_value(bid)
                out.emit(OP_AUTOMORPH, bid, d, (get_row(ins.srcs[0], bid),),
                         meta={"galois": g}, tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode in (P_NTT, P_INTT):
            op = OP_NTT if ins.opcode == P_NTT else OP_INTT
            for bid in ids:
                d = out.new_value(bid)
                out.emit(op, bid, d, (get_row(ins.srcs[0], bid),), tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_BCONV:
            src_ids = dag.values[ins.srcs[0]].basis_ids
            src_rows = tuple(get_row(ins.srcs[0], b) for b in src_ids)
            for bid in ids:
                d = out.new_value(bid)
                out.emit(OP_BCONV, bid, d, src_rows,
                         meta={"src_ids": src_ids}, tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_MODDOWN:
            src_ids = dag.values[ins.srcs[0]].basis_ids
            drop = tuple(b for b in src_ids if b not in ids)
            p_prod = 1
            for b in drop:
                p_prod *= prime_for_id(params, b)
            coeff_rows = []
            for b in drop:
                d = out.new_value(b)
                out.emit(OP_INTT, b, d, (get_row(ins.srcs[0], b),),
                         meta={"phase": "md_intt"}, tag=ins.tag)
                coeff_rows.append(d)
            for bid in ids:
                q = prime_for_id(params, bid)
                c = out.new_value(bid)
                out.emit(OP_BCONV, bid, c, tuple(coeff_rows),
                         meta={"src_ids": drop, "phase": "md_conv"}, tag=ins.tag)
                w = out.new_value(bid)
                out.emit(OP_NTT, bid, w, (c,), meta={"phase": "md_ntt"}, tag=ins.tag)
                d = out.new_value(bid)
                out.emit(OP_MODSTEP, bid, d, (get_row(ins.srcs[0], bid), w),
                         meta={"scalar": pow(p_prod % q, -1, q), "phase": "md_step",
                               "div": ("md", drop)},
                         tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_RESCALE_STEP:
            top = ins.meta["divisor_id"]
            q_top = prime_for_id(params, top)
            for bid in ids:
                q = prime_for_id(params, bid)
                d = out.new_value(bid)
                out.emit(OP_MODSTEP, bid, d,
                         (get_row(ins.srcs[0], bid), get_row(ins.srcs[1], bid)),
                         meta={"scalar": pow(q_top % q, -1, q), "div": ("rs", top)},
                         tag=ins.tag)
                set_row(ins.dsts[0], bid, d)

        elif ins.opcode == P_KS_INNER:
            own_ids = set(ins.meta["own_ids"])
            has_acc = len(ins.srcs) > 4
            for comp, dst_vid, evk_src in ((0, ins.dsts[0], ins.srcs[2]),
                                           (1, ins.dsts[1], ins.srcs[3])):
                for bid in ids:
                    d_src = ins.srcs[0] if bid in own_ids else ins.srcs[1]
                    d_row = get_row(d_src, bid)
                    k_row = get_row(evk_src, bid)
                    dd = out.new_value(bid)
                    if has_acc:
                        acc_row = get_row(ins.srcs[4 + comp], bid)
                        out.emit(OP_MULACC, bid, dd, (acc_row, d_row, k_row), tag=ins.tag)
                    else:
                        out.emit(OP_MUL, bid, dd, (d_row, k_row), tag=ins.tag)
                    set_row(dst_vid, bid, dd)

        else:
            raise ValueError(f"unhandled poly opcode {ins.opcode}")

    for name, (b, a, level, scale) in dag.outputs.items():
        ids = dag.values[b].basis_ids
        out.outputs[name] = {
            "ids": ids,
            "b": [get_row(b, bid) for bid in ids],
            "a": [get_row(a, bid) for bid in ids],
            "level": level,
            "scale": scale,
        }
    return out


# --- naive interpreter (the limb-level oracle) ------------------------------

def materialize_input_row(value: LimbValue, binder, params):
    kind = value.ref[0]
    bid = value.ref[-1]
    if kind == "ct":
        _, name, comp, _ = value.ref
        return binder.ct_poly(name, comp).row(bid)
    if kind == "pt":
        _, name, level, scale, _ = value.ref
        return binder.pt_poly(name, level, scale).row(bid)
    if kind == "evk":
        _, purpose, digit, comp, _ = value.ref
        return binder.evk_poly(purpose, digit, comp).row(bid)
    raise ValueError(f"unknown input kind {kind}")


def run_limb_dag(dag: LimbDag, binder, env: dict | None = None,
                 trace: dict | None = None) -> dict:
    """Execute instructions one at a time; returns named (b, a) outputs.

    env maps cross-segment circuit names to (b_poly, a_poly); trace, when
    given, captures every computed row for dual-path comparisons.
    """
    params = dag.params
    rows = {}

    def get(lvid):
        if lvid not in rows:
            rows[lvid] = materialize_input_row(dag.values[lvid], binder, params)
        return rows[lvid]

    if env:
        for ref, lvid in dag.inputs.items():
            if ref[0] == "ct" and ref[1] in env:
                poly = env[ref[1]][0] if ref[2] == "b" else env[ref[1]][1]
                rows[lvid] = poly.row(ref[3])

    for ins in dag.instrs:
        q = prime_for_id(params, ins.base_id)
        s = ins.srcs
        if ins.opcode == OP_ADD:
            r = row_add(get(s[0]), get(s[1]), q)
        elif ins.opcode == OP_SUB:
            r = row_sub(get(s[0]), get(s[1]), q)
        elif ins.opcode == OP_MUL:
            r = row_mul(get(s[0]), get(s[1]), q)
        elif ins.opcode == OP_MULACC:
            r = row_mulacc(get(s[0]), get(s[1]), get(s[2]), q)
        elif ins.opcode == OP_NEG:
            r = row_neg(get(s[0]), q)
        elif ins.opcode == OP_SCALARMUL:
            r = row_scalar_mul(get(s[0]), ins.meta["scalar"], q)
        elif ins.opcode == OP_MODSTEP:
            r = row_modstep(get(s[0]), get(s[1]), ins.meta["scalar"], q)
        elif ins.opcode == OP_AUTOMORPH:
            perm = automorphism_permutation(params.N, ins.meta["galois"])
            r = get(s[0])[perm]
        elif ins.opcode == OP_NTT:
            r = row_ntt(get(s[0]), q)
        elif ins.opcode == OP_INTT:
            r = row_intt(get(s[0]), q)
        elif ins.opcode == OP_BCONV:
            src_primes = tuple(prime_for_id(params, b) for b in ins.meta["src_ids"])
            r = row_base_convert(np.stack([get(x) for x in s]), src_primes, q)
        else:
            raise ValueError(f"unhandled limb opcode {ins.opcode}")
        rows[ins.dst] = r
        if trace is not None:
            trace[ins.dst] = r

    out = {}
    for name, spec in dag.outputs.items():
        b = RnsPolynomial(np.stack([get(x) for x in spec["b"]]), Domain.EVAL, spec["ids"])
        a = RnsPolynomial(np.stack([get(x) for x in spec["a"]]), Domain.EVAL, spec["ids"])
        out[name] = (b, a, spec["level"], spec["scale"])
    return out
