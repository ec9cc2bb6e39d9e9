"""Kernel plan generation and the portable kernel interpreter.

A fused limb-IR node becomes a KernelPlan: per-lane straight-line programs
over virtual registers, an operand table of external buffer references, and
statically placed modular-reduction points. Plans are split when register
or operand estimates exceed the configured budgets, elementwise lanes that
share inputs are downgraded into one lane so the value is read once, and
modular reduction is inserted lazily from static value-growth bounds.

The interpreter executes plans against caller-provided row storage; run on
the same inputs it reproduces the naive one-instruction-at-a-time oracle
bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import UnsplittableKernel
from .fusion import FusedInstr
from .limbir import (
    ELEMENTWISE_OPS,
    OP_ADD,
    OP_AUTOMORPH,
    OP_BCONV,
    OP_INTT,
    OP_MODSTEP,
    OP_MUL,
    OP_MULACC,
    OP_NEG,
    OP_NTT,
    OP_SCALARMUL,
    OP_SUB,
)
from .ntt import U64, NttTables, automorphism_permutation, ntt_tables
from .params import CkksParams
from .poly import prime_for_id

WORD_MAX = 1 << 64

REG = "r"    # operand held in a lane register
SLOT = "s"   # operand read through the kernel operand table


@dataclass
class CompilerConfig:
    subdag_max: int = 4096
    reg_threshold: int = 128          # virtual registers per lane
    operand_threshold: int = 256      # distinct buffers per kernel
    lazy_budget: int = 256            # max unreduced accumulation terms

    def __post_init__(self):
        assert self.subdag_max > 0 and self.reg_threshold > 0
        assert self.operand_threshold > 0 and self.lazy_budget > 0


@dataclass
class LaneOp:
    opcode: str
    dst_reg: int
    srcs: tuple                # ((REG, reg) | (SLOT, slot), ...) in operand order
    meta: dict = field(default_factory=dict)
    store_slot: int = None     # operand-table index written, if any
    reduce_after: bool = True
    bound: int = 0             # static value bound after this op


@dataclass
class Lane:
    base_id: int
    prime: int
    ops: list
    regs_used: int = 0


@dataclass
class KernelPlan:
    kernel_id: int
    opclass: str
    lanes: list
    operand_table: list        # lvids; reads and writes share one table
    writes: list               # operand indices written by this kernel
    est_regs: int = 0
    est_operands: int = 0
    source: FusedInstr = None
    external_uses: dict = field(default_factory=dict)
    output_rows: frozenset = frozenset()

    @property
    def reduction_points(self):
        return [(li, oi) for li, lane in enumerate(self.lanes)
                for oi, op in enumerate(lane.ops) if op.reduce_after]

    def summary(self):
        return (f"kernel {self.kernel_id}: {self.opclass} lanes={len(self.lanes)} "
                f"regs={self.est_regs} operands={self.est_operands} "
                f"reductions={len(self.reduction_points)}")


def build_twiddle_tables(params: CkksParams) -> dict:
    """Pre-permuted twiddle tables for every prime in the parameter set.

    Tables are stored in bit-reversed order so every butterfly stage reads
    one contiguous slice; see NttTables.
    """
    return {q: ntt_tables(params.N, q)
            for q in params.rns_basis + params.special_basis}


# --- plan generation ---------------------------------------------------------

def _downgrade_shared_loads(lanes_members):
    """Merge same-base lanes that read a common external buffer.

    The shared value is then loaded once by a single lane (thread) instead
    of once per lane, trading parallelism for bandwidth.
    """
    groups = []
    for lane in lanes_members:
        base = lane[0].base_id
        reads = {s for ins in lane for s in ins.srcs}
        placed = False
        for g in groups:
            if g["base"] == base and g["reads"] & reads:
                g["lanes"].append(lane)
                g["reads"] |= reads
                placed = True
                break
        if not placed:
            groups.append({"base": base, "reads": set(reads), "lanes": [lane]})
    return [[ins for lane in g["lanes"] for ins in lane] for g in groups]


def gen_kernel(fused: FusedInstr, params: CkksParams, cfg: CompilerConfig,
               external_uses=None, output_rows=frozenset()) -> KernelPlan:
    """Lower one fused node into an executable kernel plan.

    external_uses maps lvid -> number of reads outside this kernel; member
    destinations with external readers (or marked as DAG outputs) are
    stored to memory, everything else lives and dies in registers.
    """
    external_uses = external_uses or {}
    lanes_members = [list(lane) for lane in fused.lanes]
    if fused.opclass in ELEMENTWISE_OPS:
        lanes_members = _downgrade_shared_loads(lanes_members)

    operand_table = []
    slot_of = {}

    def slot(lvid):
        if lvid not in slot_of:
            slot_of[lvid] = len(operand_table)
            operand_table.append(lvid)
        return slot_of[lvid]

    plan_lanes = []
    writes = []
    for lane_members in lanes_members:
        base = lane_members[0].base_id
        q = prime_for_id(params, base)
        reg_of = {}
        ops = []
        for k, ins in enumerate(lane_members):
            srcs = tuple(
                (REG, reg_of[s]) if s in reg_of else (SLOT, slot(s))
                for s in ins.srcs)
            d = len(ops)
            store = None
            if (external_uses.get(ins.dst, 0) > 0 or ins.dst in output_rows
                    or k == len(lane_members) - 1):
                store = slot(ins.dst)
                writes.append(store)
            ops.append(LaneOp(ins.opcode, d, srcs, dict(ins.meta), store, True, q - 1))
            reg_of[ins.dst] = d
        lane = Lane(base_id=base, prime=q, ops=ops)
        lane.regs_used = len(ops) + sum(
            1 for op in ops for kind, _ in op.srcs if kind == SLOT)
        plan_lanes.append(lane)

    plan = KernelPlan(
        kernel_id=fused.fid,
        opclass=fused.opclass,
        lanes=plan_lanes,
        operand_table=operand_table,
        writes=sorted(set(writes)),
        source=fused,
        external_uses=dict(external_uses),
        output_rows=frozenset(output_rows),
    )
    plan.est_regs = max(l.regs_used for l in plan_lanes)
    plan.est_operands = len(operand_table)
    return plan


def plan_lazy_reduction(plan: KernelPlan, params: CkksParams,
                        cfg: CompilerConfig) -> KernelPlan:
    """Place modular reductions lazily from static value-growth bounds.

    A register is reduced only when a consumer needs a canonical value
    (subtraction family, or a multiply that could overflow 64 bits), when
    an accumulation would reach 2^64 or the term budget, or at a store.
    Every product term stays below 2^56, giving 2^8 accumulation headroom.
    """
    for lane in plan.lanes:
        q = lane.prime
        bound = {}     # reg -> static bound
        terms = {}     # reg -> accumulated term count
        producer = {}  # reg -> LaneOp

        for op in lane.ops:
            op.reduce_after = False

            def b_of(ref):
                kind, idx = ref
                return bound.get(idx, q - 1) if kind == REG else q - 1

            def force(ref):
                kind, idx = ref
                if kind == REG and bound.get(idx, q - 1) >= q:
                    producer[idx].reduce_after = True
                    bound[idx] = q - 1
                    terms[idx] = 1

            oc = op.opcode
            if oc in (OP_SUB, OP_NEG, OP_MODSTEP):
                for ref in op.srcs:
                    force(ref)
                out_b, out_t = q - 1, 1
            elif oc == OP_ADD:
                if sum(b_of(r) for r in op.srcs) >= WORD_MAX:
                    for ref in op.srcs:
                        force(ref)
                out_b = sum(b_of(r) for r in op.srcs)
                out_t = sum(terms.get(i, 1) if k == REG else 1 for k, i in op.srcs)
                if out_t > cfg.lazy_budget:
                    for ref in op.srcs:
                        force(ref)
                    out_b = sum(b_of(r) for r in op.srcs)
                    out_t = len(op.srcs)
            elif oc == OP_MUL:
                if b_of(op.srcs[0]) * b_of(op.srcs[1]) >= WORD_MAX:
                    for ref in op.srcs:
                        force(ref)
                out_b, out_t = b_of(op.srcs[0]) * b_of(op.srcs[1]), 1
            elif oc == OP_MULACC:
                acc, x, y = op.srcs
                if b_of(x) * b_of(y) >= WORD_MAX:
                    force(x)
                    force(y)
                prod = b_of(x) * b_of(y)
                t = (terms.get(acc[1], 1) if acc[0] == REG else 1) + 1
                if b_of(acc) + prod >= WORD_MAX or t > cfg.lazy_budget:
                    force(acc)
                    t = 2
                out_b, out_t = b_of(acc) + prod, t
            elif oc == OP_SCALARMUL:
                if b_of(op.srcs[0]) * (q - 1) >= WORD_MAX:
                    force(op.srcs[0])
                out_b, out_t = b_of(op.srcs[0]) * (q - 1), 1
            elif oc == OP_AUTOMORPH:
                out_b, out_t = b_of(op.srcs[0]), 1
            else:  # NTT / INTT / BConv produce canonical rows
                out_b, out_t = q - 1, 1

            if op.store_slot is not None and out_b >= q:
                op.reduce_after = True
                out_b, out_t = q - 1, 1
            op.bound = out_b
            bound[op.dst_reg] = out_b
            terms[op.dst_reg] = out_t
            producer[op.dst_reg] = op
    return plan


def split_kernel(plan: KernelPlan, params: CkksParams, cfg: CompilerConfig):
    """Split a plan until register and operand estimates fit the budgets.

    Register pressure cuts every lane chain at a member boundary (the cut
    value is just materialized; it already names a limb row); operand
    pressure splits the lane set into groups. A single instruction that
    still exceeds the budgets is a configuration error.
    """
    if plan.est_regs <= cfg.reg_threshold and plan.est_operands <= cfg.operand_threshold:
        return [plan]

    fused = plan.source

    def regen(lanes, extra_uses=None):
        uses = dict(plan.external_uses)
        for lvid, n in (extra_uses or {}).items():
            uses[lvid] = uses.get(lvid, 0) + n
        sub = gen_kernel(FusedInstr(fused.fid, fused.opclass, lanes), params, cfg,
                         uses, plan.output_rows)
        sub = plan_lazy_reduction(sub, params, cfg)
        return split_kernel(sub, params, cfg)

    if len(fused.lanes) == 1 and len(fused.lanes[0]) == 1:
        raise UnsplittableKernel(
            f"kernel {plan.kernel_id} ({plan.opclass}) exceeds budgets with a "
            f"single instruction; raise the thresholds")

    if plan.est_regs > cfg.reg_threshold and fused.depth() > 1:
        cut = max(1, fused.depth() // 2)
        upper = [lane[:cut] for lane in fused.lanes if lane[:cut]]
        lower = [lane[cut:] for lane in fused.lanes if lane[cut:]]
        # values crossing the cut must be materialized by the upper part
        crossing = {}
        upper_dsts = {ins.dst for lane in upper for ins in lane}
        for lane in lower:
            for ins in lane:
                for s in ins.srcs:
                    if s in upper_dsts:
                        crossing[s] = crossing.get(s, 0) + 1
        return regen(upper, crossing) + regen(lower)

    half = max(1, len(fused.lanes) // 2)
    out = []
    for lanes in (fused.lanes[:half], fused.lanes[half:]):
        if lanes:
            out.extend(regen(lanes))
    return out


def gen_ntt_kernel(fused: FusedInstr, tables: dict, params: CkksParams,
                   cfg: CompilerConfig, external_uses=None,
                   output_rows=frozenset()) -> KernelPlan:
    """Plan a fused NTT/INTT kernel: staged butterflies, twiddles by slice."""
    assert fused.opclass in (OP_NTT, OP_INTT)
    plan = gen_kernel(fused, params, cfg, external_uses, output_rows)
    forward = fused.opclass == OP_NTT
    N = params.N
    stages = []
    t, m = (1, N // 2) if forward else (N // 2, 1)
    while (m >= 1) if forward else (m < N):
        stages.append({"t": t, "m": m, "twiddle_slice": (t, 2 * t)})
        t, m = (t * 2, m // 2) if forward else (t // 2, m * 2)
    for lane in plan.lanes:
        lane.ops[0].meta["stages"] = stages
        lane.ops[0].meta["table"] = tables[lane.prime]
    plan.est_regs = max(plan.est_regs, 4)
    return plan


# --- portable interpreter ------------------------------------------------------

class KernelRunner:
    """Executes kernel plans over caller-managed row storage.

    Scratch registers are preallocated per runner and reused across lanes,
    so steady-state execution performs no buffer allocation.
    """

    def __init__(self, params: CkksParams, max_regs: int = 512):
        self.params = params
        self.N = params.N
        self.scratch = np.empty((max_regs, params.N), dtype=U64)

    def run(self, plan: KernelPlan, read_row, write_row):
        assert plan.est_regs <= self.scratch.shape[0], "scratch undersized for plan"
        for lane in plan.lanes:
            self._run_lane(plan, lane, read_row, write_row)

    def _run_lane(self, plan, lane, read_row, write_row):
        q = U64(lane.prime)
        regs = self.scratch

        for op in lane.ops:
            srcs = [regs[i] if kind == REG else read_row(plan.operand_table[i])
                    for kind, i in op.srcs]
            dst = regs[op.dst_reg]
            oc = op.opcode
            # Sub/Neg/ModStep produce canonical residues (matching the naive
            # primitives); the lazily reducible ops leave growth to `bound`.
            if oc == OP_ADD:
                np.add(srcs[0], srcs[1], out=dst)
            elif oc == OP_SUB:
                np.subtract(q, srcs[1], out=dst)
                np.add(dst, srcs[0], out=dst)
                np.mod(dst, q, out=dst)
            elif oc == OP_MUL:
                np.multiply(srcs[0], srcs[1], out=dst)
            elif oc == OP_MULACC:
                np.multiply(srcs[1], srcs[2], out=dst)
                np.add(dst, srcs[0], out=dst)
            elif oc == OP_NEG:
                np.subtract(q, srcs[0], out=dst)
                np.mod(dst, q, out=dst)
            elif oc == OP_SCALARMUL:
                np.multiply(srcs[0], U64(op.meta["scalar"] % lane.prime), out=dst)
            elif oc == OP_MODSTEP:
                np.subtract(q, srcs[1], out=dst)
                np.add(dst, srcs[0], out=dst)
                np.mod(dst, q, out=dst)
                np.multiply(dst, U64(op.meta["scalar"] % lane.prime), out=dst)
                np.mod(dst, q, out=dst)
            elif oc == OP_AUTOMORPH:
                perm = automorphism_permutation(self.N, op.meta["galois"])
                np.take(srcs[0], perm, out=dst)
            elif oc in (OP_NTT, OP_INTT):
                self._run_ntt(op, srcs[0], dst, lane.prime, forward=oc == OP_NTT)
            elif oc == OP_BCONV:
                self._run_bconv(op, srcs, dst, lane.prime)
            else:
                raise ValueError(f"unhandled kernel op {oc}")

            if op.reduce_after:
                np.mod(dst, q, out=dst)
            if op.store_slot is not None:
                np.copyto(write_row(plan.operand_table[op.store_slot]), dst)

    def _run_ntt(self, op, src, dst, prime, forward):
        table: NttTables = op.meta.get("table") or ntt_tables(self.N, prime)
        qv = U64(prime)
        np.copyto(dst, src)
        N = self.N
        if forward:
            t, m = 1, N // 2
            while m >= 1:
                w = table.forward_stage_slice(t)
                blk = dst.reshape(t, 2, m)
                u = blk[:, 0, :]
                v = blk[:, 1, :] * w[:, None] % qv
                blk[:, 1, :] = (u + (qv - v)) % qv
                blk[:, 0, :] = (u + v) % qv
                t, m = t * 2, m // 2
        else:
            t, m = N // 2, 1
            while m < N:
                w = table.inverse_stage_slice(t)
                blk = dst.reshape(t, 2, m)
                u = blk[:, 0, :].copy()
                v = blk[:, 1, :]
                blk[:, 0, :] = (u + v) % qv
                blk[:, 1, :] = (u + (qv - v)) % qv * w[:, None] % qv
                t, m = t // 2, m * 2
            np.multiply(dst, U64(table.n_inv), out=dst)
            np.mod(dst, qv, out=dst)

    def _run_bconv(self, op, srcs, dst, prime):
        from .poly import row_base_convert

        src_primes = tuple(prime_for_id(self.params, b) for b in op.meta["src_ids"])
        row_base_convert(np.stack(srcs), src_primes, prime, out=dst)


def plan_kernels(fused_nodes, dag, params: CkksParams, cfg: CompilerConfig,
                 tables=None):
    """Generate, lazy-reduce, and split plans for a whole fused DAG."""
    tables = tables or build_twiddle_tables(params)
    member_of = {}
    for node in fused_nodes:
        for ins in node.members:
            member_of[ins.dst] = node.fid
    uses = {}
    for ins in dag.instrs:
        for s in ins.srcs:
            uses[s] = uses.get(s, 0) + 1
    output_rows = {row for spec in dag.outputs.values()
                   for row in spec["b"] + spec["a"]}

    plans = []
    for node in fused_nodes:
        internal = {}
        for ins in node.members:
            for s in ins.srcs:
                if member_of.get(s) == node.fid:
                    internal[s] = internal.get(s, 0) + 1
        ext = {ins.dst: uses.get(ins.dst, 0) - internal.get(ins.dst, 0)
               for ins in node.members}
        if node.opclass in (OP_NTT, OP_INTT):
            plan = gen_ntt_kernel(node, tables, params, cfg, ext, output_rows)
        else:
            plan = gen_kernel(node, params, cfg, ext, output_rows)
        plan = plan_lazy_reduction(plan, params, cfg)
        plans.extend(split_kernel(plan, params, cfg))
    for k, plan in enumerate(plans):
        plan.kernel_id = k
    return plans
