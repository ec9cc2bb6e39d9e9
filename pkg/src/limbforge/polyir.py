"""Polynomial-level IR: ciphertext ops expanded into polynomial recipes.

Each circuit op lowers to its exact polynomial steps (multiply becomes the
tensor product plus a relinearizing keyswitch; rotate becomes decompose,
permute, inner-product, mod-down), so that running the DAG on the reference
primitives reproduces the direct evaluator bit for bit. Rotations are
emitted in decompose-then-permute order, which makes hoisting a pure
deduplication of the shared mod-up.

Functions are compiled per call-free segment; call sites are linked at the
runtime level. Cross-segment ciphertext values flow through named slots.
"""

from dataclasses import dataclass, field, replace

from .ckks import decomposition_scalars
from .ntt import galois_element
from .params import CkksParams
from .poly import Domain, extended_ids, main_ids
from .typecheck import TypedProgram

# opcode names mirror the IR documentation
P_ADD = "PAdd"
P_SUB = "PSub"
P_MUL = "PMul"
P_AUTOMORPH = "PAutomorph"
P_NTT = "PNtt"
P_INTT = "PIntt"
P_BCONV = "PBaseConvert"
P_MODDOWN = "PModDown"
P_RESCALE_STEP = "PRescaleStep"
P_KS_INNER = "PKsInnerProd"


@dataclass
class PolyValue:
    vid: int
    basis_ids: tuple
    domain: Domain
    ref: tuple = None    # ('ct', name, comp) | ('pt', name, level, scale) | ('evk', purpose, digit, comp)

    @property
    def is_input(self):
        return self.ref is not None


@dataclass
class PolyInstr:
    idx: int
    opcode: str
    dsts: tuple
    srcs: tuple
    meta: dict = field(default_factory=dict)
    tag: tuple = None    # (site_kind, site_id, role)


@dataclass
class KsSite:
    """Bookkeeping for one keyswitch: enables hoisting and device lowering."""
    site_id: int
    kind: str                  # 'rot' | 'relin'
    source_vid: int
    level: int
    decomp_instrs: list        # PolyInstr objects of the shared mod-up
    pieces: list               # [(digit, own_vid, ext_vid)]


@dataclass
class HoistGroup:
    source_vid: int
    member_sites: list         # site ids sharing the decomposition


class PolyDag:
    def __init__(self, params: CkksParams, name: str = "seg"):
        self.params = params
        self.name = name
        self.values: list[PolyValue] = []
        self.instrs: list[PolyInstr] = []
        self.inputs: dict = {}        # ('ct', name) -> (b_vid, a_vid)
        self.pt_inputs: dict = {}     # (name, level, scale) -> vid
        self.evk_inputs: dict = {}    # (purpose, digit, comp) -> vid
        self.outputs: dict = {}       # circuit value name -> (b_vid, a_vid, level, scale)
        self.ks_sites: list[KsSite] = []
        self._site_counter = 0

    # --- construction -----------------------------------------------------

    def new_value(self, basis_ids, domain, ref=None) -> int:
        vid = len(self.values)
        self.values.append(PolyValue(vid, tuple(basis_ids), domain, ref))
        return vid

    def emit(self, opcode, dsts, srcs, meta=None, tag=None) -> PolyInstr:
        instr = PolyInstr(len(self.instrs), opcode, tuple(dsts), tuple(srcs),
                          meta or {}, tag)
        self.instrs.append(instr)
        return instr

    def ct_input(self, name: str, level: int):
        key = ("ct", name)
        if key not in self.inputs:
            ids = main_ids(level)
            b = self.new_value(ids, Domain.EVAL, ref=("ct", name, "b"))
            a = self.new_value(ids, Domain.EVAL, ref=("ct", name, "a"))
            self.inputs[key] = (b, a)
        return self.inputs[key]

    def pt_input(self, name: str, level: int, scale) -> int:
        key = (name, level, scale)
        if key not in self.pt_inputs:
            self.pt_inputs[key] = self.new_value(
                main_ids(level), Domain.EVAL, ref=("pt", name, level, scale))
        return self.pt_inputs[key]

    def evk_input(self, purpose, digit: int, comp: str, level: int) -> int:
        key = (purpose, digit, comp)
        if key not in self.evk_inputs:
            self.evk_inputs[key] = self.new_value(
                extended_ids(self.params, level), Domain.EVAL,
                ref=("evk", purpose, digit, comp))
        else:
            # widen to the largest level used
            vid = self.evk_inputs[key]
            have = self.values[vid].basis_ids
            want = extended_ids(self.params, level)
            if len(want) > len(have):
                self.values[vid] = replace(self.values[vid], basis_ids=want)
        return self.evk_inputs[key]

    def next_site(self) -> int:
        self._site_counter += 1
        return self._site_counter - 1

    # --- queries ------------------------------------------------------------

    def producer_map(self) -> dict:
        prod = {}
        for ins in self.instrs:
            for d in ins.dsts:
                prod[d] = ins.idx
        return prod

    def use_map(self) -> dict:
        uses = {}
        for ins in self.instrs:
            for s in ins.srcs:
                uses.setdefault(s, []).append(ins.idx)
        return uses

    def opcode_counts(self) -> dict:
        out = {}
        for ins in self.instrs:
            out[ins.opcode] = out.get(ins.opcode, 0) + 1
        return out

    def renumber(self):
        for i, ins in enumerate(self.instrs):
            ins.idx = i


# --- lowering ----------------------------------------------------------------

@dataclass
class CallStep:
    callee: str
    arg_names: tuple        # caller-scope circuit value names
    result_name: str
    stream: int = 0


@dataclass
class FunctionIR:
    """Alternating call-free poly DAG segments and call steps."""
    name: str
    steps: list             # PolyDag | CallStep
    param_names: tuple
    returns: str


def lower_to_poly_ir(typed: TypedProgram, fn_name: str | None = None) -> FunctionIR:
    prog, params = typed.program, typed.params
    fn_name = fn_name or prog.entry
    fn = prog.functions[fn_name]
    info = typed.value_info[fn_name]

    steps = []
    seg = PolyDag(params, name=f"{fn_name}.s0")
    env = {}          # circuit value -> (b_vid, a_vid) in current segment
    ext_env = set()   # values defined in previous steps (reachable via slots)

    def seg_value(name):
        if name not in env:   # cross-segment or parameter: materialize as input
            b, a = seg.ct_input(name, info[name].level)
            env[name] = (b, a)
        return env[name]

    def close_segment():
        nonlocal seg, env
        if seg.instrs:
            for name, (b, a) in env.items():
                if seg.values[b].is_input and seg.values[a].is_input:
                    continue
                seg.outputs[name] = (b, a, info[name].level, info[name].scale)
            steps.append(seg)
        seg = PolyDag(params, name=f"{fn_name}.s{len(steps) + 1}")
        env = {}

    lower = _OpLowering(typed, fn_name)
    for p in fn.params:
        seg_value(p.name)

    for op in fn.body:
        if op.opcode == "call":
            close_segment()
            steps.append(CallStep(op.callee, tuple(op.args), op.result, op.stream))
            ext_env.add(op.result)
        else:
            env[op.result] = lower.emit(seg, op, seg_value)

    # final segment: keep the return value as an output even if pass-through
    out_name = fn.returns
    if out_name in env:
        b, a = env[out_name]
        seg.outputs[out_name] = (b, a, info[out_name].level, info[out_name].scale)
        if seg.instrs or len(steps) == 0:
            steps.append(seg)

    _prune_segment_outputs(steps, out_name)
    return FunctionIR(fn_name, steps, tuple(p.name for p in fn.params), out_name)


def _prune_segment_outputs(steps, out_name):
    """Keep only segment outputs consumed by later steps or returned."""
    needed = {out_name}
    for step in reversed(steps):
        if isinstance(step, CallStep):
            needed.discard(step.result_name)
            needed.update(step.arg_names)
        else:
            step.outputs = {k: v for k, v in step.outputs.items() if k in needed}
            needed.difference_update(step.outputs)
            needed.update(key[1] for key in step.inputs)


class _OpLowering:
    def __init__(self, typed: TypedProgram, fn_name: str):
        self.typed = typed
        self.prog = typed.program
        self.params = typed.params
        self.fn_name = fn_name
        self.info = typed.value_info[fn_name]
        self.uses = typed.pt_uses[fn_name]

    def emit(self, dag: PolyDag, op, seg_value):
        handler = getattr(self, f"_{op.opcode}")
        return handler(dag, op, seg_value)

    # -- elementwise --

    def _ewise_pair(self, dag, op, seg_value, opcode):
        b1, a1 = seg_value(op.args[0])
        other = op.args[1]
        level = self.info[op.args[0]].level
        ids = main_ids(level)
        if other in self.prog.plaintexts:
            u = self.uses[other]
            pt = dag.pt_input(other, u.level, u.scale)
            b = dag.new_value(ids, Domain.EVAL)
            dag.emit(opcode, (b,), (b1, pt))
            return b, a1
        b2, a2 = seg_value(other)
        b = dag.new_value(ids, Domain.EVAL)
        a = dag.new_value(ids, Domain.EVAL)
        dag.emit(opcode, (b,), (b1, b2))
        dag.emit(opcode, (a,), (a1, a2))
        return b, a

    def _add(self, dag, op, seg_value):
        return self._ewise_pair(dag, op, seg_value, P_ADD)

    def _sub(self, dag, op, seg_value):
        return self._ewise_pair(dag, op, seg_value, P_SUB)

    def _mulplain(self, dag, op, seg_value):
        b1, a1 = seg_value(op.args[0])
        u = self.uses[op.args[1]]
        pt = dag.pt_input(op.args[1], u.level, u.scale)
        ids = main_ids(u.level)
        b = dag.new_value(ids, Domain.EVAL)
        a = dag.new_value(ids, Domain.EVAL)
        dag.emit(P_MUL, (b,), (b1, pt))
        dag.emit(P_MUL, (a,), (a1, pt))
        return b, a

    # -- keyswitch machinery --

    def _decompose(self, dag, x_vid, level, sid):
        params = self.params
        ext = extended_ids(params, level)
        pieces = []
        decomp_idxs = []
        for group in params.ks.digits_at_level(level):
            j = group[0] % params.ks.d
            scalars = decomposition_scalars(params, j, group)
            gids = tuple(group)
            own = dag.new_value(gids, Domain.EVAL)
            i1 = dag.emit(P_MUL, (own,), (x_vid,),
                          meta={"scalars": scalars}, tag=("ks", sid, "decomp_scale", j))
            coeff = dag.new_value(gids, Domain.COEFF)
            i2 = dag.emit(P_INTT, (coeff,), (own,), tag=("ks", sid, "decomp_intt", j))
            other = tuple(b for b in ext if b not in gids)
            conv = dag.new_value(other, Domain.COEFF)
            i3 = dag.emit(P_BCONV, (conv,), (coeff,),
                          meta={"target_ids": other}, tag=("ks", sid, "decomp_conv", j))
            extv = dag.new_value(other, Domain.EVAL)
            i4 = dag.emit(P_NTT, (extv,), (conv,), tag=("ks", sid, "decomp_ntt", j))
            pieces.append((j, own, extv))
            decomp_idxs += [i1, i2, i3, i4]
        return pieces, decomp_idxs

    def _inner_product(self, dag, pieces, purpose, level, sid):
        params = self.params
        ext = extended_ids(params, level)
        acc = None
        for j, own, extv in pieces:
            kb = dag.evk_input(purpose, j, "b", level)
            ka = dag.evk_input(purpose, j, "a", level)
            nb = dag.new_value(ext, Domain.EVAL)
            na = dag.new_value(ext, Domain.EVAL)
            srcs = (own, extv, kb, ka) + (acc if acc else ())
            own_ids = dag.values[own].basis_ids
            dag.emit(P_KS_INNER, (nb, na), srcs,
                     meta={"digit": j, "own_ids": own_ids, "purpose": purpose},
                     tag=("ks", sid, "inner", j))
            acc = (nb, na)
        return acc

    def _moddown(self, dag, vid, level, sid, role):
        ids = main_ids(level)
        out = dag.new_value(ids, Domain.EVAL)
        dag.emit(P_MODDOWN, (out,), (vid,), meta={"target_ids": ids},
                 tag=("ks", sid, role))
        return out

    def _keyswitch(self, dag, x_vid, purpose, level, sid):
        pieces, decomp = self._decompose(dag, x_vid, level, sid)
        site = KsSite(sid, purpose if isinstance(purpose, str) else "rot",
                      x_vid, level, decomp, pieces)
        dag.ks_sites.append(site)
        return pieces, site

    def _mul(self, dag, op, seg_value):
        params = self.params
        b1, a1 = seg_value(op.args[0])
        b2, a2 = seg_value(op.args[1])
        level = self.info[op.args[0]].level
        ids = main_ids(level)

        def mk():
            return dag.new_value(ids, Domain.EVAL)

        d0, t, u, d1, d2 = mk(), mk(), mk(), mk(), mk()
        dag.emit(P_MUL, (d0,), (b1, b2))
        dag.emit(P_MUL, (t,), (b1, a2))
        dag.emit(P_MUL, (u,), (a1, b2))
        dag.emit(P_ADD, (d1,), (t, u))
        dag.emit(P_MUL, (d2,), (a1, a2))

        sid = dag.next_site()
        pieces, _ = self._keyswitch(dag, d2, "relin", level, sid)
        acc = self._inner_product(dag, pieces, "relin", level, sid)
        ksb = self._moddown(dag, acc[0], level, sid, "moddown_b")
        ksa = self._moddown(dag, acc[1], level, sid, "moddown_a")
        ob, oa = mk(), mk()
        dag.emit(P_ADD, (ob,), (d0, ksb), tag=("ks", sid, "out_add"))
        dag.emit(P_ADD, (oa,), (d1, ksa), tag=("ks", sid, "out_add"))
        return ob, oa

    def _rotate(self, dag, op, seg_value):
        params = self.params
        b1, a1 = seg_value(op.args[0])
        level = self.info[op.args[0]].level
        ids = main_ids(level)
        g = galois_element(params.N, op.rho)
        purpose = ("rot", g)

        sid = dag.next_site()
        pieces, _ = self._keyswitch(dag, a1, purpose, level, sid)
        rotated = []
        for j, own, extv in pieces:
            ro = dag.new_value(dag.values[own].basis_ids, Domain.EVAL)
            re = dag.new_value(dag.values[extv].basis_ids, Domain.EVAL)
            dag.emit(P_AUTOMORPH, (ro,), (own,), meta={"galois": g},
                     tag=("ks", sid, "autom", j))
            dag.emit(P_AUTOMORPH, (re,), (extv,), meta={"galois": g},
                     tag=("ks", sid, "autom", j))
            rotated.append((j, ro, re))
        acc = self._inner_product(dag, rotated, purpose, level, sid)
        ksb = self._moddown(dag, acc[0], level, sid, "moddown_b")
        ksa = self._moddown(dag, acc[1], level, sid, "moddown_a")

        sb = dag.new_value(ids, Domain.EVAL)
        dag.emit(P_AUTOMORPH, (sb,), (b1,), meta={"galois": g},
                 tag=("ks", sid, "autom_b"))
        ob = dag.new_value(ids, Domain.EVAL)
        dag.emit(P_ADD, (ob,), (sb, ksb), tag=("ks", sid, "out_add"))
        return ob, ksa

    def _rescale(self, dag, op, seg_value):
        params = self.params
        b1, a1 = seg_value(op.args[0])
        level = self.info[op.args[0]].level
        sid = dag.next_site()
        outs = []
        for vid in (b1, a1):
            top = (level,)
            c = dag.new_value(top, Domain.COEFF)
            dag.emit(P_INTT, (c,), (vid,), tag=("rescale", sid, "intt"))
            lower = main_ids(level - 1)
            conv = dag.new_value(lower, Domain.COEFF)
            dag.emit(P_BCONV, (conv,), (c,), meta={"target_ids": lower},
                     tag=("rescale", sid, "conv"))
            w = dag.new_value(lower, Domain.EVAL)
            dag.emit(P_NTT, (w,), (conv,), tag=("rescale", sid, "ntt"))
            out = dag.new_value(lower, Domain.EVAL)
            dag.emit(P_RESCALE_STEP, (out,), (vid, w),
                     meta={"divisor_id": level}, tag=("rescale", sid, "step"))
            outs.append(out)
        return tuple(outs)


# --- passes -------------------------------------------------------------------

def hoist_rotations(dag: PolyDag) -> list:
    """Share one decomposition across all rotations of the same source.

    Because rotation lowering already decomposes before permuting, removing
    duplicate decompositions leaves every computed value bit-identical.
    """
    groups = {}
    for site in dag.ks_sites:
        if site.kind == "rot":
            groups.setdefault((site.source_vid, site.level), []).append(site)

    hoisted = []
    dead = set()
    remap = {}
    for (src, _level), sites in groups.items():
        if len(sites) < 2:
            continue
        rep = sites[0]
        for other in sites[1:]:
            for (j1, o1, e1), (j2, o2, e2) in zip(rep.pieces, other.pieces):
                assert j1 == j2
                remap[o2] = o1
                remap[e2] = e1
            dead.update(id(ins) for ins in other.decomp_instrs)
            other.decomp_instrs = list(rep.decomp_instrs)
            other.pieces = list(rep.pieces)
        hoisted.append(HoistGroup(src, [s.site_id for s in sites]))

    if dead:
        dag.instrs = [ins for ins in dag.instrs if id(ins) not in dead]
        for ins in dag.instrs:
            if any(s in remap for s in ins.srcs):
                ins.srcs = tuple(remap.get(s, s) for s in ins.srcs)
        dag.renumber()
    return hoisted


def merge_mod_down(dag: PolyDag) -> int:
    """Rewrite add(moddown(x), moddown(y)) into moddown(add(x, y)).

    Applied to a fixpoint so whole accumulation trees collapse to a single
    mod-down. Each rewrite removes one PModDown; the sum is taken on the
    extended basis instead.
    """
    merged = 0
    while True:
        prod = dag.producer_map()
        uses = dag.use_map()
        target = None
        for ins in dag.instrs:
            if ins.opcode != P_ADD or len(ins.srcs) != 2:
                continue
            pa, pb = (prod.get(s) for s in ins.srcs)
            if pa is None or pb is None:
                continue
            ia, ib = dag.instrs[pa], dag.instrs[pb]
            if ia.opcode != P_MODDOWN or ib.opcode != P_MODDOWN:
                continue
            if ia.meta["target_ids"] != ib.meta["target_ids"]:
                continue
            if dag.values[ia.srcs[0]].basis_ids != dag.values[ib.srcs[0]].basis_ids:
                continue
            if len(uses.get(ia.dsts[0], [])) != 1 or len(uses.get(ib.dsts[0], [])) != 1:
                continue
            target = (ins, ia, ib)
            break
        if target is None:
            return merged
        add_ins, ia, ib = target
        ext_ids = dag.values[ia.srcs[0]].basis_ids
        wide = dag.new_value(ext_ids, Domain.EVAL)
        add_ins.opcode = P_ADD
        add_ins.srcs = (ia.srcs[0], ib.srcs[0])
        old_dst = add_ins.dsts[0]
        add_ins.dsts = (wide,)
        # reuse ia's slot for the merged moddown, drop ib
        ia.srcs = (wide,)
        ia.dsts = (old_dst,)
        # move the rewritten instrs after their operands: list order must stay topological
        dag.instrs = [i for i in dag.instrs if i is not ia and i is not ib and i is not add_ins]
        insert_at = 0
        need = set(add_ins.srcs)
        for k, ins in enumerate(dag.instrs):
            if need & set(ins.dsts):
                insert_at = k + 1
        dag.instrs[insert_at:insert_at] = [add_ins, ia]
        dag.renumber()
        merged += 1


# --- poly-level interpreter -----------------------------------------------
#
# Executes a FunctionIR on the reference primitives. Used by tests to pin
# the lowering against the direct evaluator, and as the mid-level oracle
# for the limb IR.

import numpy as np

from .ckks import Ciphertext
from .ntt import U64
from .poly import (
    RnsPolynomial,
    base_convert,
    mod_down,
    poly_automorph,
    prime_for_id,
    row_add,
    row_modstep,
    row_mul,
    row_sub,
)
from .poly import ntt_forward, ntt_inverse


def _select(poly: RnsPolynomial, ids) -> RnsPolynomial:
    if poly.basis_ids == tuple(ids):
        return poly
    rows = np.stack([poly.row(b) for b in ids])
    return RnsPolynomial(rows, poly.domain, tuple(ids))


def _materialize_input(value: PolyValue, binder):
    kind = value.ref[0]
    if kind == "ct":
        _, name, comp = value.ref
        return _select(binder.ct_poly(name, comp), value.basis_ids)
    if kind == "pt":
        _, name, level, scale = value.ref
        return _select(binder.pt_poly(name, level, scale), value.basis_ids)
    if kind == "evk":
        _, purpose, digit, comp = value.ref
        return binder.evk_poly(purpose, digit, comp)
    raise ValueError(f"unknown input kind {kind}")


def run_poly_dag(dag: PolyDag, binder, env: dict | None = None) -> dict:
    """Interpret one segment; env maps circuit names to (b, a) RnsPolynomials."""
    params = dag.params
    vals = {}

    def get(vid, ids=None):
        if vid not in vals:
            vals[vid] = _materialize_input(dag.values[vid], binder)
        v = vals[vid]
        return _select(v, ids) if ids is not None else v

    # pre-bind cross-segment ct inputs from env
    if env:
        for (kind, name), (b, a) in dag.inputs.items():
            if name in env:
                vals[b] = _select(env[name][0], dag.values[b].basis_ids)
                vals[a] = _select(env[name][1], dag.values[a].basis_ids)

    for ins in dag.instrs:
        dst = dag.values[ins.dsts[0]]
        ids = dst.basis_ids
        if ins.opcode in (P_ADD, P_SUB, P_MUL) and "scalars" not in ins.meta:
            a = get(ins.srcs[0], ids)
            b = get(ins.srcs[1], ids)
            op = {P_ADD: row_add, P_SUB: row_sub, P_MUL: row_mul}[ins.opcode]
            rows = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                op(a.limbs[i], b.limbs[i], prime_for_id(params, bid), out=rows[i])
            vals[dst.vid] = RnsPolynomial(rows, dst.domain, ids)
        elif ins.opcode == P_MUL:
            src = get(ins.srcs[0], ids)
            scalars = ins.meta["scalars"]
            rows = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                q = prime_for_id(params, bid)
                rows[i] = src.limbs[i] * U64(scalars[bid] % q) % U64(q)
            vals[dst.vid] = RnsPolynomial(rows, dst.domain, ids)
        elif ins.opcode == P_AUTOMORPH:
            vals[dst.vid] = poly_automorph(get(ins.srcs[0], ids), ins.meta["galois"], params)
        elif ins.opcode == P_NTT:
            src = get(ins.srcs[0], ids)
            rows = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                rows[i] = ntt_forward(src.limbs[i], prime_for_id(params, bid))
            vals[dst.vid] = RnsPolynomial(rows, Domain.EVAL, ids)
        elif ins.opcode == P_INTT:
            src = get(ins.srcs[0], ids)
            rows = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                rows[i] = ntt_inverse(src.limbs[i], prime_for_id(params, bid))
            vals[dst.vid] = RnsPolynomial(rows, Domain.COEFF, ids)
        elif ins.opcode == P_BCONV:
            vals[dst.vid] = base_convert(get(ins.srcs[0]), ids, params)
        elif ins.opcode == P_MODDOWN:
            vals[dst.vid] = mod_down(get(ins.srcs[0]), ids, params)
        elif ins.opcode == P_RESCALE_STEP:
            x = get(ins.srcs[0])
            w = get(ins.srcs[1], ids)
            q_top = prime_for_id(params, ins.meta["divisor_id"])
            rows = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                q = prime_for_id(params, bid)
                row_modstep(x.row(bid), w.limbs[i], pow(q_top, -1, q), q, out=rows[i])
            vals[dst.vid] = RnsPolynomial(rows, dst.domain, ids)
        elif ins.opcode == P_KS_INNER:
            own = get(ins.srcs[0])
            extv = get(ins.srcs[1])
            kb = get(ins.srcs[2])
            ka = get(ins.srcs[3])
            acc = (get(ins.srcs[4]), get(ins.srcs[5])) if len(ins.srcs) > 4 else None
            own_ids = set(ins.meta["own_ids"])
            nb = np.empty((len(ids), params.N), dtype=U64)
            na = np.empty((len(ids), params.N), dtype=U64)
            for i, bid in enumerate(ids):
                q = U64(prime_for_id(params, bid))
                d_row = own.row(bid) if bid in own_ids else extv.row(bid)
                tb = d_row * kb.row(bid)
                ta = d_row * ka.row(bid)
                if acc:
                    tb = tb + acc[0].limbs[i]
                    ta = ta + acc[1].limbs[i]
                nb[i] = tb % q
                na[i] = ta % q
            vals[ins.dsts[0]] = RnsPolynomial(nb, Domain.EVAL, ids)
            vals[ins.dsts[1]] = RnsPolynomial(na, Domain.EVAL, ids)
            continue
        else:
            raise ValueError(f"unhandled poly opcode {ins.opcode}")

    out = {}
    for name, (b, a, level, scale) in dag.outputs.items():
        out[name] = (get(b), get(a), level, scale)
    return out


def run_function_ir(fn_irs: dict, name: str, binder, args: dict) -> Ciphertext:
    """Execute a FunctionIR tree (calls resolved recursively)."""
    ir = fn_irs[name]
    env = {}
    for pname in ir.param_names:
        ct = args[pname]
        env[pname] = (ct.b, ct.a, ct.level, ct.scale)

    for step in ir.steps:
        if isinstance(step, CallStep):
            call_args = {}
            callee = fn_irs[step.callee]
            for pname, argname in zip(callee.param_names, step.arg_names):
                b, a, level, scale = env[argname]
                call_args[pname] = Ciphertext(b=b, a=a, scale=scale, level=level)
            result = run_function_ir(fn_irs, step.callee, binder, call_args)
            env[step.result_name] = (result.b, result.a, result.level, result.scale)
        else:
            seg_env = {k: (b, a) for k, (b, a, _, _) in env.items()}
            outs = run_poly_dag(step, binder, seg_env)
            for nm, (b, a, level, scale) in outs.items():
                env[nm] = (b, a, level, scale)

    b, a, level, scale = env[ir.returns]
    return Ciphertext(b=b, a=a, scale=scale, level=level)
