"""Limb-level parallelization across simulated devices.

Rows live on the device owning their RNS base (round robin), so elementwise,
permutation, and NTT kernels run without communication. Cross-base flows
(base conversion inside keyswitching and rescaling) become collectives, and
keyswitch sites come in two patterns:

  InputBroadcast: the decomposed digit rows are gathered; every device then
  computes its own rows locally.

  OutputAggregation: each digit's mod-up and inner products run whole on the
  digit's device; the naive emission broadcasts every device's partial pair
  and sums partials at the row owners. The comm-fusion passes then rewrite
  the pattern: broadcasts feeding an accumulation collapse into a single
  aggregate-scatter, and an aggregate-scatter whose derived rows are
  immediately re-gathered collapses into one all-reduce, with the small
  derivation replicated on every device (redundant compute for one less
  synchronization).

Execution is a cooperative simulation: per-device clocks advance through
kernel and transfer costs, collectives match on op ids, aggregation order is
canonical, so outputs are byte-identical under any host interleaving.
"""

from dataclasses import dataclass, field

import numpy as np

from .codegen import CompilerConfig, KernelPlan, KernelRunner, gen_kernel, plan_lazy_reduction
from .errors import DeadlockDetected
from .fusion import FusedInstr
from .limbir import OP_ADD, OP_MUL, OP_MULACC, LimbDag, materialize_input_row
from .memplan import KernelSchedule
from .ntt import U64
from .poly import SPECIAL_BASE, prime_for_id

BCAST = "Broadcast"
AGG_SCATTER = "AggregateScatter"
ALL_GATHER = "AllGather"
ALL_REDUCE = "AllReduce"
P2P = "P2P"

ALL = -1   # device marker for replicated kernels


@dataclass
class SimConfig:
    link_bandwidth: float = 25e9     # bytes/s between devices
    link_latency: float = 10e-6     # per collective segment
    mem_bandwidth: float = 100e9    # device-local bytes/s
    launch_overhead: float = 5e-6   # per kernel
    segment_bytes: int = 0          # comm split threshold; 0 = one limb row


def dev_of_base(bid: int, k: int) -> int:
    return (bid - SPECIAL_BASE if bid >= SPECIAL_BASE else bid) % k


@dataclass(frozen=True)
class PartitionPlan:
    k: int
    limb_to_device: dict
    stream_to_device: dict

    def device(self, bid: int) -> int:
        return self.limb_to_device[bid]


@dataclass
class CommOp:
    op_id: int
    kind: str
    rows: tuple                 # delivered lvids (result rows for aggregations)
    participants: tuple
    root: int = None            # Broadcast / P2P source
    dest: int = None            # P2P destination
    agg_map: dict = None        # result lvid -> (contribution lvids, in order)
    replicate: bool = False     # deliver results to every participant
    segment: tuple = None       # (index, count) when split
    site: tuple = None

    def payload_bytes(self, N: int) -> int:
        return len(self.rows) * N * 8

    def wire_bytes(self, N: int) -> int:
        """Bytes on the wire under the declared ring-model rule."""
        p = self.payload_bytes(N)
        k = len(self.participants)
        if self.kind in (BCAST, AGG_SCATTER, ALL_GATHER):
            return p * (k - 1)
        if self.kind == ALL_REDUCE:
            return 2 * p * (k - 1) // k
        if self.kind == P2P:
            return p
        raise ValueError(self.kind)

    def per_device_bytes(self, N: int) -> dict:
        total = self.wire_bytes(N)
        if self.kind in (BCAST, P2P):
            return {self.root: total}
        k = len(self.participants)
        share, rem = divmod(total, k)
        out = {d: share for d in self.participants}
        for d in self.participants[:rem]:
            out[d] += 1
        return out

    def input_rows(self):
        if self.agg_map:
            return tuple(r for contribs in self.agg_map.values() for r in contribs)
        return self.rows


@dataclass
class CommStats:
    op_count: dict = field(default_factory=dict)
    total_bytes: int = 0
    per_device: dict = field(default_factory=dict)
    _ids: set = field(default_factory=set)

    def add(self, op: CommOp, N: int):
        if op.op_id not in self._ids:    # segments share the parent op id
            self.op_count[op.kind] = self.op_count.get(op.kind, 0) + 1
            self._ids.add(op.op_id)
        self.total_bytes += op.wire_bytes(N)
        for d, b in op.per_device_bytes(N).items():
            self.per_device[d] = self.per_device.get(d, 0) + b

    @property
    def total_ops(self):
        return sum(self.op_count.values())

    def key(self):
        return (tuple(sorted(self.op_count.items())), self.total_bytes,
                tuple(sorted(self.per_device.items())))


@dataclass
class KernelItem:
    device: int
    plan: KernelPlan
    orig_id: int = 0           # id of the pre-split kernel


@dataclass
class DistributedProgram:
    k: int
    items: list                # KernelItem | CommOp, execution order
    partition: PartitionPlan
    dag: LimbDag
    sites: dict = field(default_factory=dict)
    sim: SimConfig = field(default_factory=SimConfig)
    comms_async: bool = False  # set by schedule_comms: dedicated comm streams

    def comm_ops(self):
        return [it for it in self.items if isinstance(it, CommOp)]

    def stats(self) -> CommStats:
        s = CommStats()
        for op in self.comm_ops():
            s.add(op, self.dag.params.N)
        return s


# --- keyswitch site preparation ------------------------------------------------

def keyswitch_sites(dag: LimbDag):
    return sorted({ins.tag[1] for ins in dag.instrs
                   if ins.tag and ins.tag[0] == "ks"})


def parallel_keyswitch(kind: str, site_id: int, dag: LimbDag, k: int) -> dict:
    """Prepare one keyswitch site for k-device lowering.

    InputBroadcast keeps all work row-local; partition() will gather the
    decomposed digit rows. OutputAggregation pins each digit's mod-up and
    inner products to the digit's device and regroups the per-row
    multiply-accumulate chains into per-device partials plus a canonical
    add tree; modular addition is associative, so the final rows stay
    bit-equal to the serial chain.
    """
    info = {"site": site_id, "kind": kind, "partials": {}, "final_rows": []}
    if kind == "InputBroadcast" or k == 1:
        return info
    assert kind == "OutputAggregation"

    site = [ins for ins in dag.instrs
            if ins.tag and ins.tag[0] == "ks" and ins.tag[1] == site_id]
    for ins in site:
        role = ins.tag[2]
        if role in ("decomp_conv", "decomp_ntt", "autom", "inner") and len(ins.tag) > 3:
            ins.meta["group"] = ins.tag[3] % k

    inner = [ins for ins in site if ins.tag[2] == "inner"]
    acc_next = {ins.srcs[0]: ins for ins in inner if ins.opcode == OP_MULACC}
    chains = []
    for ins in inner:
        if ins.opcode == OP_MUL:
            chain = [ins]
            while chain[-1].dst in acc_next:
                chain.append(acc_next[chain[-1].dst])
            chains.append(chain)

    replacements = {}
    dead = set()
    for chain in chains:
        if len({ins.tag[3] % k for ins in chain}) < 2:
            for ins in chain:                       # single group: just pin it
                ins.meta["group"] = chain[0].tag[3] % k
            continue
        seq, partials = _regroup_chain(dag, chain, k, site_id)
        replacements[id(chain[-1])] = seq
        dead.update(id(ins) for ins in chain)
        for g, row in partials:
            info["partials"].setdefault(g, []).append(row)
        info["final_rows"].append(chain[-1].dst)

    if replacements:
        new_instrs = []
        for ins in dag.instrs:
            if id(ins) in replacements:
                new_instrs.extend(replacements[id(ins)])
            elif id(ins) not in dead:
                new_instrs.append(ins)
        dag.instrs = new_instrs
        for i, ins in enumerate(dag.instrs):
            ins.idx = i
    return info


def _regroup_chain(dag: LimbDag, chain, k: int, site_id: int):
    """Per-device partial products plus an ascending-order add tree."""
    from .limbir import LimbInstr

    bid = chain[0].base_id
    terms = [(chain[0].srcs[0], chain[0].srcs[1], chain[0].tag[3])]
    terms += [(ins.srcs[1], ins.srcs[2], ins.tag[3]) for ins in chain[1:]]

    by_group = {}
    for x, y, digit in terms:
        by_group.setdefault(digit % k, []).append((x, y))

    seq = []
    partials = []
    for g in sorted(by_group):
        acc = None
        for x, y in by_group[g]:
            d = dag.new_value(bid)
            if acc is None:
                seq.append(LimbInstr(0, OP_MUL, bid, d, (x, y),
                                     {"group": g}, ("ks", site_id, "inner", g)))
            else:
                seq.append(LimbInstr(0, OP_MULACC, bid, d, (acc, x, y),
                                     {"group": g}, ("ks", site_id, "inner", g)))
            acc = d
        partials.append((g, acc))

    groups = [g for g, _ in partials]
    acc_row = partials[0][1]
    for n, (g, row) in enumerate(partials[1:], start=2):
        last = n == len(partials)
        d = chain[-1].dst if last else dag.new_value(bid)
        seq.append(LimbInstr(0, OP_ADD, bid, d, (acc_row, row),
                             {"group": ("agg", site_id)},
                             ("ks", site_id, "agg_add")))
        acc_row = d
    return seq, partials


# --- partitioning ---------------------------------------------------------------

def _plan_group(plan: KernelPlan):
    groups = {ins.meta.get("group") for ins in plan.source.members}
    assert len(groups) == 1, "fusion mixed device groups"
    return groups.pop()


def _split_plan_by_base(plan: KernelPlan, params, cfg, k: int):
    """Per-device sub-plans: each lane runs on the owner of its base."""
    by_dev = {}
    for lane in plan.source.lanes:
        by_dev.setdefault(dev_of_base(lane[0].base_id, k), []).append(lane)
    out = {}
    for dev, lanes in sorted(by_dev.items()):
        sub = gen_kernel(FusedInstr(plan.kernel_id, plan.opclass, lanes),
                         params, cfg, plan.external_uses, plan.output_rows)
        out[dev] = plan_lazy_reduction(sub, params, cfg)
    return out


def partition(schedule: KernelSchedule, k: int, sites=None,
              cfg: CompilerConfig | None = None,
              sim: SimConfig | None = None,
              streams=None) -> DistributedProgram:
    """Split the fused schedule across k devices and materialize comm ops.

    Every lane runs on its base's owner unless the site preparation pinned
    it to a device group. Reads of rows living elsewhere become collectives:
    one owner and many readers is a Broadcast, many owners is an AllGather,
    a single reading device takes point-to-point transfers, and prepared
    OutputAggregation partials are broadcast per producing device (the
    naive pattern the comm-fusion passes consume).
    """
    dag = schedule.dag
    params = dag.params
    cfg = cfg or CompilerConfig()
    sim = sim or SimConfig()
    sites = sites or {}

    active_bases = sorted({v.base_id for v in dag.values})
    part = PartitionPlan(
        k=k,
        limb_to_device={b: dev_of_base(b, k) for b in active_bases},
        stream_to_device={s: s % k for s in (streams or {0})},
    )

    location = {}
    for ref, lvid in dag.inputs.items():
        if ref[0] == "evk":
            location[lvid] = set(range(k))   # keys are replicated at setup
        else:
            location[lvid] = {dev_of_base(dag.values[lvid].base_id, k)}

    partial_sets = {}
    for sid, info in sites.items():
        for g, rows in info.get("partials", {}).items():
            partial_sets[(sid, g)] = (info, set(rows))

    items = []
    op_ids = iter(range(1 << 30))
    pending_partials = dict(partial_sets)

    def available(lvid, dev):
        return dev in location.get(lvid, ())

    def note_written(plan, dev):
        for w in plan.writes:
            lvid = plan.operand_table[w]
            location.setdefault(lvid, set()).add(dev)

    for plan in schedule.plans:
        group = _plan_group(plan)
        if isinstance(group, int):
            sub_items = [KernelItem(group % k, plan, plan.kernel_id)]
        else:
            subs = _split_plan_by_base(plan, params, cfg, k)
            sub_items = [KernelItem(d, p, plan.kernel_id) for d, p in subs.items()]

        # communication needed before this kernel, per the original plan
        needed = {}   # lvid -> set of reading devices
        for item in sub_items:
            reads = set(item.plan.operand_table) - {
                item.plan.operand_table[w] for w in item.plan.writes}
            for lvid in reads:
                if not available(lvid, item.device):
                    needed.setdefault(lvid, set()).add(item.device)

        # prepared OA partial sets broadcast whole, once
        for key, (info, rows) in list(pending_partials.items()):
            if rows & set(needed):
                sid, g = key
                op = CommOp(next(op_ids), BCAST, tuple(sorted(rows)),
                            tuple(range(k)), root=g % k,
                            site=(sid, "partial", g))
                items.append(op)
                for r in rows:
                    location.setdefault(r, set()).update(range(k))
                    needed.pop(r, None)
                del pending_partials[key]

        if needed:
            owners = {}
            for lvid in needed:
                owner = min(location[lvid])
                owners.setdefault(owner, []).append(lvid)
            readers = set().union(*needed.values())
            if len(owners) == 1:
                ((owner, rows),) = owners.items()
                if len(readers) == 1 and k > 1:
                    dest = next(iter(readers))
                    op = CommOp(next(op_ids), P2P, tuple(sorted(rows)),
                                (owner, dest), root=owner, dest=dest)
                    items.append(op)
                    for r in rows:
                        location[r].add(dest)
                else:
                    op = CommOp(next(op_ids), BCAST, tuple(sorted(rows)),
                                tuple(range(k)), root=owner)
                    items.append(op)
                    for r in rows:
                        location[r].update(range(k))
            elif len(readers) == 1:
                dest = next(iter(readers))
                for owner, rows in sorted(owners.items()):
                    op = CommOp(next(op_ids), P2P, tuple(sorted(rows)),
                                (owner, dest), root=owner, dest=dest)
                    items.append(op)
                    for r in rows:
                        location[r].add(dest)
            else:
                rows = tuple(sorted(needed))
                op = CommOp(next(op_ids), ALL_GATHER, rows, tuple(range(k)))
                items.append(op)
                for r in rows:
                    location[r].update(range(k))

        for item in sub_items:
            items.append(item)
            note_written(item.plan, item.device)

    return DistributedProgram(k=k, items=items, partition=part, dag=dag,
                              sites=sites, sim=sim)


# --- communication passes -------------------------------------------------------

def fuse_broadcasts(program: DistributedProgram) -> DistributedProgram:
    """Collapse partial-broadcast groups plus their accumulation kernels.

    When several broadcasts carry per-device partial sums that are then
    added row by row, one aggregate-scatter does the sums in flight and
    delivers each row to its owner, removing both the extra broadcasts and
    the accumulation kernels (and their synchronization points).
    """
    by_site = {}
    for it in program.items:
        if isinstance(it, CommOp) and it.site and it.site[1] == "partial":
            by_site.setdefault(it.site[0], []).append(it)

    for sid, bcasts in by_site.items():
        if len(bcasts) < 2:
            continue
        info = program.sites[sid]
        agg_items = [it for it in program.items
                     if isinstance(it, KernelItem)
                     and _plan_group(it.plan) == ("agg", sid)]
        if not agg_items:
            continue
        agg_map = _site_agg_map(program.dag, sid, info)
        pos = program.items.index(bcasts[0])
        op = CommOp(bcasts[0].op_id, AGG_SCATTER,
                    tuple(sorted(agg_map)), tuple(range(program.k)),
                    agg_map=agg_map, site=(sid, "agg", None))
        drop = set(map(id, bcasts)) | set(map(id, agg_items))
        program.items = [it for it in program.items if id(it) not in drop]
        program.items.insert(min(pos, len(program.items)), op)
    return program


def _site_agg_map(dag: LimbDag, sid: int, info) -> dict:
    """final row -> ordered partial contributions, ascending device group."""
    out = {}
    tails = {}
    for g, rows in sorted(info["partials"].items()):
        for r in rows:
            tails.setdefault(dag.values[r].base_id, {})[g] = r
    # rebuild the chain association: group partial rows by base id and match
    # final rows (also per base, two components per base) in program order
    finals_by_base = {}
    for r in info["final_rows"]:
        finals_by_base.setdefault(dag.values[r].base_id, []).append(r)
    partials_by_base = {}
    for g, rows in sorted(info["partials"].items()):
        for r in rows:
            partials_by_base.setdefault(dag.values[r].base_id, {}).setdefault(
                g, []).append(r)
    for base, finals in finals_by_base.items():
        per_group = partials_by_base[base]
        for i, fin in enumerate(finals):
            out[fin] = tuple(per_group[g][i] for g in sorted(per_group))
    return out


def fuse_allreduce(program: DistributedProgram) -> DistributedProgram:
    """Merge aggregate-scatter with the next gather of rows derived from it.

    The scatter becomes an all-reduce (summed rows are replicated), the
    small kernels deriving the re-gathered rows run replicated on every
    device, and the gather disappears.
    """
    items = program.items
    changed = True
    while changed:
        changed = False
        producers = {}
        for idx, it in enumerate(items):
            if isinstance(it, KernelItem):
                for w in it.plan.writes:
                    producers.setdefault(it.plan.operand_table[w], []).append(idx)

        for a_idx, a in enumerate(items):
            if not (isinstance(a, CommOp) and a.kind == AGG_SCATTER):
                continue
            delivered = set(a.rows)
            for b_idx in range(a_idx + 1, len(items)):
                b = items[b_idx]
                if not (isinstance(b, CommOp) and b.kind == ALL_GATHER):
                    continue
                deriving = set()
                ok = True
                for row in b.rows:
                    if row in delivered:
                        continue       # replication already covers it
                    plist = producers.get(row, [])
                    if not plist:
                        ok = False
                        break
                    for p_idx in plist:
                        p = items[p_idx]
                        reads = set(p.plan.operand_table) - {
                            p.plan.operand_table[w] for w in p.plan.writes}
                        if reads <= delivered:
                            deriving.add(p_idx)
                        else:
                            ok = False
                if not ok or not deriving:
                    continue
                # rewrite: A -> AllReduce, deriving kernels replicated, B gone
                a.kind = ALL_REDUCE
                a.replicate = True
                orig = {}
                for p_idx in deriving:
                    orig.setdefault(items[p_idx].orig_id, []).append(p_idx)
                new_items = []
                done = set()
                for idx, it in enumerate(items):
                    if idx in deriving:
                        if items[idx].orig_id in done:
                            continue
                        done.add(items[idx].orig_id)
                        merged = _merge_replicated(
                            [items[j] for j in orig[items[idx].orig_id]],
                            program, a)
                        new_items.append(merged)
                    elif it is b:
                        continue
                    else:
                        new_items.append(it)
                program.items = items = new_items
                changed = True
                break
            if changed:
                break
    return program


def _merge_replicated(kernel_items, program, src_op):
    """Recombine per-device pieces of one kernel into a replicated item."""
    lanes = [lane for it in kernel_items for lane in it.plan.source.lanes]
    base = kernel_items[0].plan
    fused = FusedInstr(base.kernel_id, base.opclass, lanes)
    cfg = CompilerConfig()
    plan = gen_kernel(fused, program.dag.params, cfg,
                      base.external_uses, base.output_rows)
    plan = plan_lazy_reduction(plan, program.dag.params, cfg)
    return KernelItem(ALL, plan, kernel_items[0].orig_id)


def schedule_comms(program: DistributedProgram,
                   segment_bytes: int = 0) -> DistributedProgram:
    """Hoist comms to right after their producers and split long payloads.

    Segments keep the parent op id (stats count logical operations) but
    complete independently, letting compute slip between them.
    """
    N = program.dag.params.N
    seg = segment_bytes or program.sim.segment_bytes or N * 8

    last_touch = {}
    order = []
    comms = []
    for idx, it in enumerate(program.items):
        if isinstance(it, CommOp):
            earliest = max((last_touch.get(r, -1) for r in it.input_rows()),
                           default=-1)
            comms.append((earliest, idx, it))
            for r in it.rows:       # deliveries gate later comms on the same rows
                last_touch[r] = idx
        else:
            for w in it.plan.writes:
                last_touch[it.plan.operand_table[w]] = idx
            order.append((idx, it))

    items = []
    inserted = set()
    comms.sort(key=lambda t: (t[0], t[1]))
    ci = 0
    for idx, it in order:
        while ci < len(comms) and comms[ci][0] < idx:
            items.extend(_segment(comms[ci][2], seg, N))
            ci += 1
        items.append(it)
    for _, _, op in comms[ci:]:
        items.extend(_segment(op, seg, N))
    program.items = items
    program.comms_async = True
    return program


def _segment(op: CommOp, seg_bytes: int, N: int):
    rows_per_seg = max(1, seg_bytes // (N * 8))
    if len(op.rows) <= rows_per_seg:
        return [op]
    parts = []
    chunks = [op.rows[i:i + rows_per_seg]
              for i in range(0, len(op.rows), rows_per_seg)]
    for i, rows in enumerate(chunks):
        sub_map = ({r: op.agg_map[r] for r in rows} if op.agg_map else None)
        parts.append(CommOp(op.op_id, op.kind, rows, op.participants,
                            root=op.root, dest=op.dest, agg_map=sub_map,
                            replicate=op.replicate,
                            segment=(i, len(chunks)), site=op.site))
    return parts


# --- per-device memory planning ----------------------------------------------------

def device_allocations(program: DistributedProgram):
    """First-fit row slots per device over each device's touch intervals.

    Every row a device ever holds (computed, received, or lazily bound)
    gets a slot; rows whose lifetimes never overlap on that device share
    slots, so simulated execution draws all storage from one preallocated
    pool per device.
    """
    k = program.k
    dag = program.dag
    touches = [dict() for _ in range(k)]   # dev -> lvid -> [first, last]

    def touch(dev, lvid, t):
        span = touches[dev].setdefault(lvid, [t, t])
        span[1] = t

    for t, it in enumerate(program.items):
        if isinstance(it, KernelItem):
            devs = range(k) if it.device == ALL else (it.device,)
            for d in devs:
                for lvid in it.plan.operand_table:
                    touch(d, lvid, t)
        else:
            for lvid in it.input_rows():
                for d in it.participants:
                    touch(d, lvid, t)
            targets = it.participants if (it.replicate or it.kind in
                                          (BCAST, ALL_GATHER)) else None
            if it.kind == P2P:
                targets = (it.dest,)
            if it.kind == AGG_SCATTER and not it.replicate:
                for lvid in it.rows:
                    touch(dev_of_base(dag.values[lvid].base_id, k), lvid, t)
            elif targets:
                for lvid in it.rows:
                    for d in targets:
                        touch(d, lvid, t)

    end = len(program.items)
    for spec in dag.outputs.values():
        for lvid in spec["b"] + spec["a"]:
            for d in range(k):
                if lvid in touches[d]:
                    touches[d][lvid][1] = end

    plans = []
    for d in range(k):
        spans = touches[d]
        order = sorted(spans, key=lambda v: (spans[v][0], v))
        offsets = {}
        live = {}
        peak = 0
        for lvid in order:
            first, last = spans[lvid]
            for other in list(live):
                if live[other][1] < first:
                    del live[other]
            taken = sorted((offsets[o], 1) for o in live)
            slot = 0
            for off, _ in taken:
                if slot < off:
                    break
                slot = off + 1
            offsets[lvid] = slot
            live[lvid] = (slot, last)
            peak = max(peak, slot + 1)
        plans.append({"offsets": offsets, "slots": peak})
    return plans


# --- simulation -------------------------------------------------------------------

@dataclass
class Timeline:
    compute_spans: list = field(default_factory=list)   # (dev, start, end)
    comm_spans: list = field(default_factory=list)      # (op_id, start, end)
    makespan: float = 0.0
    alloc_counts: list = field(default_factory=list)    # per-device allocator calls

    def overlap(self) -> float:
        total = 0.0
        for _, cs, ce in self.comm_spans:
            for _, ks, ke in self.compute_spans:
                total += max(0.0, min(ce, ke) - max(cs, ks))
        return total


class DeviceStore:
    """Per-device row storage, optionally backed by one preallocated pool."""

    def __init__(self, N, alloc=None):
        self.N = N
        self.alloc_count = 0
        self._rows = {}
        if alloc is None:
            self._pool = None
        else:
            self._pool = np.empty((alloc["slots"], N), dtype=U64)
            self._offsets = alloc["offsets"]
            self._slot_owner = {}

    def __contains__(self, lvid):
        return lvid in self._rows

    def __getitem__(self, lvid):
        return self._rows[lvid]

    def __setitem__(self, lvid, row):
        np.copyto(self.write_view(lvid), row)

    def write_view(self, lvid):
        if lvid not in self._rows:
            if self._pool is not None:
                slot = self._offsets[lvid]
                prev = self._slot_owner.get(slot)
                if prev is not None and prev != lvid:
                    del self._rows[prev]    # reuse invalidates the old row
                self._slot_owner[slot] = lvid
                self._rows[lvid] = self._pool[slot]
            else:
                self.alloc_count += 1
                self._rows[lvid] = np.empty(self.N, dtype=U64)
        return self._rows[lvid]


def simulate_execute(program: DistributedProgram, binder, env=None, seed=0,
                     allocations=None):
    """Run the distributed program; returns (outputs, CommStats, Timeline).

    One cooperative worker per device; collectives match on op id and apply
    their data effect exactly once, in canonical participant order. A seeded
    scheduler randomizes which ready device steps next; since data movement
    and clock arithmetic depend only on the dependency structure, outputs,
    stats, and the timeline are identical for every seed. With allocations
    from device_allocations(), all rows live in preallocated per-device
    pools and steady-state execution allocates nothing.
    """
    dag = program.dag
    params = dag.params
    N = params.N
    k = program.k
    sim = program.sim
    rng = np.random.default_rng(seed)

    if allocations is None:
        stores = [DeviceStore(N) for _ in range(k)]
    else:
        stores = [DeviceStore(N, alloc) for alloc in allocations]
    row_ready = [dict() for _ in range(k)]   # lvid -> sim time available

    def ensure_input(lvid, dev):
        if lvid not in stores[dev]:
            value = dag.values[lvid]
            assert value.ref is not None, f"row {lvid} missing on device {dev}"
            if env and value.ref[0] == "ct" and value.ref[1] in env:
                poly = env[value.ref[1]][0] if value.ref[2] == "b" else env[value.ref[1]][1]
                row = poly.row(value.ref[3])
            else:
                row = materialize_input_row(value, binder, params)
            stores[dev][lvid] = row
            row_ready[dev][lvid] = 0.0

    # pre-bind env rows onto owners
    if env:
        for ref, lvid in dag.inputs.items():
            if ref[0] == "ct" and ref[1] in env:
                dev = dev_of_base(dag.values[lvid].base_id, k)
                poly = env[ref[1]][0] if ref[2] == "b" else env[ref[1]][1]
                stores[dev][lvid] = poly.row(ref[3])
                row_ready[dev][lvid] = 0.0

    programs = [[] for _ in range(k)]
    for it in program.items:
        if isinstance(it, KernelItem):
            devs = range(k) if it.device == ALL else (it.device,)
            for d in devs:
                programs[d].append(it)
        else:
            for d in it.participants:
                programs[d].append(it)

    pc = [0] * k
    clock = [0.0] * k
    runners = [KernelRunner(params) for _ in range(k)]
    arrivals = {}       # id(op) -> {dev: arrive_time}
    op_done = {}        # id(op) -> completion time
    stats = CommStats()
    timeline = Timeline()

    def kernel_cost(plan):
        rows = len(plan.operand_table)
        return sim.launch_overhead + rows * N * 8 / sim.mem_bandwidth

    def try_step(d):
        if pc[d] >= len(programs[d]):
            return False
        it = programs[d][pc[d]]
        if isinstance(it, KernelItem):
            reads = set(it.plan.operand_table) - {
                it.plan.operand_table[w] for w in it.plan.writes}
            start = clock[d]
            for lvid in reads:
                if lvid not in stores[d]:
                    if dag.values[lvid].ref is not None:
                        ensure_input(lvid, d)
                    else:
                        return False   # produced by a comm not yet completed
                start = max(start, row_ready[d].get(lvid, 0.0))
            runner = runners[d]
            sd = stores[d]

            def read(lvid):
                return sd[lvid]

            def write(lvid):
                return sd.write_view(lvid)

            runner.run(it.plan, read, write)
            end = start + kernel_cost(it.plan)
            timeline.compute_spans.append((d, start, end))
            clock[d] = end
            for w in it.plan.writes:
                row_ready[d][it.plan.operand_table[w]] = end
            pc[d] += 1
            return True

        # communication: arrive, last participant applies the data effect
        key = id(it)
        arr = arrivals.setdefault(key, {})
        if d not in arr:
            ready = clock[d]
            for lvid in it.input_rows():
                if lvid in stores[d]:
                    ready = max(ready, row_ready[d].get(lvid, 0.0))
            arr[d] = ready
        if len(arr) == len(it.participants) and key not in op_done:
            _apply_comm(it, stores, row_ready, dag, params, k)
            start = max(arr.values())
            dur = sim.link_latency + it.wire_bytes(N) / sim.link_bandwidth
            op_done[key] = start + dur
            timeline.comm_spans.append((it.op_id, start, start + dur))
            stats.add(it, N)
            for dev in it.participants:
                for lvid in it.rows:
                    if lvid in stores[dev]:
                        row_ready[dev][lvid] = op_done[key]
        if key not in op_done:
            return False    # hold until the data effect has been applied
        if not program.comms_async:
            # single-stream baseline: the device also waits out the transfer
            clock[d] = max(clock[d], op_done[key])
        pc[d] += 1
        return True

    total = sum(len(p) for p in programs)
    steps = 0
    while any(pc[d] < len(programs[d]) for d in range(k)):
        order = rng.permutation(k)
        moved = False
        for d in order:
            if try_step(int(d)):
                moved = True
        if not moved:
            raise DeadlockDetected(
                f"no device can progress; pcs={pc}")
        steps += 1
        if steps > 100 * total + 100:
            raise DeadlockDetected("simulation failed to converge")

    timeline.makespan = max([*clock, *(op_done.values() or [0.0])])
    timeline.alloc_counts = [s.alloc_count for s in stores]

    outputs = {}
    from .poly import Domain, RnsPolynomial

    for name, spec in dag.outputs.items():
        rows_b, rows_a = [], []
        for lvid in spec["b"]:
            dev = _find_row(stores, lvid)
            rows_b.append(stores[dev][lvid])
        for lvid in spec["a"]:
            dev = _find_row(stores, lvid)
            rows_a.append(stores[dev][lvid])
        b = RnsPolynomial(np.stack(rows_b), Domain.EVAL, spec["ids"])
        a = RnsPolynomial(np.stack(rows_a), Domain.EVAL, spec["ids"])
        outputs[name] = (b, a, spec["level"], spec["scale"])
    return outputs, stats, timeline


def _find_row(stores, lvid):
    for d, s in enumerate(stores):
        if lvid in s:
            return d
    raise KeyError(f"row {lvid} not materialized on any device")


def _apply_comm(op: CommOp, stores, row_ready, dag, params, k):
    """Move or aggregate rows; canonical order keeps results deterministic."""
    if op.kind in (BCAST, ALL_GATHER):
        for lvid in op.rows:
            src = _find_row(stores, lvid)
            row = stores[src][lvid]
            for d in op.participants:
                if lvid not in stores[d]:
                    stores[d][lvid] = row
    elif op.kind == P2P:
        for lvid in op.rows:
            stores[op.dest][lvid] = stores[op.root][lvid]
    elif op.kind in (AGG_SCATTER, ALL_REDUCE):
        for res, contribs in sorted(op.agg_map.items()):
            bid = dag.values[res].base_id
            q = U64(prime_for_id(params, bid))
            acc = None
            for c in contribs:
                src = _find_row(stores, c)
                row = stores[src][c]
                acc = row.copy() if acc is None else acc + row
            acc %= q
            if op.replicate:
                targets = op.participants
            else:
                targets = (dev_of_base(bid, k),)
            for d in targets:
                stores[d][res] = acc
    else:
        raise ValueError(op.kind)
