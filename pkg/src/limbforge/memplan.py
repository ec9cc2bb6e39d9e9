"""Static kernel-and-memory schedule: liveness, buffer reuse, two-tier placement.

The kernel order fixes every buffer's lifetime interval; intermediates are
packed by first-fit offset coloring so non-overlapping lifetimes share
memory, elementwise kernels whose input dies at their own position write in
place, and each data category lives in its own pool so the runtime can swap
a whole pool by rebinding one handle. Weight pools can additionally be
streamed layer by layer under a device-capacity budget with prefetching.
"""

from dataclasses import dataclass

from .codegen import KernelPlan
from .errors import BudgetInfeasible, UseBeforeDef
from .limbir import (
    CAT_EVALKEY,
    CAT_INPUT,
    CAT_INTERMEDIATE,
    CAT_PLAIN,
    CAT_WEIGHT,
    ELEMENTWISE_OPS,
    LimbDag,
)

POOL_CATEGORIES = (CAT_WEIGHT, CAT_EVALKEY, CAT_PLAIN, CAT_INPUT, CAT_INTERMEDIATE)


@dataclass
class KernelSchedule:
    plans: list            # ordered KernelPlans; list order is execution order
    dag: LimbDag

    def reads_writes(self, k: int):
        plan = self.plans[k]
        writes = {plan.operand_table[w] for w in plan.writes}
        reads = set(plan.operand_table) - writes
        # a buffer both read and written by the kernel counts as a read too
        for lane in plan.lanes:
            for op in lane.ops:
                for kind, idx in op.srcs:
                    if kind == "s":
                        reads.add(plan.operand_table[idx])
        return reads, writes


@dataclass
class MemoryPool:
    category: str
    capacity: int          # bytes


@dataclass
class AllocationPlan:
    buffers: dict          # lvid -> (category, offset, size)
    pool_sizes: dict       # category -> bytes
    in_place: set          # kernel indices writing over a dying input
    lifetimes: dict        # lvid -> [first_def, last_use]
    no_reuse_bytes: int    # sum of all intermediate buffer sizes
    peak_intermediate: int

    def of(self, lvid):
        return self.buffers[lvid]


@dataclass
class LayerInfo:
    name: str
    first_kernel: int
    weight_rows: list      # lvids streamed for this layer
    weight_bytes: int = None   # precomputed segment bytes (falls back to rows)


@dataclass
class PrefetchOp:
    layer: int
    before_kernel: int
    bytes: int


@dataclass
class TransferPlan:
    device_budget: int
    pinned: dict                   # category -> bytes, resident all run
    prefetch_ops: list             # [PrefetchOp]
    streamed: bool                 # weights streamed per layer?
    resident_trace: list           # bytes resident before each layer


def liveness(schedule: KernelSchedule):
    """Exact [first_def, last_use] per buffer; inputs defined before kernel 0.

    Program outputs stay live through the end of the schedule.
    """
    spans = {}
    inputs = set(schedule.dag.inputs.values())
    for lvid in inputs:
        spans[lvid] = [-1, -1]
    for k in range(len(schedule.plans)):
        reads, writes = schedule.reads_writes(k)
        for lvid in reads:
            if lvid not in spans:
                raise UseBeforeDef(f"kernel {k} reads buffer {lvid} before any write")
            spans[lvid][1] = k
        for lvid in writes:
            if lvid not in spans:
                spans[lvid] = [k, k]
            else:
                spans[lvid][1] = k
    end = len(schedule.plans)
    for spec in schedule.dag.outputs.values():
        for lvid in spec["b"] + spec["a"]:
            if lvid in spans:
                spans[lvid][1] = end
    return spans


def buffer_sizes(schedule: KernelSchedule, compressed=None):
    """Bytes per buffer row; compressed plaintext rows store unique values only."""
    compressed = compressed or {}
    N = schedule.dag.params.N
    sizes = {}
    for lvid in set(schedule.dag.inputs.values()) | {
            i.dst for p in schedule.plans for i in
            (ins for lane in p.source.lanes for ins in lane)}:
        if lvid in compressed:
            sizes[lvid] = compressed[lvid].unique_count * 8
        else:
            sizes[lvid] = N * 8
    return sizes


def assign_buffers(schedule: KernelSchedule, lifetimes, sizes) -> AllocationPlan:
    """First-fit offset coloring with conservative in-place writes.

    Buffers whose lifetimes overlap never share a byte. A kernel writes in
    place only when it is elementwise, the input row dies at that kernel,
    sizes match, and the kernel reads the row exactly once.
    """
    dag = schedule.dag
    buffers = {}
    pool_sizes = {c: 0 for c in POOL_CATEGORIES}

    # persistent categories: simple bump allocation
    for ref, lvid in dag.inputs.items():
        cat = dag.values[lvid].category
        if cat == CAT_INTERMEDIATE:
            continue
        off = pool_sizes[cat]
        buffers[lvid] = (cat, off, sizes[lvid])
        pool_sizes[cat] = off + sizes[lvid]

    # intermediates: interval packing over the kernel timeline
    inter = sorted(
        (lvid for lvid in lifetimes
         if lvid not in buffers and dag.values[lvid].category == CAT_INTERMEDIATE),
        key=lambda v: (lifetimes[v][0], v))
    live = {}          # lvid -> (offset, size)
    in_place = set()
    peak = 0
    no_reuse = sum(sizes[v] for v in inter)
    by_def = {}
    for lvid in inter:
        by_def.setdefault(lifetimes[lvid][0], []).append(lvid)

    def first_fit(size):
        taken = sorted((off, sz) for off, sz in live.values())
        off = 0
        for o, sz in taken:
            if off + size <= o:
                break
            off = max(off, o + sz)
        return off

    for k in range(len(schedule.plans) + 1):
        plan = schedule.plans[k] if k < len(schedule.plans) else None
        reads, writes = schedule.reads_writes(k) if plan else (set(), set())
        dying = {v for v in reads
                 if v in live and lifetimes[v][1] == k and v not in writes}
        for lvid in by_def.get(k, []):
            size = sizes[lvid]
            placed = False
            if plan is not None and plan.opclass in ELEMENTWISE_OPS:
                dst_pos = _store_pos(plan, lvid)
                for src in sorted(dying):
                    # safe only when the single read happens in the same lane
                    # at or before the aliasing store: the value sits in a
                    # register by then, and no other lane ever touches it
                    read_pos = _single_read_pos(plan, src)
                    if (sizes[src] == size and dst_pos is not None
                            and read_pos is not None
                            and read_pos[0] == dst_pos[0]
                            and read_pos[1] <= dst_pos[1]):
                        off = live[src][0]
                        del live[src]
                        dying.discard(src)
                        live[lvid] = (off, size)
                        buffers[lvid] = (CAT_INTERMEDIATE, off, size)
                        in_place.add(k)
                        placed = True
                        break
            if not placed:
                off = first_fit(size)
                live[lvid] = (off, size)
                buffers[lvid] = (CAT_INTERMEDIATE, off, size)
        if live:
            top = max(off + sz for off, sz in live.values())
            peak = max(peak, top)
        for lvid in list(live):
            if lifetimes[lvid][1] <= k:
                del live[lvid]

    pool_sizes[CAT_INTERMEDIATE] = peak
    return AllocationPlan(
        buffers=buffers,
        pool_sizes=pool_sizes,
        in_place=in_place,
        lifetimes=lifetimes,
        no_reuse_bytes=no_reuse,
        peak_intermediate=peak,
    )


def _single_read_pos(plan: KernelPlan, lvid):
    """(lane, op) position reading lvid, or None unless read exactly once."""
    found = None
    for li, lane in enumerate(plan.lanes):
        for oi, op in enumerate(lane.ops):
            for kind, idx in op.srcs:
                if kind == "s" and plan.operand_table[idx] == lvid:
                    if found is not None:
                        return None
                    found = (li, oi)
    return found


def _store_pos(plan: KernelPlan, lvid):
    """(lane, op) position storing lvid, if any."""
    for li, lane in enumerate(plan.lanes):
        for oi, op in enumerate(lane.ops):
            if op.store_slot is not None and plan.operand_table[op.store_slot] == lvid:
                return (li, oi)
    return None


def plan_transfers(alloc: AllocationPlan, device_budget: int, layers,
                   lookahead: bool = True) -> TransferPlan:
    """Two-tier placement: pin everything that fits, stream weights per layer.

    Evalkeys, plaintexts, inputs, and the intermediates pool are pinned for
    the whole run; plaintext weights are prefetched one layer segment at a
    time when they do not all fit. Prefetch for the next layer is issued
    early when the budget leaves room for two consecutive segments.
    """
    pinned = {c: alloc.pool_sizes[c] for c in POOL_CATEGORIES if c != CAT_WEIGHT}
    pinned_total = sum(pinned.values())
    if pinned_total > device_budget:
        raise BudgetInfeasible(
            f"pinned categories need {pinned_total} bytes, budget {device_budget}")

    seg_bytes = []
    for layer in layers:
        if layer.weight_bytes is not None:
            seg_bytes.append(layer.weight_bytes)
        else:
            seg_bytes.append(sum(alloc.buffers[v][2] for v in layer.weight_rows))
    total_weights = sum(seg_bytes)

    if pinned_total + total_weights <= device_budget:
        pinned[CAT_WEIGHT] = total_weights
        return TransferPlan(device_budget, pinned, [], False,
                            [pinned_total + total_weights] * max(1, len(layers)))

    worst = max(seg_bytes, default=0)
    if pinned_total + worst > device_budget:
        raise BudgetInfeasible(
            f"largest weight segment ({worst} bytes) cannot fit beside the "
            f"pinned {pinned_total} bytes under budget {device_budget}")

    prefetch = []
    trace = []
    for i, layer in enumerate(layers):
        early = (lookahead and i > 0
                 and pinned_total + seg_bytes[i - 1] + seg_bytes[i] <= device_budget)
        before = layers[i - 1].first_kernel if early else layer.first_kernel
        prefetch.append(PrefetchOp(layer=i, before_kernel=before, bytes=seg_bytes[i]))
        resident = pinned_total + seg_bytes[i]
        if early:
            resident += seg_bytes[i - 1]
        trace.append(resident)
        assert resident <= device_budget
    return TransferPlan(device_budget, pinned, prefetch, True, trace)
