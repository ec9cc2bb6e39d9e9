"""Horizontal and vertical fusion of limb instructions into kernel candidates.

Horizontal fusion groups data-independent instructions of the same opcode
(and compatible metadata) into parallel lanes of one kernel. Vertical fusion
then chains producer lanes into their consumers so intermediates stay in
registers. Both passes reject any merge that would put a cycle in the
kernel graph, tested against incrementally maintained ancestor/descendant
bitsets; permuting opcodes never share a kernel with their producers.

Large DAGs are cut into bounded topological sub-DAGs first, and fusion runs
independently inside each.
"""

import heapq
from dataclasses import dataclass

from .limbir import (
    ELEMENTWISE_OPS,
    OP_AUTOMORPH,
    OP_BCONV,
    OP_INTT,
    OP_MODSTEP,
    OP_NTT,
    LimbDag,
    LimbInstr,
)


@dataclass
class FusionConfig:
    subdag_max: int = 4096
    horizontal: bool = True
    vertical: bool = True
    debug_cycles: bool = False    # re-check every merge against DFS reachability


@dataclass
class FusedInstr:
    """One kernel candidate: parallel lanes of vertically chained members."""
    fid: int
    opclass: str                  # opcode of the lane heads
    lanes: list                   # list[list[LimbInstr]]
    meta_key: tuple = ()

    @property
    def members(self):
        return [ins for lane in self.lanes for ins in lane]

    @property
    def lane_bases(self):
        return sorted(lane[0].base_id for lane in self.lanes)

    def depth(self):
        return max(len(lane) for lane in self.lanes)


def partition_subdags(dag: LimbDag, max_size: int):
    """Cut the (topologically ordered) instruction list into bounded chunks.

    Chunking a topological order can never create a back edge, so the union
    of the parts reconstructs the DAG with all edges forward.
    """
    instrs = dag.instrs
    return [instrs[i : i + max_size] for i in range(0, len(instrs), max_size)]


def _meta_key(ins: LimbInstr) -> tuple:
    group = ins.meta.get("group")   # device-group pin from multi-device prep
    if ins.opcode == OP_BCONV:
        return (tuple(ins.meta["src_ids"]), group)
    if ins.opcode == OP_AUTOMORPH:
        return (ins.meta["galois"], group)
    if ins.opcode == OP_MODSTEP:
        return (ins.meta.get("div"), group)
    return (group,)


class FusionState:
    """Fusion bookkeeping for one sub-DAG.

    Nodes are indexed by position in the sub-DAG; ancestor/descendant
    summaries are bitmasks over those positions, kept inclusive of direct
    edges and updated by union-and-propagate on every merge.
    """

    def __init__(self, dag: LimbDag, instrs, config: FusionConfig | None = None):
        self.dag = dag
        self.config = config or FusionConfig()
        self.instrs = list(instrs)
        self.n = len(self.instrs)
        self.alive = set(range(self.n))
        self.nodes = {}
        local = {}
        for i, ins in enumerate(self.instrs):
            self.nodes[i] = FusedInstr(i, ins.opcode, [[ins]], _meta_key(ins))
            local[ins.dst] = i

        self.parents = {i: set() for i in range(self.n)}
        self.children = {i: set() for i in range(self.n)}
        self.consumers_of = {}        # dst lvid -> [original node ids]
        self.anc = [0] * self.n
        self.desc = [0] * self.n
        for i, ins in enumerate(self.instrs):
            for s in ins.srcs:
                p = local.get(s)
                if p is None:
                    continue  # input row or produced outside this sub-DAG
                self.parents[i].add(p)
                self.children[p].add(i)
                self.consumers_of.setdefault(s, []).append(i)
                self.anc[i] |= self.anc[p] | (1 << p)
        for i in reversed(range(self.n)):
            for c in self.children[i]:
                self.desc[i] |= self.desc[c] | (1 << c)

        # uses across the whole DAG: values read outside this sub-DAG or by
        # the segment outputs must stay materialized
        self.global_uses = {}
        for ins in dag.instrs:
            for s in ins.srcs:
                self.global_uses[s] = self.global_uses.get(s, 0) + 1
        self.output_rows = {row for spec in dag.outputs.values()
                            for row in spec["b"] + spec["a"]}
        self._canon = list(range(self.n))

    def find(self, i: int) -> int:
        while self._canon[i] != i:
            self._canon[i] = self._canon[self._canon[i]]
            i = self._canon[i]
        return i

    # -- reachability --------------------------------------------------------

    def reaches(self, a: int, b: int) -> bool:
        return bool((self.desc[a] >> b) & 1)

    def _dfs_reaches(self, a: int, b: int) -> bool:
        stack, seen = list(self.children[a]), set()
        while stack:
            x = stack.pop()
            if x == b:
                return True
            if x in seen:
                continue
            seen.add(x)
            stack.extend(self.children[x])
        return False

    # -- legality --------------------------------------------------------------

    def legal_horizontal(self, a: int, b: int) -> bool:
        na, nb = self.nodes[a], self.nodes[b]
        if na.opclass != nb.opclass or na.meta_key != nb.meta_key:
            return False
        if self.reaches(a, b) or self.reaches(b, a):
            return False
        if self.config.debug_cycles:
            assert not self._dfs_reaches(a, b) and not self._dfs_reaches(b, a)
        return True

    def legal_vertical(self, upper: int, lower: int) -> bool:
        nu, nl = self.nodes[upper], self.nodes[lower]
        if lower not in self.children[upper]:
            return False
        groups = {ins.meta.get("group") for n in (nu, nl) for ins in n.members}
        if len(groups) > 1:
            return False
        # consumer must be pure elementwise; the producer may end in an
        # Automorph (its gather reads kernel-external memory) but a permuting
        # opcode never reads an in-kernel intermediate
        if any(ins.opcode not in ELEMENTWISE_OPS for lane in nl.lanes for ins in lane):
            return False
        for lane in nu.lanes:
            for k, ins in enumerate(lane):
                if ins.opcode in (OP_NTT, OP_INTT, OP_BCONV):
                    return False
                if ins.opcode == OP_AUTOMORPH and k != len(lane) - 1:
                    return False
                if ins.opcode not in ELEMENTWISE_OPS and ins.opcode != OP_AUTOMORPH:
                    return False
        if nu.lane_bases != nl.lane_bases:
            return False
        # every produced tail must die inside `lower` (single materialization)
        for lane in nu.lanes:
            dst = lane[-1].dst
            if dst in self.output_rows:
                return False
            cons = self.consumers_of.get(dst, [])
            if not cons or any(self.find(c) != lower for c in cons):
                return False
            readers = [ins for ins in nl.members if dst in ins.srcs]
            if len(readers) != self.global_uses.get(dst, 0):
                return False
            if any(ins.base_id != lane[-1].base_id for ins in readers):
                return False
        # a path through any third node means the merge closes a cycle
        between = self.desc[upper] & self.anc[lower] & ~(1 << upper) & ~(1 << lower)
        for x in _bits(between):
            if x in self.alive and x not in (upper, lower):
                return False
        if self.config.debug_cycles:
            for x in self.alive:
                if x not in (upper, lower):
                    assert not (self._dfs_reaches(upper, x) and self._dfs_reaches(x, lower))
        return True

    # -- merging ------------------------------------------------------------------

    def _merge_edges(self, a: int, b: int):
        """Fold node b into node a, keeping summaries consistent."""
        for p in self.parents.pop(b):
            self.children[p].discard(b)
            if p != a:
                self.children[p].add(a)
                self.parents[a].add(p)
        for c in self.children.pop(b):
            self.parents[c].discard(b)
            if c != a:
                self.parents[c].add(a)
                self.children[a].add(c)
        self.parents[a].discard(a)
        self.children[a].discard(a)

        self.anc[a] |= self.anc[b]
        self.desc[a] |= self.desc[b]
        bit_a = 1 << a
        for x in _bits(self.anc[a]):
            if x in self.alive and x != a:
                self.desc[x] |= self.desc[a] | bit_a
        for x in _bits(self.desc[a]):
            if x in self.alive and x != a:
                self.anc[x] |= self.anc[a] | bit_a

        self._canon[b] = a
        self.alive.discard(b)
        del self.nodes[b]

    def merge_horizontal(self, a: int, b: int):
        self.nodes[a].lanes.extend(self.nodes[b].lanes)
        self._merge_edges(a, b)

    def merge_vertical(self, upper: int, lower: int):
        """Chain upper's lanes into lower's, keeping the earlier node id."""
        nu, nl = self.nodes[upper], self.nodes[lower]
        merged = []
        for base in sorted({l[0].base_id for l in nu.lanes}):
            ups = [l for l in nu.lanes if l[0].base_id == base]
            downs = [l for l in nl.lanes if l[0].base_id == base]
            merged.append([ins for l in ups for ins in l] +
                          [ins for l in downs for ins in l])
        target = self.nodes[upper]
        target.lanes = merged
        if nu.opclass in ELEMENTWISE_OPS:
            target.opclass = nl.opclass
        target.meta_key = ()
        self._merge_edges(upper, lower)

    # -- results ----------------------------------------------------------------------

    def fused_in_order(self):
        """Alive nodes in a valid topological order of the quotient DAG."""
        indeg = {i: len(self.parents[i]) for i in self.alive}
        ready = [i for i in self.alive if indeg[i] == 0]
        heapq.heapify(ready)
        out = []
        while ready:
            i = heapq.heappop(ready)
            out.append(self.nodes[i])
            for c in self.children[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        assert len(out) == len(self.alive), "fusion corrupted the DAG"
        return out


def _bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def fusion_legal_horizontal(state: FusionState, a: int, b: int) -> bool:
    return state.legal_horizontal(a, b)


def fusion_legal_vertical(state: FusionState, upper: int, lower: int) -> bool:
    return state.legal_vertical(upper, lower)


def horizontal_fuse(state: FusionState):
    """Greedy first-fit in topological order, earliest node as merge target."""
    buckets = {}
    for i in range(state.n):
        if i not in state.alive:
            continue
        key = (state.nodes[i].opclass, state.nodes[i].meta_key)
        merged = False
        for t in buckets.get(key, []):
            if state.legal_horizontal(t, i):
                state.merge_horizontal(t, i)
                merged = True
                break
        if not merged:
            buckets.setdefault(key, []).append(i)
    return state


def vertical_fuse(state: FusionState):
    """Greedy producer-into-consumer chaining, repeated to a fixpoint."""
    changed = True
    while changed:
        changed = False
        for upper in sorted(state.alive):
            if upper not in state.alive:
                continue
            for lower in sorted(state.children.get(upper, ())):
                if lower in state.alive and state.legal_vertical(upper, lower):
                    state.merge_vertical(upper, lower)
                    changed = True
                    break
    return state


def fuse_dag(dag: LimbDag, config: FusionConfig | None = None):
    """Partition, fuse, and return kernel candidates in execution order."""
    config = config or FusionConfig()
    fused = []
    for chunk in partition_subdags(dag, config.subdag_max):
        state = FusionState(dag, chunk, config)
        if config.horizontal:
            horizontal_fuse(state)
        if config.vertical:
            vertical_fuse(state)
        fused.extend(state.fused_in_order())
    for k, node in enumerate(fused):
        node.fid = k
    return fused


def fusion_dot(fused, title="fused") -> str:
    """DOT rendering of the fused kernel DAG for inspection."""
    lines = [f'digraph "{title}" {{', "  node [shape=box];"]
    dst_owner = {}
    for node in fused:
        for ins in node.members:
            dst_owner[ins.dst] = node.fid
    for node in fused:
        label = f"{node.fid}: {node.opclass} x{len(node.lanes)} d{node.depth()}"
        lines.append(f'  n{node.fid} [label="{label}"];')
        seen = set()
        for ins in node.members:
            for s in ins.srcs:
                p = dst_owner.get(s)
                if p is not None and p != node.fid and p not in seen:
                    seen.add(p)
                    lines.append(f"  n{p} -> n{node.fid};")
    lines.append("}")
    return "\n".join(lines)
