"""Runtime: linked execution plans, categorized pools, and plan reuse.

Building and linking do all validation, planning, and sizing; executing only
launches kernels against preallocated pools. Function sub-plans are built
once and referenced per call site, sequential calls share one intermediates
pool, and swapping evalkeys or weights between runs is a pool-handle update,
never a plan rebuild. A simulated clock prices kernels, host-device weight
traffic (bulk prefetch or on-demand paging), and an optional online
allocation mode, making scheduling choices comparable without accelerator
hardware. The steady-state kernel loop performs zero allocations; binding
and caching work is accounted separately as setup.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .bindings import Binder
from .ckks import Ciphertext
from .codegen import KernelRunner
from .compress import encode_compressed
from .errors import PoolUnbound, UnresolvedFunction
from .evaluate import KeyBundle, PlaintextCache
from .limbir import CAT_EVALKEY, CAT_INPUT, CAT_INTERMEDIATE, CAT_PLAIN, CAT_WEIGHT
from .memplan import LayerInfo, plan_transfers
from .multidev import SimConfig, Timeline, simulate_execute
from .ntt import U64
from .pipeline import CompiledProgram
from .poly import Domain, RnsPolynomial
from .polyir import CallStep


@dataclass
class RunStats:
    kernels_executed: int = 0
    allocation_count: int = 0      # allocator calls inside the kernel loop
    setup_allocs: int = 0          # pool/cache builds outside the hot path
    rebuilds: int = 0
    sim_time: float = 0.0
    transfer_bytes: int = 0
    prefetch_ops: int = 0
    wall_time: float = 0.0
    comm: object = None
    timeline: Timeline = None


class PoolHandle:
    """Indirect pool binding: rebind() swaps the backing array, not the plan."""

    def __init__(self, category, capacity_bytes):
        self.category = category
        self.capacity = capacity_bytes
        self.base = None

    def rebind(self, array):
        self.base = array

    def view(self, offset, size):
        if self.base is None:
            raise PoolUnbound(f"pool {self.category!r} has no backing memory")
        return self.base[offset // 8 : (offset + size) // 8]


class RowBundle:
    """Ciphertext component flowing between segments: per-base row views."""

    def __init__(self, ids, rows):
        self._rows = dict(zip(ids, rows))
        self.basis_ids = tuple(ids)

    def row(self, bid):
        return self._rows[bid]


@dataclass
class SegmentExec:
    compiled: object
    layer_index: int = None
    stream: int = 0


@dataclass
class ExecutionPlan:
    """Flattened call tree: segments interleaved with scope enter/exit marks."""
    params: object
    options: object
    compiled: CompiledProgram
    flat: list                   # SegmentExec | ("enter", (callee, {param: arg})) | ("exit", result, ret)
    layers: list
    transfer: object
    pool_caps: dict
    device_budget: int
    rebuilds: int = 0
    sub_plan_refs: dict = field(default_factory=dict)


def share_pools(flat) -> dict:
    """Intermediates bytes per stream; sequential segments share one pool."""
    caps = {}
    for item in flat:
        if isinstance(item, SegmentExec):
            need = item.compiled.alloc.pool_sizes[CAT_INTERMEDIATE]
            caps[item.stream] = max(caps.get(item.stream, 0), need)
    return caps


def link(compiled: CompiledProgram, device_budget=None) -> ExecutionPlan:
    functions = compiled.functions
    if compiled.entry not in functions:
        raise UnresolvedFunction(compiled.entry)

    flat = []
    layers = []
    refs = {}
    seg_counter = [0]

    def walk(fname, stream):
        refs[fname] = refs.get(fname, 0) + 1
        fn = functions[fname]
        for step in fn.steps:
            if isinstance(step, CallStep):
                callee = functions.get(step.callee)
                if callee is None:
                    raise UnresolvedFunction(step.callee)
                mapping = dict(zip(callee.param_names, step.arg_names))
                flat.append(("enter", step.callee, mapping))
                walk(step.callee, step.stream)
                flat.append(("exit", step.result_name, callee.returns))
            else:
                seg = SegmentExec(step, stream=stream)
                weight_rows = [lvid for ref, lvid in step.dag.inputs.items()
                               if step.dag.values[lvid].category == CAT_WEIGHT]
                if weight_rows:
                    seg.layer_index = len(layers)
                    layers.append(LayerInfo(
                        name=f"{fname}#{seg_counter[0]}",
                        first_kernel=seg_counter[0],
                        weight_rows=weight_rows,
                        weight_bytes=sum(step.alloc.buffers[v][2]
                                         for v in weight_rows)))
                flat.append(seg)
                seg_counter[0] += 1

    walk(compiled.entry, 0)

    stream_caps = share_pools(flat)
    caps = {CAT_INTERMEDIATE: (sum(stream_caps.values())
                               if len(stream_caps) > 1
                               else max(stream_caps.values(), default=0))}
    segs = [it.compiled for it in flat if isinstance(it, SegmentExec)]
    for cat in (CAT_EVALKEY, CAT_PLAIN, CAT_INPUT, CAT_WEIGHT):
        caps[cat] = max((s.alloc.pool_sizes[cat] for s in segs), default=0)

    transfer = None
    if layers:
        budget = device_budget if device_budget is not None else 1 << 62
        widest = max((it for it in flat if isinstance(it, SegmentExec)
                      and it.layer_index is not None),
                     key=lambda s: s.compiled.alloc.pool_sizes[CAT_WEIGHT])
        alloc = widest.compiled.alloc
        merged = type(alloc)(
            buffers=alloc.buffers,
            pool_sizes={**alloc.pool_sizes, CAT_INTERMEDIATE: caps[CAT_INTERMEDIATE]},
            in_place=alloc.in_place, lifetimes=alloc.lifetimes,
            no_reuse_bytes=alloc.no_reuse_bytes,
            peak_intermediate=alloc.peak_intermediate)
        transfer = plan_transfers(merged, budget, layers)

    return ExecutionPlan(
        params=compiled.params, options=compiled.options, compiled=compiled,
        flat=flat, layers=layers, transfer=transfer, pool_caps=caps,
        device_budget=device_budget, sub_plan_refs=refs)


class Executor:
    """Runs a linked plan; reusable across bindings with zero plan rebuilds."""

    def __init__(self, plan: ExecutionPlan, sim: SimConfig | None = None):
        self.plan = plan
        self.sim = sim or plan.options.sim
        self.setup_allocs = 0
        self.pools = {}
        for cat, cap in plan.pool_caps.items():
            handle = PoolHandle(cat, cap)
            handle.rebind(self._fresh(cap))
            self.pools[cat] = handle
        self.runner = KernelRunner(plan.params)
        self._expand_ring = [np.empty(plan.params.N, dtype=U64) for _ in range(4)]
        self._expand_next = 0
        self._evk_cache = {}
        self._weight_cache = {}
        self._boundary = {}
        for item in plan.flat:
            if isinstance(item, SegmentExec):
                for name, spec in item.compiled.dag.outputs.items():
                    rows = len(spec["ids"])
                    # one staging buffer per call-site occurrence: two calls
                    # to one function must not clobber each other's results
                    self._boundary[(id(item), name)] = np.empty(
                        (2, rows, plan.params.N), dtype=U64)
        self.alloc_cost = 20e-6    # simulated price of one online alloc/free

    def _fresh(self, cap_bytes):
        self.setup_allocs += 1
        return np.zeros(max(1, cap_bytes // 8), dtype=U64)

    # --- binding --------------------------------------------------------------

    def _fill_evalkeys(self, seg, keys, binder):
        # cache holds the key object itself so an id() can never be recycled
        key = (id(seg.compiled), id(keys))
        hit = self._evk_cache.get(key)
        if hit is None or hit[0] is not keys:
            arr = self._fresh(self.pools[CAT_EVALKEY].capacity)
            dag = seg.compiled.dag
            for ref, lvid in dag.inputs.items():
                if dag.values[lvid].category != CAT_EVALKEY:
                    continue
                _, purpose, digit, comp, bid = ref
                _, off, size = seg.compiled.alloc.buffers[lvid]
                np.copyto(arr[off // 8:(off + size) // 8],
                          binder.evk_poly(purpose, digit, comp).row(bid))
            hit = (keys, arr)
            self._evk_cache[key] = hit
        self.pools[CAT_EVALKEY].rebind(hit[1])

    def _weight_host_array(self, seg, binder, binding):
        key = (id(seg.compiled), id(binding))
        hit = self._weight_cache.get(key)
        if hit is None or hit[0] is not binding:
            arr = self._fresh(self.pools[CAT_WEIGHT].capacity)
            dag = seg.compiled.dag
            cp_cache = {}
            pt = PlaintextCache(binding, self.plan.params)
            for ref, lvid in dag.inputs.items():
                if dag.values[lvid].category != CAT_WEIGHT:
                    continue
                _, name, level, scale, bid = ref
                _, off, size = seg.compiled.alloc.buffers[lvid]
                dst = arr[off // 8:(off + size) // 8]
                if lvid in seg.compiled.compressed:
                    ck = (name, level, scale)
                    if ck not in cp_cache:
                        cp_cache[ck] = encode_compressed(
                            np.asarray(binding[name], dtype=float),
                            self.plan.params, level=level, scale=scale)
                    ids = list(range(level + 1))
                    np.copyto(dst, cp_cache[ck].unique_values[ids.index(bid)])
                else:
                    np.copyto(dst, pt.get(name, level, scale).poly.row(bid))
            hit = (binding, arr)
            self._weight_cache[key] = hit
        return hit[1]

    def _bind_segment_inputs(self, seg, binder, env):
        comp = seg.compiled
        for ref, lvid in comp.dag.inputs.items():
            cat, off, size = comp.alloc.buffers[lvid]
            if cat == CAT_INPUT:
                _, name, c, bid = ref
                bundle = env[name][0] if c == "b" else env[name][1]
                np.copyto(self.pools[CAT_INPUT].view(off, size), bundle.row(bid))
            elif cat == CAT_PLAIN:
                _, name, level, scale, bid = ref
                np.copyto(self.pools[CAT_PLAIN].view(off, size),
                          binder.pt_poly(name, level, scale).row(bid))

    # --- execution ----------------------------------------------------------------

    def execute(self, inputs, keys: KeyBundle, plaintexts=None, rebinds=None,
                devices: int = 1, memory_mode: str = "pooled",
                transfer_mode: str = "prefetch", seed: int = 0):
        """Run the plan; returns (output Ciphertext, RunStats).

        `rebinds` supplies one weight-vector dict per weight-bearing layer
        (a single dict is reused for every layer). Rebinding keys or weights
        swaps pool handles; the plan itself is never rebuilt.
        """
        plan = self.plan
        stats = RunStats(rebuilds=plan.rebuilds)
        t0 = time.perf_counter()
        plaintexts = plaintexts or {}
        binder = Binder(plan.params, keys, plaintexts, inputs)
        streaming = plan.transfer is not None and plan.transfer.streamed

        scopes = [{}]
        for pname, ct in inputs.items():
            ids = ct.b.basis_ids
            scopes[0][pname] = (RowBundle(ids, [ct.b.row(b) for b in ids]),
                                RowBundle(ids, [ct.a.row(b) for b in ids]),
                                ct.level, ct.scale)

        clock = 0.0
        transfer_clock = 0.0
        prev_layer_start = 0.0
        setup_before = self.setup_allocs

        for item in plan.flat:
            if isinstance(item, tuple) and item[0] == "enter":
                _, callee, mapping = item
                scopes.append({p: scopes[-1][a] for p, a in mapping.items()})
                continue
            if isinstance(item, tuple) and item[0] == "exit":
                _, result, ret = item
                value = scopes[-1][ret]
                scopes.pop()
                scopes[-1][result] = value
                continue

            seg = item
            comp = seg.compiled
            env = scopes[-1]

            if seg.layer_index is not None:
                binding = self._layer_binding(rebinds, plaintexts, seg.layer_index)
                if not binding:
                    raise PoolUnbound(f"no weight binding for layer {seg.layer_index}")
                host = self._weight_host_array(seg, binder, binding)
                seg_bytes = comp.alloc.pool_sizes[CAT_WEIGHT]
                if streaming and transfer_mode == "prefetch":
                    pf = plan.transfer.prefetch_ops[seg.layer_index]
                    layer_info = plan.layers[seg.layer_index]
                    issue = prev_layer_start if pf.before_kernel < layer_info.first_kernel else clock
                    done = max(transfer_clock, issue) + self.sim.link_latency \
                        + seg_bytes / self.sim.link_bandwidth
                    transfer_clock = done
                    clock = max(clock, done)
                    stats.transfer_bytes += seg_bytes
                    stats.prefetch_ops += 1
                elif streaming:
                    # on-demand paging: a fault per weight buffer, reduced bandwidth
                    n_buf = len(plan.layers[seg.layer_index].weight_rows)
                    clock += n_buf * 4 * self.sim.link_latency \
                        + seg_bytes / (self.sim.link_bandwidth / 4)
                    stats.transfer_bytes += seg_bytes
                self.pools[CAT_WEIGHT].rebind(host)
                prev_layer_start = clock

            self._fill_evalkeys(seg, keys, binder)
            self._bind_segment_inputs(seg, binder, env)

            if comp.distributed is not None and devices > 1:
                seg_env = {name: (v[0], v[1]) for name, v in env.items()}
                outs, comm_stats, tl = simulate_execute(
                    comp.distributed, binder, seg_env, seed=seed,
                    allocations=comp.dev_allocs)
                stats.comm = comm_stats
                stats.timeline = tl
                stats.allocation_count += sum(tl.alloc_counts)
                stats.kernels_executed += sum(
                    1 for it in comp.distributed.items if hasattr(it, "plan"))
                clock += tl.makespan
                for name, (b, a, level, scale) in outs.items():
                    env[name] = (b, a, level, scale)
            else:
                clock = self._run_segment(seg, env, stats, clock, memory_mode)

        stats.sim_time = max(clock, transfer_clock)
        stats.setup_allocs = self.setup_allocs - setup_before

        ret = self.plan.compiled.functions[self.plan.compiled.entry].returns
        b, a, level, scale = scopes[0][ret]
        ct = Ciphertext(b=_to_poly(b), a=_to_poly(a), scale=scale, level=level)
        stats.wall_time = time.perf_counter() - t0
        return ct, stats

    def _layer_binding(self, rebinds, plaintexts, layer_index):
        if isinstance(rebinds, list) and rebinds:
            return rebinds[layer_index % len(rebinds)]
        if isinstance(rebinds, dict):
            return rebinds
        return plaintexts

    def _run_segment(self, seg, env, stats, clock, memory_mode):
        comp = seg.compiled
        alloc = comp.alloc
        pools = self.pools
        online = {}
        N = self.plan.params.N

        def read_pooled(lvid):
            cat, off, size = alloc.buffers[lvid]
            view = pools[cat].view(off, size)
            if lvid in comp.compressed:
                out = self._expand_ring[self._expand_next]
                self._expand_next = (self._expand_next + 1) % len(self._expand_ring)
                np.take(view, comp.compressed[lvid].index_map(), out=out)
                return out
            return view

        def write_pooled(lvid):
            cat, off, size = alloc.buffers[lvid]
            return pools[cat].view(off, size)

        if memory_mode == "online":
            def read(lvid):
                return online[lvid] if lvid in online else read_pooled(lvid)

            def write(lvid):
                if lvid not in online:
                    stats.allocation_count += 1
                    online[lvid] = np.empty(N, dtype=U64)
                return online[lvid]
        else:
            read, write = read_pooled, write_pooled

        for kernel in comp.schedule.plans:
            self.runner.run(kernel, read, write)
            stats.kernels_executed += 1
            clock += self.sim.launch_overhead + \
                len(kernel.operand_table) * N * 8 / self.sim.mem_bandwidth
            if memory_mode == "online":
                clock += 2 * self.alloc_cost   # allocate + free per kernel

        for name, spec in comp.dag.outputs.items():
            stage = self._boundary[(id(seg), name)]
            for i, lvid in enumerate(spec["b"]):
                np.copyto(stage[0, i], read(lvid))
            for i, lvid in enumerate(spec["a"]):
                np.copyto(stage[1, i], read(lvid))
            env[name] = (RowBundle(spec["ids"], list(stage[0])),
                         RowBundle(spec["ids"], list(stage[1])),
                         spec["level"], spec["scale"])
        return clock


def _to_poly(bundle) -> RnsPolynomial:
    if isinstance(bundle, RnsPolynomial):
        return bundle
    rows = np.stack([bundle.row(b) for b in bundle.basis_ids])
    return RnsPolynomial(rows, Domain.EVAL, bundle.basis_ids)
