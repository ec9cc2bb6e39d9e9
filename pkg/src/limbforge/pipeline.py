"""End-to-end compilation: circuit text to executable segment plans.

One CompiledFunction per circuit function (built once, referenced per call
site), each holding compiled call-free segments: limb DAG, fused kernel
schedule, allocation plan, optional compression table, and, for multi-device
targets, the partitioned program with its comm passes applied.
"""

from dataclasses import dataclass, field

from .codegen import CompilerConfig, plan_kernels
from .compress import CompressionDescriptor
from .fusion import FusionConfig, fuse_dag
from .limbir import lower_to_limb_ir
from .memplan import KernelSchedule, assign_buffers, buffer_sizes, liveness
from .multidev import (
    SimConfig,
    device_allocations,
    fuse_allreduce,
    fuse_broadcasts,
    keyswitch_sites,
    parallel_keyswitch,
    partition,
    schedule_comms,
)
from .params import CkksParams
from .parser import parse_program
from .polyir import CallStep, hoist_rotations, lower_to_poly_ir, merge_mod_down
from .typecheck import TypedProgram, typecheck


@dataclass
class CompileOptions:
    devices: int = 1
    horizontal: bool = True
    vertical: bool = True
    compression: bool = True
    hoist: bool = True
    merge_moddown: bool = True
    comm_fusion: bool = True
    comm_schedule: bool = True
    ks_pattern: str = "OutputAggregation"
    cfg: CompilerConfig = field(default_factory=CompilerConfig)
    sim: SimConfig = field(default_factory=SimConfig)


@dataclass
class CompiledSegment:
    dag: object
    schedule: KernelSchedule
    alloc: object
    sizes: dict
    compressed: dict              # lvid -> CompressionDescriptor
    distributed: object = None    # DistributedProgram when devices > 1
    dev_allocs: list = None
    unfused_count: int = 0
    fused_count: int = 0
    kernel_count: int = 0


@dataclass
class CompiledFunction:
    name: str
    steps: list                   # CompiledSegment | CallStep
    returns: str
    param_names: tuple


@dataclass
class CompiledProgram:
    params: CkksParams
    typed: TypedProgram
    options: CompileOptions
    functions: dict
    entry: str
    build_count: dict = field(default_factory=dict)


def compile_source(text: str, params: CkksParams,
                   options: CompileOptions | None = None) -> CompiledProgram:
    return compile_program(typecheck(parse_program(text), params), options)


def compile_program(typed: TypedProgram,
                    options: CompileOptions | None = None) -> CompiledProgram:
    options = options or CompileOptions()
    prog = typed.program
    params = typed.params
    functions = {}
    build_count = {}

    def build(fname: str):
        if fname in functions:
            return
        for op in prog.functions[fname].body:
            if op.opcode == "call":
                build(op.callee)
        build_count[fname] = build_count.get(fname, 0) + 1
        ir = lower_to_poly_ir(typed, fname)
        steps = []
        for step in ir.steps:
            if isinstance(step, CallStep):
                steps.append(step)
            else:
                steps.append(_compile_segment(step, typed, options))
        functions[fname] = CompiledFunction(
            name=fname, steps=steps, returns=ir.returns,
            param_names=ir.param_names)

    build(prog.entry)
    return CompiledProgram(params=params, typed=typed, options=options,
                           functions=functions, entry=prog.entry,
                           build_count=build_count)


def _compile_segment(seg, typed: TypedProgram, options: CompileOptions) -> CompiledSegment:
    params = typed.params
    prog = typed.program
    if options.hoist:
        hoist_rotations(seg)
    if options.merge_moddown:
        merge_mod_down(seg)

    categories = {n: d.category for n, d in prog.plaintexts.items()}
    dag = lower_to_limb_ir(seg, categories)
    unfused = len(dag.instrs)

    sites = {}
    if options.devices > 1:
        for sid in keyswitch_sites(dag):
            sites[sid] = parallel_keyswitch(options.ks_pattern, sid, dag,
                                            options.devices)

    fcfg = FusionConfig(subdag_max=options.cfg.subdag_max,
                        horizontal=options.horizontal,
                        vertical=options.vertical)
    fused = fuse_dag(dag, fcfg)
    plans = plan_kernels(fused, dag, params, options.cfg)
    schedule = KernelSchedule(plans, dag)

    compressed = {}
    if options.compression:
        for ref, lvid in dag.inputs.items():
            if ref[0] != "pt":
                continue
            decl = prog.plaintexts.get(ref[1])
            if decl is not None and decl.stride is not None:
                compressed[lvid] = CompressionDescriptor.for_params(
                    params, decl.stride)

    spans = liveness(schedule)
    sizes = buffer_sizes(schedule, compressed)
    alloc = assign_buffers(schedule, spans, sizes)

    compiled = CompiledSegment(
        dag=dag, schedule=schedule, alloc=alloc, sizes=sizes,
        compressed=compressed, unfused_count=unfused,
        fused_count=len(fused), kernel_count=len(plans))

    if options.devices > 1:
        dist = partition(schedule, options.devices, sites,
                         options.cfg, options.sim)
        if options.comm_fusion:
            dist = fuse_broadcasts(dist)
            dist = fuse_allreduce(dist)
        if options.comm_schedule:
            dist = schedule_comms(dist)
        compiled.distributed = dist
        compiled.dev_allocs = device_allocations(dist)
    return compiled


def stats_summary(compiled: CompiledProgram) -> dict:
    """Aggregate structural statistics for `limbforge stats`."""
    out = {
        "functions": len(compiled.functions),
        "limbInstrs": 0,
        "fusedKernels": 0,
        "kernels": 0,
        "peakBytesPerPool": {},
        "commOps": 0,
        "commBytes": 0,
    }
    for fn in compiled.functions.values():
        for step in fn.steps:
            if isinstance(step, CallStep):
                continue
            out["limbInstrs"] += step.unfused_count
            out["fusedKernels"] += step.fused_count
            out["kernels"] += step.kernel_count
            for cat, size in step.alloc.pool_sizes.items():
                prev = out["peakBytesPerPool"].get(cat, 0)
                out["peakBytesPerPool"][cat] = max(prev, size)
            if step.distributed is not None:
                st = step.distributed.stats()
                out["commOps"] += st.total_ops
                out["commBytes"] += st.total_bytes
    return out
