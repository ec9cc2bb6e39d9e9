import numpy as np
import pytest

from limbforge.bindings import Binder
from limbforge.ckks import encrypt
from limbforge.codegen import CompilerConfig, plan_kernels
from limbforge.encoding import encode
from limbforge.errors import DeadlockDetected
from limbforge.evaluate import KeyBundle
from limbforge.fusion import fuse_dag
from limbforge.limbir import lower_to_limb_ir, run_limb_dag
from limbforge.memplan import KernelSchedule
from limbforge.multidev import (
    AGG_SCATTER,
    ALL_GATHER,
    ALL_REDUCE,
    BCAST,
    CommOp,
    device_allocations,
    fuse_allreduce,
    fuse_broadcasts,
    keyswitch_sites,
    parallel_keyswitch,
    partition,
    schedule_comms,
    simulate_execute,
)
from limbforge.params import gen_params
from limbforge.parser import parse_program
from limbforge.polyir import hoist_rotations, lower_to_poly_ir, merge_mod_down
from limbforge.typecheck import typecheck
from tests.conftest import rotation_keys

KS_CHAIN = """
evk relin
evk rot 1 2 3 4
fn main(ct x) {
  r1 = rotate x 1
  r2 = rotate x 2
  r3 = rotate x 3
  r4 = rotate x 4
  s1 = add r1 r2
  s2 = add r3 r4
  s = add s1 s2
  m = mul s x
  q = rescale m
  return q
}
"""

ELEMENTWISE_ONLY = """
fn main(ct x, ct y) {
  a = add x y
  b = sub a x
  c = add b y
  return c
}
"""


def compile_limb(text, params, k, pattern="OutputAggregation"):
    typed = typecheck(parse_program(text), params)
    ir = lower_to_poly_ir(typed)
    seg = [s for s in ir.steps if not hasattr(s, "callee")][0]
    hoist_rotations(seg)
    merge_mod_down(seg)
    dag = lower_to_limb_ir(seg, {})
    sites = {}
    if k > 1:
        for sid in keyswitch_sites(dag):
            sites[sid] = parallel_keyswitch(pattern, sid, dag, k)
    fused = fuse_dag(dag)
    plans = plan_kernels(fused, dag, params, CompilerConfig())
    return dag, KernelSchedule(plans, dag), sites


@pytest.fixture(scope="module")
def ctx(params_small, keys_small):
    sk, pk, rlk = keys_small
    rots = rotation_keys(params_small, sk, (1, 2, 3, 4))
    keys = KeyBundle(public=pk, relin=rlk, rotations=rots)
    rng = np.random.default_rng(7)
    v = rng.uniform(-1, 1, params_small.n)
    w = rng.uniform(-1, 1, params_small.n)
    ct_v = encrypt(encode(v, params_small), pk, params_small, rng)
    ct_w = encrypt(encode(w, params_small), pk, params_small, rng)
    return params_small, keys, ct_v, ct_w


def reference_rows(text, params, keys, env_cts):
    dag, _, _ = compile_limb(text, params, 1)
    binder = Binder(params, keys, {}, env_cts)
    env = {nm: (ct.b, ct.a) for nm, ct in env_cts.items()}
    return dag, run_limb_dag(dag, binder, env)


def run_k(text, params, keys, env_cts, k, pattern="OutputAggregation",
          passes=True, sched=True, pooled=True, seed=0):
    dag, schedule, sites = compile_limb(text, params, k, pattern)
    prog = partition(schedule, k, sites)
    if passes:
        prog = fuse_broadcasts(prog)
        prog = fuse_allreduce(prog)
    if sched:
        prog = schedule_comms(prog)
    binder = Binder(params, keys, {}, env_cts)
    env = {nm: (ct.b, ct.a) for nm, ct in env_cts.items()}
    allocs = device_allocations(prog) if pooled else None
    outs, stats, tl = simulate_execute(prog, binder, env, seed=seed,
                                       allocations=allocs)
    return prog, outs, stats, tl


def outputs_equal(a, b):
    (nm,) = a.keys()
    return (np.array_equal(a[nm][0].limbs, b[nm][0].limbs)
            and np.array_equal(a[nm][1].limbs, b[nm][1].limbs))


def test_k1_zero_comm_ops(ctx):
    params, keys, ct_v, _ = ctx
    prog, outs, stats, _ = run_k(KS_CHAIN, params, keys, {"x": ct_v}, 1)
    assert stats.total_ops == 0 and stats.total_bytes == 0


def test_elementwise_only_no_comms(ctx):
    params, keys, ct_v, ct_w = ctx
    prog, outs, stats, _ = run_k(ELEMENTWISE_ONLY, params, keys,
                                 {"x": ct_v, "y": ct_w}, 4)
    assert stats.total_ops == 0
    dag, ref = reference_rows(ELEMENTWISE_ONLY, params, keys,
                              {"x": ct_v, "y": ct_w})
    assert outputs_equal(outs, ref)


def test_single_keyswitch_k2_bit_equal(ctx):
    params, keys, ct_v, _ = ctx
    text = "evk rot 1\nfn main(ct x) {\n  y = rotate x 1\n  return y\n}"
    dag, ref = reference_rows(text, params, keys, {"x": ct_v})
    prog, outs, stats, _ = run_k(text, params, keys, {"x": ct_v}, 2)
    assert stats.total_ops > 0
    assert outputs_equal(outs, ref)


@pytest.mark.parametrize("pattern", ["InputBroadcast", "OutputAggregation"])
@pytest.mark.parametrize("k", [2, 4])
def test_parallel_keyswitch_variants_bit_equal(ctx, pattern, k):
    params, keys, ct_v, _ = ctx
    text = "evk relin\nfn main(ct x) {\n  m = mul x x\n  q = rescale m\n  return q\n}"
    dag, ref = reference_rows(text, params, keys, {"x": ct_v})
    prog, outs, stats, _ = run_k(text, params, keys, {"x": ct_v}, k,
                                 pattern=pattern, passes=False, sched=False)
    assert outputs_equal(outs, ref)


def test_byte_accounting_identity(ctx):
    params, keys, ct_v, _ = ctx
    prog, outs, stats, _ = run_k(KS_CHAIN, params, keys, {"x": ct_v}, 4)
    assert sum(stats.per_device.values()) == stats.total_bytes
    # execution-side accounting equals plan-side accounting
    assert prog.stats().total_bytes == stats.total_bytes
    assert prog.stats().op_count == stats.op_count


def test_fuse_broadcasts_collapses_partial_exchange(ctx):
    # four digits on four devices: the naive pattern is four broadcasts
    # feeding the accumulation; the pass leaves one aggregate-scatter
    params4 = gen_params(256, 4, d=4, seed=3)
    from limbforge.keys import keygen

    sk, pk, rlk = keygen(params4, seed=11)
    keys = KeyBundle(public=pk, relin=rlk, rotations={})
    rng = np.random.default_rng(5)
    ct = encrypt(encode(rng.uniform(-1, 1, params4.n), params4), pk, params4, rng)
    text = "evk relin\nfn main(ct x) {\n  m = mul x x\n  q = rescale m\n  return q\n}"

    dag, schedule, sites = compile_limb(text, params4, 4)
    naive = partition(schedule, 4, sites)
    bcasts = [op for op in naive.comm_ops()
              if op.kind == BCAST and op.site and op.site[1] == "partial"]
    assert len(bcasts) == 4
    before = naive.stats()

    fused = fuse_broadcasts(naive)
    aggs = [op for op in fused.comm_ops() if op.kind == AGG_SCATTER]
    assert len(aggs) == 1
    assert fused.stats().total_ops < before.total_ops

    dagref, ref = reference_rows(text, params4, keys, {"x": ct})
    binder = Binder(params4, keys, {}, {"x": ct})
    outs, stats, _ = simulate_execute(fused, binder, {"x": (ct.b, ct.a)})
    assert outputs_equal(outs, ref)


def test_fuse_allreduce_two_collectives_become_one(ctx):
    # the aggregate-scatter ending a keyswitch feeds the gather opening its
    # mod-down: the pass rewrites each such pair into one all-reduce
    params, keys, ct_v, _ = ctx
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    prog = fuse_broadcasts(partition(schedule, 4, sites))
    before = prog.stats()
    n_agg = before.op_count.get(AGG_SCATTER, 0)
    n_gather = before.op_count.get(ALL_GATHER, 0)
    assert n_agg >= 1 and n_gather >= 1
    after_prog = fuse_allreduce(prog)
    after = after_prog.stats()
    assert after.op_count.get(ALL_REDUCE, 0) >= 1
    # each rewrite removes a scatter+gather pair and adds one all-reduce
    assert after.total_ops < before.total_ops

    dagref, ref = reference_rows(KS_CHAIN, params, keys, {"x": ct_v})
    binder = Binder(params, keys, {}, {"x": ct_v})
    outs, stats, _ = simulate_execute(after_prog, binder, {"x": (ct_v.b, ct_v.a)})
    assert outputs_equal(outs, ref)


def test_fuse_allreduce_no_pattern_unchanged(ctx):
    params, keys, ct_v, ct_w = ctx
    dag, schedule, sites = compile_limb(ELEMENTWISE_ONLY, params, 4)
    prog = partition(schedule, 4, sites)
    before = [op.op_id for op in prog.comm_ops()]
    after = fuse_allreduce(prog)
    assert [op.op_id for op in after.comm_ops()] == before


def test_passes_never_increase_comm_op_count(ctx):
    params, keys, ct_v, ct_w = ctx
    for text, env in ((KS_CHAIN, {"x": ct_v}), (ELEMENTWISE_ONLY, {"x": ct_v, "y": ct_w})):
        for k in (2, 4):
            dag, schedule, sites = compile_limb(text, params, k)
            prog = partition(schedule, k, sites)
            c0 = prog.stats().total_ops
            prog = fuse_broadcasts(prog)
            c1 = prog.stats().total_ops
            prog = fuse_allreduce(prog)
            c2 = prog.stats().total_ops
            prog = schedule_comms(prog)
            c3 = prog.stats().total_ops
            assert c0 >= c1 >= c2 >= c3


def test_both_passes_cut_bytes_on_keyswitch_chain(ctx):
    params, keys, ct_v, _ = ctx
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    base = partition(schedule, 4, sites).stats().total_bytes
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    opt = fuse_allreduce(fuse_broadcasts(partition(schedule, 4, sites))).stats().total_bytes
    assert opt <= 0.7 * base


def test_schedule_comms_segments_share_logical_op(ctx):
    params, keys, ct_v, _ = ctx
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    prog = fuse_allreduce(fuse_broadcasts(partition(schedule, 4, sites)))
    multi = [op for op in prog.comm_ops() if len(op.rows) >= 8]
    assert multi, "need a long comm to segment"
    before_ops = prog.stats().total_ops
    segged = schedule_comms(prog, segment_bytes=params.N * 8)
    segments = [op for op in segged.comm_ops() if op.segment]
    assert len(segments) > 0
    parent = segments[0].op_id
    parts = [op for op in segments if op.op_id == parent]
    union = sorted(r for op in parts for r in op.rows)
    assert len(parts) == parts[0].segment[1]
    assert segged.stats().total_ops == before_ops  # logical count unchanged


def test_overlap_requires_comm_scheduling(ctx):
    # all-participant collectives fully serialize the single-stream baseline
    # (zero overlap); reordering plus dedicated comm streams lets transfers
    # ride under compute, so overlap strictly grows and the makespan shrinks
    params, keys, ct_v, _ = ctx
    env = {"x": ct_v}
    binder = Binder(params, keys, {}, env)

    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4, "InputBroadcast")
    sync_ib = partition(schedule, 4, sites)
    _, _, tl_ib = simulate_execute(sync_ib, binder, {"x": (ct_v.b, ct_v.a)})
    assert tl_ib.overlap() == 0.0

    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    sync = partition(schedule, 4, sites)
    _, _, tl_sync = simulate_execute(sync, binder, {"x": (ct_v.b, ct_v.a)})

    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    asyn = schedule_comms(partition(schedule, 4, sites))
    _, _, tl_async = simulate_execute(asyn, binder, {"x": (ct_v.b, ct_v.a)})
    assert tl_async.overlap() > tl_sync.overlap()
    assert tl_async.overlap() > 0.0
    assert tl_async.makespan <= tl_sync.makespan


def test_interleaving_randomization_is_invisible(ctx):
    params, keys, ct_v, _ = ctx
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 4)
    prog = schedule_comms(fuse_allreduce(fuse_broadcasts(partition(schedule, 4, sites))))
    allocs = device_allocations(prog)
    binder = Binder(params, keys, {}, {"x": ct_v})
    results = set()
    for seed in range(12):
        outs, stats, tl = simulate_execute(prog, binder, {"x": (ct_v.b, ct_v.a)},
                                           seed=seed, allocations=allocs)
        (nm,) = outs.keys()
        results.add((outs[nm][0].limbs.tobytes(), outs[nm][1].limbs.tobytes(),
                     stats.key(), round(tl.makespan, 12)))
    assert len(results) == 1


def test_deadlock_detected_on_truncated_program(ctx):
    params, keys, ct_v, _ = ctx
    dag, schedule, sites = compile_limb(KS_CHAIN, params, 2)
    prog = partition(schedule, 2, sites)
    # drop one kernel item so a collective's input row never materializes
    from limbforge.multidev import KernelItem

    for i, it in enumerate(prog.items):
        if isinstance(it, KernelItem) and any(
                isinstance(j, CommOp) for j in prog.items[i + 1:]):
            victim = i
    prog.items.pop(victim)
    binder = Binder(params, keys, {}, {"x": ct_v})
    with pytest.raises((DeadlockDetected, KeyError, AssertionError)):
        simulate_execute(prog, binder, {"x": (ct_v.b, ct_v.a)})
