import numpy as np
import pytest

from limbforge.codegen import (
    CompilerConfig,
    KernelRunner,
    build_twiddle_tables,
    gen_kernel,
    gen_ntt_kernel,
    plan_kernels,
    plan_lazy_reduction,
    split_kernel,
)
from limbforge.errors import UnsplittableKernel
from limbforge.fusion import FusionConfig, fuse_dag
from limbforge.limbir import (
    CAT_INPUT,
    OP_ADD,
    OP_MUL,
    OP_MULACC,
    OP_NTT,
    LimbDag,
)
from limbforge.ntt import ntt_forward
from limbforge.params import gen_params

CFG = CompilerConfig()


@pytest.fixture(scope="module")
def p16():
    return gen_params(16, 2, d=1, seed=7)


def dict_store(dag, rng, params):
    """Row storage for plan execution: inputs pre-filled, outputs empty."""
    store = {}
    for ref, lvid in dag.inputs.items():
        q = params.rns_basis[0] if dag.values[lvid].base_id < 100 else None
        from limbforge.poly import prime_for_id

        q = prime_for_id(params, dag.values[lvid].base_id)
        store[lvid] = rng.integers(0, q, params.N, dtype=np.uint64)
    return store


def run_plans(plans, params, store):
    runner = KernelRunner(params)

    def read(lvid):
        return store[lvid]

    def write(lvid):
        if lvid not in store:
            store[lvid] = np.empty(params.N, dtype=np.uint64)
        return store[lvid]

    for plan in plans:
        runner.run(plan, read, write)
    return store


def synth_dag(params, n_inputs, build):
    """Hand-built limb DAG on base 0 for kernel-level tests."""
    dag = LimbDag(params, "synth")
    ins = [dag.input_value(("ct", f"x{i}", "b", 0), 0, CAT_INPUT)
           for i in range(n_inputs)]
    outs = build(dag, ins)
    dag.outputs["out"] = {"ids": (0,), "b": [outs[-1]], "a": [outs[-1]],
                          "level": 0, "scale": 1}
    return dag


def test_ntt_plan_bit_equals_reference(p16, rng):
    dag = LimbDag(p16, "ntt")
    x = dag.input_value(("ct", "x", "b", 0), 0, CAT_INPUT)
    d = dag.new_value(0)
    dag.emit(OP_NTT, 0, d, (x,))
    fused = fuse_dag(dag)
    tables = build_twiddle_tables(p16)
    plan = gen_ntt_kernel(fused[0], tables, p16, CFG)
    q = p16.rns_basis[0]
    store = {x: rng.integers(0, q, 16, dtype=np.uint64)}
    run_plans([plan], p16, store)
    assert np.array_equal(store[d], ntt_forward(store[x], q))
    # stage twiddles are contiguous slices of the permuted table
    stages = plan.lanes[0].ops[0].meta["stages"]
    assert [s["twiddle_slice"] for s in stages] == [(t, 2 * t) for t in (1, 2, 4, 8)]


def test_inverse_then_forward_identity(p16, rng):
    from limbforge.limbir import OP_INTT

    dag = LimbDag(p16, "rt")
    x = dag.input_value(("ct", "x", "b", 0), 0, CAT_INPUT)
    m = dag.new_value(0)
    d = dag.new_value(0)
    dag.emit(OP_INTT, 0, m, (x,))
    dag.emit(OP_NTT, 0, d, (m,))
    plans = plan_kernels(fuse_dag(dag), dag, p16, CFG)
    q = p16.rns_basis[0]
    store = {x: rng.integers(0, q, 16, dtype=np.uint64)}
    run_plans(plans, p16, store)
    assert np.array_equal(store[d], store[x])


def test_load_reuse_downgrades_shared_input(p16):
    # two Muls on the same base sharing one input: one lane, input once
    dag = LimbDag(p16, "share")
    shared = dag.input_value(("ct", "s", "b", 0), 0, CAT_INPUT)
    w1 = dag.input_value(("pt", "w1", 0, 1, 0), 0, CAT_INPUT)
    w2 = dag.input_value(("pt", "w2", 0, 1, 0), 0, CAT_INPUT)
    d1, d2 = dag.new_value(0), dag.new_value(0)
    dag.emit(OP_MUL, 0, d1, (shared, w1))
    dag.emit(OP_MUL, 0, d2, (shared, w2))
    fused = fuse_dag(dag, FusionConfig(vertical=False))
    assert len(fused) == 1 and len(fused[0].lanes) == 2
    plan = gen_kernel(fused[0], p16, CFG)
    assert len(plan.lanes) == 1
    assert plan.operand_table.count(shared) == 1


def test_single_instruction_plan_matches_direct(p16):
    dag = LimbDag(p16, "one")
    a = dag.input_value(("ct", "a", "b", 0), 0, CAT_INPUT)
    b = dag.input_value(("ct", "b", "b", 0), 0, CAT_INPUT)
    d = dag.new_value(0)
    dag.emit(OP_ADD, 0, d, (a, b))
    plan = gen_kernel(fuse_dag(dag)[0], p16, CFG)
    assert len(plan.lanes) == 1
    assert len(plan.lanes[0].ops) == 1
    assert plan.lanes[0].ops[0].store_slot is not None


def test_chain_writes_once_per_lane(p16, rng):
    # five chained adds fused vertically: one store instead of five
    def build(dag, ins):
        cur = ins[0]
        outs = []
        for i in range(5):
            d = dag.new_value(0)
            dag.emit(OP_ADD, 0, d, (cur, ins[i + 1]))
            cur = d
            outs.append(d)
        return outs

    params = gen_params(16, 2, d=1, seed=7)
    dag = synth_dag(params, 6, build)
    fused = fuse_dag(dag)
    assert len(fused) == 1 and fused[0].depth() == 5
    plans = plan_kernels(fused, dag, params, CFG)
    assert len(plans) == 1
    stores = [op for lane in plans[0].lanes for op in lane.ops
              if op.store_slot is not None]
    assert len(stores) == 1

    # and execution matches the naive oracle
    store = dict_store(dag, rng, params)
    from limbforge.poly import row_add

    q = params.rns_basis[0]
    expect = store[dag.inputs[("ct", "x0", "b", 0)]]
    for i in range(1, 6):
        expect = row_add(expect, store[dag.inputs[(f"ct", f"x{i}", "b", 0)]], q)
    run_plans(plans, params, store)
    assert np.array_equal(store[plans[0].operand_table[plans[0].writes[0]]], expect)


def test_lazy_reduction_counts(p16):
    # sum of 4 products: no intermediate reductions, one final
    def build(dag, ins):
        acc = dag.new_value(0)
        dag.emit(OP_MUL, 0, acc, (ins[0], ins[1]))
        outs = [acc]
        for i in range(3):
            d = dag.new_value(0)
            dag.emit(OP_MULACC, 0, d, (acc, ins[2 * i + 2], ins[2 * i + 3]))
            acc = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 8, build)
    fused = fuse_dag(dag)
    assert len(fused) == 1
    plan = plan_lazy_reduction(gen_kernel(fused[0], p16, CFG), p16, CFG)
    assert len(plan.reduction_points) == 1
    (li, oi) = plan.reduction_points[0]
    assert oi == len(plan.lanes[li].ops) - 1


def test_lazy_reduction_forced_by_budget(p16):
    cfg = CompilerConfig(lazy_budget=256)

    def build(dag, ins):
        acc = dag.new_value(0)
        dag.emit(OP_MUL, 0, acc, (ins[0], ins[1]))
        outs = [acc]
        for i in range(299):
            d = dag.new_value(0)
            dag.emit(OP_MULACC, 0, d, (acc, ins[0], ins[1]))
            acc = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 2, build)
    fused = fuse_dag(dag)
    plan = plan_lazy_reduction(gen_kernel(fused[0], p16, cfg), p16, cfg)
    assert len(plan.reduction_points) >= 2  # at least one mid-chain + final


def test_lazy_vs_eager_bit_identical(p16, rng):
    def build(dag, ins):
        acc = dag.new_value(0)
        dag.emit(OP_MUL, 0, acc, (ins[0], ins[1]))
        outs = [acc]
        for i in range(6):
            d = dag.new_value(0)
            dag.emit(OP_MULACC, 0, d, (acc, ins[i % 3], ins[(i + 1) % 3]))
            acc = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 3, build)
    fused = fuse_dag(dag)
    lazy = plan_lazy_reduction(gen_kernel(fused[0], p16, CFG), p16, CFG)
    eager = gen_kernel(fused[0], p16, CFG)  # default: reduce after every op

    s1 = dict_store(dag, rng, p16)
    s2 = {k: v.copy() for k, v in s1.items()}
    run_plans([lazy], p16, s1)
    run_plans([eager], p16, s2)
    out = dag.outputs["out"]["b"][0]
    assert np.array_equal(s1[out], s2[out])


def test_lazy_bounds_never_overflow_shadow(p16, rng):
    # shadow-execute with unbounded ints: no value may reach 2^64 before
    # its declared reduction point
    def build(dag, ins):
        acc = dag.new_value(0)
        dag.emit(OP_MUL, 0, acc, (ins[0], ins[1]))
        outs = [acc]
        for i in range(40):
            d = dag.new_value(0)
            dag.emit(OP_MULACC, 0, d, (acc, ins[0], ins[1]))
            acc = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 2, build)
    plan = plan_lazy_reduction(gen_kernel(fuse_dag(dag)[0], p16, CFG), p16, CFG)
    q = p16.rns_basis[0]
    store = {lvid: rng.integers(0, q, 16, dtype=np.uint64).astype(object)
             for lvid in dag.inputs.values()}
    regs = {}
    for lane in plan.lanes:
        for op in lane.ops:
            srcs = [regs[i] if kind == "r" else store[plan.operand_table[i]]
                    for kind, i in op.srcs]
            if op.opcode == OP_MUL:
                val = srcs[0] * srcs[1]
            elif op.opcode == OP_MULACC:
                val = srcs[0] + srcs[1] * srcs[2]
            else:
                raise AssertionError
            assert max(int(v) for v in val) < 2 ** 64, "64-bit overflow"
            if op.reduce_after:
                val = val % q
            regs[op.dst_reg] = val


def test_split_by_register_pressure(p16):
    cfg = CompilerConfig(reg_threshold=8)

    def build(dag, ins):
        cur = ins[0]
        outs = []
        for i in range(24):
            d = dag.new_value(0)
            dag.emit(OP_ADD, 0, d, (cur, ins[1]))
            cur = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 2, build)
    fused = fuse_dag(dag)
    plan = plan_lazy_reduction(gen_kernel(fused[0], p16, cfg), p16, cfg)
    assert plan.est_regs > 3 * cfg.reg_threshold
    parts = split_kernel(plan, p16, cfg)
    assert len(parts) >= 3
    assert all(p.est_regs <= cfg.reg_threshold for p in parts)


def test_split_preserves_semantics(p16, rng):
    cfg = CompilerConfig(reg_threshold=8)

    def build(dag, ins):
        cur = ins[0]
        outs = []
        for i in range(24):
            d = dag.new_value(0)
            dag.emit(OP_ADD, 0, d, (cur, ins[1]))
            cur = d
            outs.append(d)
        return outs

    dag = synth_dag(p16, 2, build)
    fused = fuse_dag(dag)
    whole = plan_lazy_reduction(gen_kernel(fused[0], p16, CFG), p16, CFG)
    parts = split_kernel(plan_lazy_reduction(gen_kernel(fused[0], p16, cfg), p16, cfg),
                         p16, cfg)
    s1 = dict_store(dag, rng, p16)
    s2 = {k: v.copy() for k, v in s1.items()}
    run_plans([whole], p16, s1)
    run_plans(parts, p16, s2)
    out = dag.outputs["out"]["b"][0]
    assert np.array_equal(s1[out], s2[out])


def test_split_under_threshold_unchanged(p16):
    dag = LimbDag(p16, "small")
    a = dag.input_value(("ct", "a", "b", 0), 0, CAT_INPUT)
    b = dag.input_value(("ct", "b", "b", 0), 0, CAT_INPUT)
    d = dag.new_value(0)
    dag.emit(OP_ADD, 0, d, (a, b))
    plan = gen_kernel(fuse_dag(dag)[0], p16, CFG)
    assert split_kernel(plan, p16, CFG) == [plan]


def test_wide_horizontal_kernel_splits_by_operands():
    params = gen_params(64, 5, d=3, seed=1)
    cfg = CompilerConfig(operand_threshold=16)
    dag = LimbDag(params, "wide")
    outs = []
    for i in range(40):
        a = dag.input_value(("ct", f"a{i}", "b", 0), 0, CAT_INPUT)
        b = dag.input_value(("ct", f"b{i}", "b", 0), 0, CAT_INPUT)
        d = dag.new_value(0)
        dag.emit(OP_ADD, 0, d, (a, b))
        outs.append(d)
    fused = fuse_dag(dag)
    assert len(fused) == 1 and len(fused[0].lanes) == 40
    plan = gen_kernel(fused[0], params, cfg)
    parts = split_kernel(plan, params, cfg)
    assert len(parts) > 1
    assert all(p.est_operands <= cfg.operand_threshold for p in parts)


def test_unsplittable_kernel_raises(p16):
    cfg = CompilerConfig(reg_threshold=1, operand_threshold=1)
    dag = LimbDag(p16, "x")
    a = dag.input_value(("ct", "a", "b", 0), 0, CAT_INPUT)
    b = dag.input_value(("ct", "b", "b", 0), 0, CAT_INPUT)
    d = dag.new_value(0)
    dag.emit(OP_ADD, 0, d, (a, b))
    plan = gen_kernel(fuse_dag(dag)[0], p16, cfg)
    with pytest.raises(UnsplittableKernel):
        split_kernel(plan, p16, cfg)
