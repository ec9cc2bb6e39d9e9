import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limbforge.fusion import (
    FusionConfig,
    FusionState,
    fuse_dag,
    fusion_dot,
    fusion_legal_horizontal,
    fusion_legal_vertical,
    partition_subdags,
)
from limbforge.limbir import (
    CAT_INPUT,
    OP_ADD,
    OP_AUTOMORPH,
    OP_MUL,
    OP_NTT,
    OP_SUB,
    LimbDag,
    lower_to_limb_ir,
)
from limbforge.params import gen_params
from limbforge.parser import parse_program
from limbforge.polyir import hoist_rotations, lower_to_poly_ir, merge_mod_down
from limbforge.typecheck import typecheck


@pytest.fixture(scope="module")
def p16():
    return gen_params(16, 2, d=1, seed=7)


def dag_with(p16, build):
    dag = LimbDag(p16, "t")
    ins = [dag.input_value(("ct", f"x{i}", "b", i % 3), i % 3, CAT_INPUT)
           for i in range(4)]
    build(dag, ins)
    return dag


def test_independent_ntts_fuse(p16):
    # two NTT instructions with no dependency belong in one kernel
    def build(dag, ins):
        dag.emit(OP_NTT, 0, dag.new_value(0), (ins[0],))
        dag.emit(OP_NTT, 1, dag.new_value(1), (ins[1],))

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs)
    assert fusion_legal_horizontal(state, 0, 1)
    fused = fuse_dag(dag)
    assert len(fused) == 1 and len(fused[0].lanes) == 2


def test_chained_ntts_stay_unfused(p16):
    # A feeds B feeds C: fusing A with C would close a cycle through B
    def build(dag, ins):
        a = dag.new_value(0)
        dag.emit(OP_NTT, 0, a, (ins[0],))
        b = dag.new_value(0)
        dag.emit(OP_ADD, 0, b, (a, ins[1]))
        dag.emit(OP_NTT, 0, dag.new_value(0), (b,))

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs, FusionConfig(debug_cycles=True))
    assert not fusion_legal_horizontal(state, 0, 2)


def test_different_opcodes_never_fuse_horizontally(p16):
    def build(dag, ins):
        dag.emit(OP_NTT, 0, dag.new_value(0), (ins[0],))
        dag.emit(OP_ADD, 0, dag.new_value(0), (ins[1], ins[2]))

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs)
    assert not fusion_legal_horizontal(state, 0, 1)


def test_rotate_feeding_add_fuses_vertically(p16):
    # the permutation reads kernel-external memory, so an automorph may head
    # a chain; its consumer add joins the same lane
    def build(dag, ins):
        r = dag.new_value(0)
        dag.emit(OP_AUTOMORPH, 0, r, (ins[0],), meta={"galois": 5})
        dag.emit(OP_ADD, 0, dag.new_value(0), (r, ins[1]))

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs)
    assert fusion_legal_vertical(state, 0, 1)
    fused = fuse_dag(dag)
    assert len(fused) == 1
    assert [i.opcode for i in fused[0].lanes[0]] == [OP_AUTOMORPH, OP_ADD]


def test_subtract_never_joins_its_rotate_consumer(p16):
    # the subtract produces the rotate's source: both ends of a permutation
    # inside one kernel would need unsafe cross-lane communication
    def build(dag, ins):
        s = dag.new_value(0)
        dag.emit(OP_SUB, 0, s, (ins[0], ins[1]))
        dag.emit(OP_AUTOMORPH, 0, dag.new_value(0), (s,), meta={"galois": 5})

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs)
    assert not fusion_legal_vertical(state, 0, 1)
    fused = fuse_dag(dag)
    assert len(fused) == 2


def test_ntt_never_fuses_with_elementwise_consumer(p16):
    def build(dag, ins):
        t = dag.new_value(0)
        dag.emit(OP_NTT, 0, t, (ins[0],))
        dag.emit(OP_MUL, 0, dag.new_value(0), (t, ins[1]))

    dag = dag_with(p16, build)
    state = FusionState(dag, dag.instrs)
    assert not fusion_legal_vertical(state, 0, 1)


def test_elementwise_chain_fuses_three_deep(p16):
    def build(dag, ins):
        a = dag.new_value(0)
        dag.emit(OP_MUL, 0, a, (ins[0], ins[1]))
        b = dag.new_value(0)
        dag.emit(OP_ADD, 0, b, (a, ins[2]))
        dag.emit(OP_SUB, 0, dag.new_value(0), (b, ins[3] if False else ins[0]))

    dag = dag_with(p16, build)
    fused = fuse_dag(dag)
    assert len(fused) == 1
    assert fused[0].depth() == 3


def test_chain_splits_at_automorph_boundary(p16):
    # sub -> automorph -> add: the permutation separates the two kernels
    def build(dag, ins):
        s = dag.new_value(0)
        dag.emit(OP_SUB, 0, s, (ins[0], ins[1]))
        r = dag.new_value(0)
        dag.emit(OP_AUTOMORPH, 0, r, (s,), meta={"galois": 5})
        dag.emit(OP_ADD, 0, dag.new_value(0), (r, ins[2] if False else ins[0]))

    dag = dag_with(p16, build)
    fused = fuse_dag(dag)
    assert len(fused) == 2
    kinds = sorted(tuple(i.opcode for i in n.lanes[0]) for n in fused)
    assert kinds == sorted([(OP_SUB,), (OP_AUTOMORPH, OP_ADD)])


@pytest.fixture(scope="module")
def bsgs_dag(params_small):
    from limbforge.bsgs import default_plan, emit_bsgs_matvec
    from limbforge.circuit import print_program

    prog = emit_bsgs_matvec(16, default_plan(16), params_small)
    typed = typecheck(parse_program(print_program(prog)), params_small)
    ir = lower_to_poly_ir(typed)
    seg = ir.steps[0]
    hoist_rotations(seg)
    merge_mod_down(seg)
    return lower_to_limb_ir(seg, {})


def test_full_polynomial_ntt_becomes_one_kernel(params_small):
    text = "evk relin\nfn main(ct x, ct y) {\n  m = mul x y\n  q = rescale m\n  return q\n}"
    typed = typecheck(parse_program(text), params_small)
    ir = lower_to_poly_ir(typed)
    dag = lower_to_limb_ir(ir.steps[0], {})
    fused = fuse_dag(dag, FusionConfig(vertical=False))
    intt_nodes = [n for n in fused if n.opclass == "INTT"]
    # the rescale INTT of b and a fuse into a shared kernel with full lanes
    assert any(len(n.lanes) >= 2 for n in intt_nodes)


def test_partition_small_dag_single_chunk(bsgs_dag):
    assert len(partition_subdags(bsgs_dag, 4096)) == 1


def test_partition_respects_order_and_size(p16):
    def build(dag, ins):
        cur = ins[0]
        for _ in range(100):
            d = dag.new_value(0)
            dag.emit(OP_ADD, 0, d, (cur, ins[1]))
            cur = d

    dag = dag_with(p16, build)
    chunks = partition_subdags(dag, 40)
    assert [len(c) for c in chunks] == [40, 40, 20]
    seen = set()
    for chunk in chunks:
        for ins in chunk:
            for s in ins.srcs:
                assert s not in {i.dst for c in chunks[chunks.index(chunk) + 1:]
                                 for i in c}
            seen.add(ins.dst)


def test_fusion_quality_monotone_in_subdag_size(bsgs_dag):
    small = fuse_dag(bsgs_dag, FusionConfig(subdag_max=64))
    large = fuse_dag(bsgs_dag, FusionConfig(subdag_max=4096))
    assert len(small) >= len(large)


def test_fusion_preserves_instruction_multiset(bsgs_dag):
    fused = fuse_dag(bsgs_dag)
    members = sorted(id(i) for n in fused for i in n.members)
    assert members == sorted(id(i) for i in bsgs_dag.instrs)


def test_fused_order_is_topological(bsgs_dag):
    fused = fuse_dag(bsgs_dag)
    produced = set(bsgs_dag.inputs.values())
    for node in fused:
        for ins in node.members:
            for s in ins.srcs:
                assert s in produced or any(s == m.dst for m in node.members)
        for ins in node.members:
            produced.add(ins.dst)


def test_debug_cycle_checker_agrees_with_dfs(params_small):
    text = ("evk relin\nevk rot 1 2\n"
            "fn main(ct x) {\n  a = rotate x 1\n  b = rotate x 2\n"
            "  s = add a b\n  m = mul s x\n  q = rescale m\n  return q\n}")
    typed = typecheck(parse_program(text), params_small)
    ir = lower_to_poly_ir(typed)
    seg = ir.steps[0]
    hoist_rotations(seg)
    dag = lower_to_limb_ir(seg, {})
    # debug mode asserts set-intersection and DFS reachability agree on
    # every attempted merge
    fused = fuse_dag(dag, FusionConfig(debug_cycles=True))
    assert fused


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_elementwise_dags_fuse_safely(seed):
    params = gen_params(16, 2, d=1, seed=7)
    rng = np.random.default_rng(seed)
    dag = LimbDag(params, "rand")
    vals = [dag.input_value(("ct", f"i{k}", "b", 0), 0, CAT_INPUT) for k in range(3)]
    for _ in range(rng.integers(3, 20)):
        op = rng.choice([OP_ADD, OP_MUL, OP_SUB])
        a, b = rng.choice(len(vals), 2)
        d = dag.new_value(0)
        dag.emit(op, 0, d, (vals[a], vals[b]))
        vals.append(d)
    fused = fuse_dag(dag, FusionConfig(debug_cycles=True))
    assert sorted(id(i) for n in fused for i in n.members) == \
        sorted(id(i) for i in dag.instrs)
    produced = set(dag.inputs.values())
    for node in fused:
        node_dsts = {m.dst for m in node.members}
        for ins in node.members:
            for s in ins.srcs:
                assert s in produced or s in node_dsts
        produced |= node_dsts


def test_dot_dump_mentions_every_kernel(bsgs_dag):
    fused = fuse_dag(bsgs_dag)
    dot = fusion_dot(fused)
    assert dot.startswith("digraph")
    for node in fused:
        assert f"n{node.fid}" in dot
