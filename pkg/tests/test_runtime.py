import numpy as np
import pytest

from limbforge.bench import bsgs64, tinylayer4, run_benchmark
from limbforge.ckks import decrypt, encrypt
from limbforge.encoding import encode
from limbforge.errors import PoolUnbound, UnresolvedFunction
from limbforge.evaluate import KeyBundle, run_circuit
from limbforge.keys import keygen
from limbforge.limbir import CAT_INTERMEDIATE, CAT_WEIGHT
from limbforge.params import gen_params
from limbforge.parser import parse_program
from limbforge.pipeline import CompileOptions, compile_source
from limbforge.runtime import Executor, SegmentExec, link, share_pools
from limbforge.typecheck import typecheck

SQUARE_TWICE = """
evk relin
fn square(ct v) {
  w = mul v v
  r = rescale w
  return r
}
fn main(ct x, ct y) {
  a = call square x
  b = call square y
  s = add a b
  return s
}
"""


@pytest.fixture(scope="module")
def p():
    return gen_params(256, 4, d=3, seed=3)


@pytest.fixture(scope="module")
def keyed(p):
    sk, pk, rlk = keygen(p, seed=11)
    return sk, pk, KeyBundle(public=pk, relin=rlk, rotations={})


def test_single_function_plan_is_its_subplan(p, keyed):
    text = "fn main(ct x) {\n  y = add x x\n  return y\n}"
    compiled = compile_source(text, p)
    plan = link(compiled)
    segs = [it for it in plan.flat if isinstance(it, SegmentExec)]
    assert len(segs) == 1
    assert plan.sub_plan_refs == {"main": 1}


def test_callee_built_once_referenced_twice(p, keyed):
    compiled = compile_source(SQUARE_TWICE, p)
    assert compiled.build_count["square"] == 1
    plan = link(compiled)
    assert plan.sub_plan_refs["square"] == 2
    shared = [id(it.compiled) for it in plan.flat if isinstance(it, SegmentExec)]
    assert len(shared) != len(set(shared))  # same compiled segment object reused


def test_unresolved_function(p):
    compiled = compile_source(SQUARE_TWICE, p)
    del compiled.functions["square"]
    with pytest.raises(UnresolvedFunction):
        link(compiled)


def test_call_tree_executes_correctly(p, keyed):
    sk, pk, keys = keyed
    compiled = compile_source(SQUARE_TWICE, p)
    ex = Executor(link(compiled))
    rng = np.random.default_rng(5)
    v1 = rng.uniform(-1, 1, p.n)
    v2 = rng.uniform(-1, 1, p.n)
    ct1 = encrypt(encode(v1, p), pk, p, rng)
    ct2 = encrypt(encode(v2, p), pk, p, rng)

    typed = typecheck(parse_program(SQUARE_TWICE), p)
    direct = run_circuit(typed, {"x": ct1, "y": ct2}, {}, keys)
    out, stats = ex.execute({"x": ct1, "y": ct2}, keys)
    assert np.array_equal(out.b.limbs, direct.b.limbs)
    assert np.array_equal(out.a.limbs, direct.a.limbs)
    assert stats.allocation_count == 0


def test_sequential_calls_share_one_intermediates_pool(p):
    compiled = compile_source(SQUARE_TWICE, p)
    plan = link(compiled)
    segs = [it for it in plan.flat if isinstance(it, SegmentExec)]
    per_seg = [s.compiled.alloc.pool_sizes[CAT_INTERMEDIATE] for s in segs]
    assert plan.pool_caps[CAT_INTERMEDIATE] == max(per_seg)


def test_stream_parallel_calls_get_disjoint_pools(p):
    text = """
evk relin
fn square(ct v) {
  w = mul v v
  r = rescale w
  return r
}
fn main(ct x, ct y) {
  a = call square x
  !stream 1
  b = call square y
  !stream 0
  s = add a b
  return s
}
"""
    compiled = compile_source(text, p)
    plan = link(compiled)
    caps = share_pools(plan.flat)
    assert len(caps) == 2
    assert plan.pool_caps[CAT_INTERMEDIATE] == sum(caps.values())


def test_four_layer_plan_references_one_layer_subplan():
    bench = tinylayer4(gen_params(256, 4, d=3, seed=3))
    res = run_benchmark(bench)
    plan = res["plan"]
    assert plan.sub_plan_refs["layer"] == 4
    assert len(plan.layers) == 4
    layer_segs = [it for it in plan.flat
                  if isinstance(it, SegmentExec) and it.layer_index is not None]
    assert len({id(s.compiled) for s in layer_segs}) == 1
    assert res["pass"]


def test_plan_reuse_two_keysets_two_weightsets():
    bench = tinylayer4(gen_params(256, 4, d=3, seed=3))
    compiled = compile_source(bench.text, bench.params)
    ex = Executor(link(compiled))

    results = []
    for kseed in (101, 202):
        sk, pk, keys = bench.make_keys(kseed)
        inputs = bench.encrypt_inputs(pk)
        for wseed in (1, 2):
            rng = np.random.default_rng(wseed)
            layers = []
            expected = bench.input_vectors["x"].copy()
            for _ in range(4):
                w = {f"m{i}": rng.uniform(-1, 1, bench.params.n) for i in range(8)}
                layers.append(w)
                for i in range(8):
                    expected = expected + w[f"m{i}"]
                expected = np.roll(expected, -1)
            out, stats = ex.execute(inputs, keys, plaintexts=layers[0],
                                    rebinds=layers)
            got = decrypt(out, sk, bench.params)
            results.append((np.abs(got - expected).max(), stats.rebuilds))

    assert all(err < 0.15 for err, _ in results)
    assert all(rebuilds == 0 for _, rebuilds in results)
    assert len(results) == 4


def test_missing_weight_binding_raises():
    bench = tinylayer4(gen_params(256, 4, d=3, seed=3))
    compiled = compile_source(bench.text, bench.params)
    ex = Executor(link(compiled))
    sk, pk, keys = bench.make_keys()
    inputs = bench.encrypt_inputs(pk)
    with pytest.raises(PoolUnbound):
        ex.execute(inputs, keys, rebinds=[])


def test_online_mode_allocates_and_slows():
    bench = bsgs64(gen_params(256, 4, d=3, seed=3), dim=16)
    pooled = run_benchmark(bench)
    online = run_benchmark(bench, memory_mode="online")
    assert pooled["stats"].allocation_count == 0
    assert online["stats"].allocation_count > 0
    assert online["stats"].sim_time >= 1.5 * pooled["stats"].sim_time
    assert np.array_equal(online["output"].b.limbs, pooled["output"].b.limbs)


def test_prefetch_under_budget_matches_unlimited():
    bench = tinylayer4(gen_params(256, 4, d=3, seed=3))
    unlimited = run_benchmark(bench)
    plan = unlimited["plan"]
    pinned = sum(v for c, v in plan.pool_caps.items() if c != CAT_WEIGHT)
    budget = pinned + plan.pool_caps[CAT_WEIGHT]
    pf = run_benchmark(bench, device_budget=budget, transfer_mode="prefetch")
    od = run_benchmark(bench, device_budget=budget, transfer_mode="ondemand")
    assert pf["stats"].prefetch_ops == 4
    assert np.array_equal(pf["output"].b.limbs, unlimited["output"].b.limbs)
    assert np.array_equal(od["output"].b.limbs, unlimited["output"].b.limbs)
    assert od["stats"].sim_time >= 1.5 * pf["stats"].sim_time
    assert max(pf["plan"].transfer.resident_trace) <= budget


def test_runtime_multi_device_matches_single():
    bench = bsgs64(gen_params(256, 4, d=3, seed=3), dim=16)
    single = run_benchmark(bench)
    multi = run_benchmark(bench, CompileOptions(devices=4))
    assert multi["pass"]
    assert np.array_equal(multi["output"].b.limbs, single["output"].b.limbs)
    assert np.array_equal(multi["output"].a.limbs, single["output"].a.limbs)
    assert multi["stats"].comm.total_ops > 0
