import numpy as np
import pytest

from limbforge.bindings import Binder
from limbforge.ckks import decrypt, encrypt
from limbforge.encoding import encode
from limbforge.evaluate import KeyBundle, run_circuit
from limbforge.parser import parse_program
from limbforge.polyir import (
    P_ADD,
    P_INTT,
    P_KS_INNER,
    P_MODDOWN,
    P_NTT,
    hoist_rotations,
    lower_to_poly_ir,
    merge_mod_down,
    run_function_ir,
)
from limbforge.typecheck import typecheck
from tests.conftest import rotation_keys


def lower(text, params, passes=()):
    typed = typecheck(parse_program(text), params)
    ir = lower_to_poly_ir(typed)
    for p in passes:
        for step in ir.steps:
            if not hasattr(step, "callee"):
                p(step)
    return typed, ir


def single_segment(ir):
    segs = [s for s in ir.steps if not hasattr(s, "callee")]
    assert len(segs) == 1
    return segs[0]


@pytest.fixture(scope="module")
def small_ctx(params_small, keys_small):
    sk, pk, rlk = keys_small
    rots = rotation_keys(params_small, sk, range(1, 9))
    keys = KeyBundle(public=pk, relin=rlk, rotations=rots)
    rng = np.random.default_rng(21)
    v = rng.uniform(-1, 1, params_small.n)
    ct = encrypt(encode(v, params_small), pk, params_small, rng)
    return params_small, sk, keys, v, ct


def test_single_add_is_two_padds(params_small):
    _, ir = lower("fn main(ct x) {\n  y = add x x\n  return y\n}", params_small)
    seg = single_segment(ir)
    assert [i.opcode for i in seg.instrs] == [P_ADD, P_ADD]


def test_empty_function_empty_dag(params_small):
    _, ir = lower("fn main(ct x) {\n  return x\n}", params_small)
    seg = single_segment(ir)
    assert seg.instrs == []


def test_rotate_instruction_multiset(params_small):
    text = "evk rot 1\nfn main(ct x) {\n  y = rotate x 1\n  return y\n}"
    _, ir = lower(text, params_small)
    seg = single_segment(ir)
    counts = seg.opcode_counts()
    d = len(params_small.ks.digits_at_level(params_small.max_level))
    assert counts[P_KS_INNER] == d
    assert counts.get(P_NTT, 0) + counts.get(P_INTT, 0) >= d + 1
    assert counts[P_MODDOWN] == 2


def test_poly_path_matches_direct_evaluator_bitwise(small_ctx):
    params, sk, keys, v, ct = small_ctx
    text = """
evk relin
evk rot 1 2
fn main(ct x) {
  s = add x x
  m = mul s x
  r = rescale m
  t = rotate r 2
  return t
}
"""
    typed, ir = lower(text, params)
    direct = run_circuit(typed, {"x": ct}, {}, keys)

    binder = Binder(params, keys, {}, {"x": ct})
    fn_irs = {ir.name: ir}
    via_ir = run_function_ir(fn_irs, ir.name, binder, {"x": ct})

    assert np.array_equal(via_ir.b.limbs, direct.b.limbs)
    assert np.array_equal(via_ir.a.limbs, direct.a.limbs)
    assert via_ir.scale == direct.scale and via_ir.level == direct.level


def test_mulplain_and_plaintext_binding_match(small_ctx):
    params, sk, keys, v, ct = small_ctx
    text = """
pt w len=128
fn main(ct x) {
  y = mulplain x w
  return y
}
"""
    typed, ir = lower(text, params)
    wvec = np.linspace(-1, 1, params.n)
    direct = run_circuit(typed, {"x": ct}, {"w": wvec}, keys)
    via_ir = run_function_ir({ir.name: ir}, ir.name,
                             Binder(params, keys, {"w": wvec}, {"x": ct}), {"x": ct})
    assert np.array_equal(via_ir.b.limbs, direct.b.limbs)
    assert np.array_equal(via_ir.a.limbs, direct.a.limbs)


ROTS8 = """
evk rot 1 2 3 4 5 6 7 8
fn main(ct x) {
  r1 = rotate x 1
  r2 = rotate x 2
  r3 = rotate x 3
  r4 = rotate x 4
  r5 = rotate x 5
  r6 = rotate x 6
  r7 = rotate x 7
  r8 = rotate x 8
  s1 = add r1 r2
  s2 = add r3 r4
  s3 = add r5 r6
  s4 = add r7 r8
  t1 = add s1 s2
  t2 = add s3 s4
  u = add t1 t2
  return u
}
"""


def test_hoisting_shares_one_decomposition(params_small):
    _, unhoisted = lower(ROTS8, params_small)
    seg_u = single_segment(unhoisted)
    before = seg_u.opcode_counts()

    _, hoisted = lower(ROTS8, params_small, passes=(hoist_rotations,))
    seg_h = single_segment(hoisted)
    after = seg_h.opcode_counts()

    d = len(params_small.ks.digits_at_level(params_small.max_level))
    # 8 private decompositions collapse to 1 shared one
    assert before[P_INTT] - after[P_INTT] == 7 * d
    assert after[P_INTT] < before[P_INTT]
    assert sum(after.values()) < sum(before.values())


def test_single_rotation_unchanged_by_hoisting(params_small):
    text = "evk rot 1\nfn main(ct x) {\n  y = rotate x 1\n  return y\n}"
    _, ir = lower(text, params_small)
    seg = single_segment(ir)
    before = [i.opcode for i in seg.instrs]
    assert hoist_rotations(seg) == []
    assert [i.opcode for i in seg.instrs] == before


def test_hoisting_is_bit_exact(small_ctx):
    params, sk, keys, v, ct = small_ctx
    typed, plain_ir = lower(ROTS8, params)
    _, hoist_ir = lower(ROTS8, params, passes=(hoist_rotations,))
    binder = Binder(params, keys, {}, {"x": ct})
    out1 = run_function_ir({plain_ir.name: plain_ir}, plain_ir.name, binder, {"x": ct})
    out2 = run_function_ir({hoist_ir.name: hoist_ir}, hoist_ir.name, binder, {"x": ct})
    assert np.array_equal(out1.b.limbs, out2.b.limbs)
    assert np.array_equal(out1.a.limbs, out2.a.limbs)


ROTS4_SUM = """
evk rot 1 2 3 4
fn main(ct x) {
  r1 = rotate x 1
  r2 = rotate x 2
  r3 = rotate x 3
  r4 = rotate x 4
  s1 = add r1 r2
  s2 = add r3 r4
  s = add s1 s2
  return s
}
"""


def test_merge_mod_down_collapses_accumulation(params_small):
    _, ir = lower(ROTS4_SUM, params_small)
    seg = single_segment(ir)
    assert seg.opcode_counts()[P_MODDOWN] == 8  # b and a sides of 4 rotations
    merged = merge_mod_down(seg)
    # the a-component sums merge 4 -> 1; the b side keeps its private mod-downs
    assert merged == 3
    assert seg.opcode_counts()[P_MODDOWN] == 5


def test_merge_mod_down_no_pattern_unchanged(params_small):
    text = "evk rot 1\nfn main(ct x) {\n  y = rotate x 1\n  return y\n}"
    _, ir = lower(text, params_small)
    seg = single_segment(ir)
    before = [i.opcode for i in seg.instrs]
    assert merge_mod_down(seg) == 0
    assert [i.opcode for i in seg.instrs] == before


def test_merge_mod_down_decryption_close(small_ctx):
    # mod-down is floor rounding, so merging alters the result only by the
    # rounding carries: bounded by (#summands) in coefficient units.
    params, sk, keys, v, ct = small_ctx
    typed, base_ir = lower(ROTS4_SUM, params)
    _, merged_ir = lower(ROTS4_SUM, params, passes=(merge_mod_down,))
    binder = Binder(params, keys, {}, {"x": ct})
    out1 = run_function_ir({base_ir.name: base_ir}, base_ir.name, binder, {"x": ct})
    out2 = run_function_ir({merged_ir.name: merged_ir}, merged_ir.name, binder, {"x": ct})
    d1 = decrypt(out1, sk, params)
    d2 = decrypt(out2, sk, params)
    # per coefficient: 4 floor carries plus up to alpha conversion corrections
    bound = 4 * (params.num_special + 1) * params.N / float(params.scale)
    assert np.abs(d1 - d2).max() < bound
    expect = sum(np.roll(v, -k) for k in (1, 2, 3, 4))
    assert np.abs(d2 - expect).max() < 0.1


def test_passes_preserve_acyclicity_and_instruction_validity(params_small):
    _, ir = lower(ROTS8, params_small, passes=(hoist_rotations, merge_mod_down))
    seg = single_segment(ir)
    defined = {v.vid for v in seg.values if v.is_input}
    for ins in seg.instrs:
        for s in ins.srcs:
            assert s in defined, f"instr {ins.idx} uses {s} before definition"
        defined.update(ins.dsts)
