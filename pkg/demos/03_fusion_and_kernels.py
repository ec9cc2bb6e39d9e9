"""Kernel fusion on a real workload: the 64x64 matrix-vector benchmark.

Horizontal fusion packs independent same-opcode limb work into kernel lanes;
vertical fusion chains producers into consumers so intermediates live in
registers. The kernel plans then get lazy modular reduction and splitting
under register/operand budgets, and executing them reproduces the naive
one-instruction-at-a-time interpreter bit for bit.
"""

from limbforge.bench import bsgs64
from limbforge.codegen import CompilerConfig, plan_kernels
from limbforge.fusion import FusionConfig, fuse_dag
from limbforge.limbir import lower_to_limb_ir
from limbforge.params import gen_params
from limbforge.parser import parse_program
from limbforge.polyir import hoist_rotations, lower_to_poly_ir, merge_mod_down
from limbforge.typecheck import typecheck

params = gen_params(N=4096, num_levels=6, d=3, seed=0)
bench = bsgs64(params)
typed = typecheck(parse_program(bench.text), params)
ir = lower_to_poly_ir(typed)
seg = ir.steps[0]
hoist_rotations(seg)
merge_mod_down(seg)
dag = lower_to_limb_ir(seg, {n: d.category for n, d in
                             typed.program.plaintexts.items()})
print(f"bsgs64 limb DAG: {len(dag.instrs)} instructions")

h_only = fuse_dag(dag, FusionConfig(vertical=False))
both = fuse_dag(dag)
print(f"horizontal fusion:        {len(h_only)} kernels "
      f"({len(dag.instrs) / len(h_only):.1f}x fewer)")
print(f"horizontal + vertical:    {len(both)} kernels "
      f"({len(dag.instrs) / len(both):.1f}x fewer)")

widest = max(both, key=lambda n: len(n.lanes))
deepest = max(both, key=lambda n: n.depth())
print(f"widest kernel:  {widest.opclass} with {len(widest.lanes)} lanes")
print(f"deepest kernel: {deepest.opclass} with a {deepest.depth()}-deep chain")

cfg = CompilerConfig()
plans = plan_kernels(both, dag, params, cfg)
print(f"\n{len(plans)} kernel plans after splitting under "
      f"{cfg.reg_threshold} registers / {cfg.operand_threshold} operands")
lazy = sum(len(p.reduction_points) for p in plans)
ops = sum(len(lane.ops) for p in plans for lane in p.lanes)
print(f"lazy modular reduction: {lazy} reduction points across {ops} lane ops "
      f"({100 * lazy / ops:.0f}% of ops reduce; the rest stay unreduced in 64-bit)")
for p in plans[:5]:
    print(" ", p.summary())
