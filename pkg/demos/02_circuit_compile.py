"""From circuit text to limb instructions: lowering, hoisting, mod-down merging.

Shows how one rotation explodes into its polynomial recipe, and how sharing
the decomposition across rotations (hoisting) plus merging mod-downs after
summations shrinks the instruction stream without changing any value bits.
"""

from limbforge.limbir import lower_to_limb_ir
from limbforge.params import gen_params
from limbforge.parser import parse_program
from limbforge.polyir import hoist_rotations, lower_to_poly_ir, merge_mod_down
from limbforge.typecheck import typecheck

params = gen_params(N=4096, num_levels=6, d=3, seed=0)

TEXT = """
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

typed = typecheck(parse_program(TEXT), params)
print("typechecked: every value annotated with (level, exact rational scale)")
info = typed.value_info["main"]
print(f"  x: level {info['x'].level}, scale {float(info['x'].scale):.0f}")
print(f"  s: level {info['s'].level}, scale {float(info['s'].scale):.0f}")

ir = lower_to_poly_ir(typed)
seg = ir.steps[0]
print(f"\nlowered: {len(seg.instrs)} polynomial instructions")
print("  opcode histogram:", dict(sorted(seg.opcode_counts().items())))

hoisted = hoist_rotations(seg)
print(f"\nafter hoisting ({len(hoisted)} group(s) share one decomposition):")
print(f"  {len(seg.instrs)} polynomial instructions")

merged = merge_mod_down(seg)
print(f"after mod-down merging ({merged} rewrites):")
print("  opcode histogram:", dict(sorted(seg.opcode_counts().items())))

limb = lower_to_limb_ir(seg, {})
hist = dict(sorted(limb.opcode_counts().items()))
print(f"\nlimb IR: {len(limb.instrs)} instructions over "
      f"{len({v.base_id for v in limb.values})} RNS bases")
print("  opcode histogram:", hist)
