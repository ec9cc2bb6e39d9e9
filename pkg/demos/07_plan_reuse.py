"""One execution plan, many bindings: the reusable-graph story.

The four-layer benchmark calls one compiled layer function four times;
linking inlines the call sites as references to a single sub-plan. Swapping
evalkeys or per-layer weights between runs updates pool handles only: the
rebuild counter stays at zero and every run decrypts correctly under its
own keys.
"""

import numpy as np

from limbforge.bench import tinylayer4
from limbforge.ckks import decrypt
from limbforge.params import gen_params
from limbforge.pipeline import compile_source
from limbforge.runtime import Executor, link

params = gen_params(N=4096, num_levels=6, d=3, seed=0)
bench = tinylayer4(params)

compiled = compile_source(bench.text, params)
print("sub-plan builds:", compiled.build_count)
plan = link(compiled)
print("sub-plan references:", plan.sub_plan_refs)
print("weight-bearing layers:", len(plan.layers))

ex = Executor(plan)
for kseed in (111, 222):
    sk, pk, keys = bench.make_keys(kseed)
    inputs = bench.encrypt_inputs(pk)
    for wseed in (1, 2):
        rng = np.random.default_rng(wseed)
        layers, expected = [], bench.input_vectors["x"].copy()
        for _ in range(bench.layers):
            w = {f"m{i}": rng.uniform(-1, 1, params.n) for i in range(8)}
            layers.append(w)
            for i in range(8):
                expected = expected + w[f"m{i}"]
            expected = np.roll(expected, -1)
        out, stats = ex.execute(inputs, keys, plaintexts=layers[0], rebinds=layers)
        err = np.abs(decrypt(out, sk, params) - expected).max()
        print(f"keys #{kseed} / weights #{wseed}: error {err:.4f}, "
              f"rebuilds {stats.rebuilds}, allocations {stats.allocation_count}")
