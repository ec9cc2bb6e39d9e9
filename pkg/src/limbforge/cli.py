"""Command-line surface: keygen, check, compile, run, bench, stats."""

import argparse
import json
import os
import sys

import numpy as np

EX_OK = 0
EX_COMPILE = 2
EX_RUNTIME = 3
EX_USAGE = 64
EX_NOFILE = 66


def _params_from_arg(spec: str):
    from .params import gen_params

    kv = dict(part.split("=") for part in spec.split(","))
    seed = int(os.environ.get("LIMBFORGE_SEED", kv.get("seed", 0)))
    return gen_params(
        N=int(kv.get("N", 4096)),
        num_levels=int(kv.get("levels", 6)),
        d=int(kv.get("d", 3)),
        seed=seed,
    )


def cmd_keygen(args):
    from .keys import keygen, make_rotation_key
    from .serial import evalkey_to_bytes, secret_to_bytes
    from .bundle import params_to_dict

    params = _params_from_arg(args.params)
    seed = int(os.environ.get("LIMBFORGE_SEED", args.seed))
    sk, pk, rlk = keygen(params, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "params.json"), "w") as f:
        json.dump(params_to_dict(params), f, indent=1, sort_keys=True)
    with open(os.path.join(args.out, "secret.lfk"), "wb") as f:
        f.write(secret_to_bytes(sk, params))
    with open(os.path.join(args.out, "relin.lfk"), "wb") as f:
        f.write(evalkey_to_bytes(rlk, params))
    rng = np.random.default_rng(seed + 1)
    for r in _int_list(args.rotations):
        key = make_rotation_key(params, sk, r, rng)
        with open(os.path.join(args.out, f"rot{r}.lfk"), "wb") as f:
            f.write(evalkey_to_bytes(key, params))
    print(f"wrote keys for N={params.N}, {params.max_level + 1} limbs to {args.out}")
    return EX_OK


def _int_list(text):
    return [int(x) for x in text.split(",") if x] if text else []


def cmd_check(args):
    from .errors import LimbforgeError
    from .parser import parse_program
    from .typecheck import typecheck

    try:
        text = open(args.file).read()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOFILE
    params = _params_from_arg(args.params)
    try:
        typed = typecheck(parse_program(text), params)
    except LimbforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_COMPILE
    prog = typed.program
    print(f"ok: {len(prog.functions)} function(s), "
          f"{len(prog.plaintexts)} plaintext decl(s), entry {prog.entry!r}")
    return EX_OK


def _options_from_args(args):
    from .codegen import CompilerConfig
    from .pipeline import CompileOptions

    return CompileOptions(
        devices=args.devices,
        horizontal=not args.no_fusion,
        vertical=not (args.no_fusion or args.no_vertical),
        compression=not args.no_compression,
        comm_fusion=not args.no_comm_fusion,
        cfg=CompilerConfig(subdag_max=args.subdag_size),
    )


def cmd_compile(args):
    from .bundle import write_bundle
    from .errors import LimbforgeError
    from .pipeline import compile_source, stats_summary
    from .polyir import CallStep

    try:
        text = open(args.file).read()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOFILE
    params = _params_from_arg(args.params)
    try:
        compiled = compile_source(text, params, _options_from_args(args))
    except LimbforgeError as e:
        print(f"compile error: {e}", file=sys.stderr)
        return EX_COMPILE

    if args.dump_ir:
        _dump_ir(compiled, args.dump_ir)
    if args.dump_fusion:
        _dump_fusion(compiled)
    if args.dump_kernels:
        for fn in compiled.functions.values():
            for step in fn.steps:
                if isinstance(step, CallStep):
                    continue
                for plan in step.schedule.plans:
                    print(plan.summary())

    write_bundle(args.output, compiled, text)
    summary = stats_summary(compiled)
    print(f"wrote {args.output}: {summary['kernels']} kernels "
          f"({summary['limbInstrs']} limb instrs) across {summary['functions']} function(s)")
    return EX_OK


def _dump_ir(compiled, which):
    from .polyir import CallStep, lower_to_poly_ir
    from .limbir import lower_to_limb_ir
    from .polyir import hoist_rotations, merge_mod_down

    typed = compiled.typed
    for fname in compiled.functions:
        ir = lower_to_poly_ir(typed, fname)
        for step in ir.steps:
            if isinstance(step, CallStep):
                print(f"; {fname}: call {step.callee}")
                continue
            hoist_rotations(step)
            merge_mod_down(step)
            if which == "poly":
                print(f"; poly IR for {fname} ({len(step.instrs)} instrs)")
                for ins in step.instrs:
                    print(f"  %{ins.dsts} = {ins.opcode} {ins.srcs} {ins.meta or ''}")
            else:
                dag = lower_to_limb_ir(step, {})
                print(f"; limb IR for {fname} ({len(dag.instrs)} instrs)")
                for ins in dag.instrs:
                    print(f"  %{ins.dst} = {ins.opcode}[b{ins.base_id}] {ins.srcs}")


def _dump_fusion(compiled):
    from .fusion import fusion_dot
    from .polyir import CallStep

    for fname, fn in compiled.functions.items():
        for step in fn.steps:
            if isinstance(step, CallStep):
                continue
            fused = [p.source for p in step.schedule.plans]
            print(fusion_dot(fused, title=fname))


def cmd_run(args):
    from .bundle import load_bundle
    from .ckks import decrypt
    from .errors import LimbforgeError
    from .evaluate import KeyBundle
    from .runtime import Executor, link
    from .serial import ciphertext_from_bytes, ciphertext_to_bytes, evalkey_from_bytes, secret_from_bytes

    try:
        compiled, meta = load_bundle(args.plan)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOFILE
    except (ValueError, LimbforgeError) as e:
        print(f"plan error: {e}", file=sys.stderr)
        return EX_COMPILE
    params = compiled.params

    try:
        keys = KeyBundle()
        sk = None
        if args.keys:
            relin_path = os.path.join(args.keys, "relin.lfk")
            if os.path.exists(relin_path):
                keys.relin = evalkey_from_bytes(open(relin_path, "rb").read(), params)
            sk_path = os.path.join(args.keys, "secret.lfk")
            if os.path.exists(sk_path):
                sk = secret_from_bytes(open(sk_path, "rb").read(), params)
            for name in os.listdir(args.keys):
                if name.startswith("rot") and name.endswith(".lfk"):
                    key = evalkey_from_bytes(
                        open(os.path.join(args.keys, name), "rb").read(), params)
                    steps = int(name[3:-4])
                    keys.rotations[steps % params.n] = key

        inputs = {}
        for pair in args.input or []:
            name, path = pair.split("=", 1)
            inputs[name] = ciphertext_from_bytes(open(path, "rb").read(), params)

        weights = {}
        if args.weights:
            data = np.load(args.weights)
            weights = {k: data[k] for k in data.files}
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOFILE

    try:
        plan = link(compiled, device_budget=args.device_budget)
        ex = Executor(plan)
        out, stats = ex.execute(inputs, keys, plaintexts=weights, rebinds=weights,
                                devices=compiled.options.devices, seed=args.seed)
    except LimbforgeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EX_RUNTIME

    if args.output:
        with open(args.output, "wb") as f:
            f.write(ciphertext_to_bytes(out, params))
    report = {
        "kernels": stats.kernels_executed,
        "allocationCount": stats.allocation_count,
        "simTime": stats.sim_time,
        "transferBytes": stats.transfer_bytes,
        "prefetchOps": stats.prefetch_ops,
        "rebuilds": stats.rebuilds,
    }
    if stats.comm:
        report["comm"] = {"opCount": stats.comm.op_count,
                          "totalBytes": stats.comm.total_bytes,
                          "perDevice": stats.comm.per_device}
    if args.trace_comms and stats.timeline is not None:
        trace = {
            "commSpans": [[op_id, s, e] for op_id, s, e in stats.timeline.comm_spans],
            "computeSpans": [[d, s, e] for d, s, e in stats.timeline.compute_spans],
            "makespan": stats.timeline.makespan,
            "overlap": stats.timeline.overlap(),
            "stats": report.get("comm", {}),
        }
        with open(args.trace_comms, "w") as f:
            json.dump(trace, f, indent=1, sort_keys=True)
    if sk is not None:
        slots = decrypt(out, sk, params)
        report["decryptedHead"] = [float(v) for v in slots[:8]]
    print(json.dumps(report, indent=1, sort_keys=True))
    return EX_OK


def cmd_bench(args):
    from .bench import SUITE, run_benchmark
    from .pipeline import CompileOptions

    names = args.names or ["bsgs64"]
    devices = _int_list(args.devices) or [1]
    rows = []
    for name in names:
        if name not in SUITE:
            print(f"unknown benchmark {name!r}; have {sorted(SUITE)}", file=sys.stderr)
            return EX_USAGE
        bench = SUITE[name]()
        baseline = None
        for k in devices:
            for fusion in ([True] if args.fusion_only else [False, True]):
                opts = CompileOptions(
                    devices=k, horizontal=fusion, vertical=fusion,
                    compression=not args.no_compression,
                    comm_fusion=not args.no_comm_fusion)
                res = run_benchmark(bench, opts, seed=args.seed)
                st = res["stats"]
                row = {
                    "bench": name, "devices": k, "fusion": fusion,
                    "pass": res["pass"], "error": round(res["error"], 6),
                    "kernels": st.kernels_executed,
                    "simTime": st.sim_time,
                    "allocs": st.allocation_count,
                    "commOps": st.comm.total_ops if st.comm else 0,
                    "commBytes": st.comm.total_bytes if st.comm else 0,
                }
                if baseline is None:
                    baseline = res["output"]
                    row["bitEqualBaseline"] = True
                else:
                    row["bitEqualBaseline"] = bool(
                        np.array_equal(res["output"].b.limbs, baseline.b.limbs)
                        and np.array_equal(res["output"].a.limbs, baseline.a.limbs))
                rows.append(row)
    if args.json:
        print(json.dumps(rows, indent=1, sort_keys=True))
    else:
        cols = ["bench", "devices", "fusion", "pass", "bitEqualBaseline",
                "kernels", "commOps", "commBytes", "error"]
        print("  ".join(f"{c:>16}" for c in cols))
        for row in rows:
            print("  ".join(f"{str(row[c]):>16}" for c in cols))
    ok = all(r["pass"] and r["bitEqualBaseline"] for r in rows)
    return EX_OK if ok else EX_RUNTIME


def cmd_stats(args):
    from .bundle import read_sections

    try:
        sections = read_sections(args.plan)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOFILE
    print(sections["stats"].decode())
    return EX_OK


def build_parser():
    p = argparse.ArgumentParser(prog="limbforge",
                                description="CKKS circuit compiler and runtime")
    sub = p.add_subparsers(dest="cmd", required=True)

    kg = sub.add_parser("keygen", help="generate keys for a parameter set")
    kg.add_argument("--params", default="N=4096,levels=6,d=3")
    kg.add_argument("--seed", type=int, default=0)
    kg.add_argument("--rotations", default="")
    kg.add_argument("--out", default="keys")
    kg.set_defaults(fn=cmd_keygen)

    ck = sub.add_parser("check", help="parse and typecheck a circuit file")
    ck.add_argument("file")
    ck.add_argument("--params", default="N=4096,levels=6,d=3")
    ck.set_defaults(fn=cmd_check)

    cp = sub.add_parser("compile", help="compile a circuit to a plan bundle")
    cp.add_argument("file")
    cp.add_argument("-o", "--output", default="plan.lfp")
    cp.add_argument("--params", default="N=4096,levels=6,d=3")
    cp.add_argument("--devices", type=int, default=1)
    cp.add_argument("--no-fusion", action="store_true")
    cp.add_argument("--no-vertical", action="store_true")
    cp.add_argument("--no-compression", action="store_true")
    cp.add_argument("--no-comm-fusion", action="store_true")
    cp.add_argument("--subdag-size", type=int, default=4096)
    cp.add_argument("--dump-ir", choices=["poly", "limb"])
    cp.add_argument("--dump-fusion", action="store_true")
    cp.add_argument("--dump-kernels", action="store_true")
    cp.set_defaults(fn=cmd_compile)

    rn = sub.add_parser("run", help="execute a compiled plan bundle")
    rn.add_argument("plan")
    rn.add_argument("--input", action="append", metavar="NAME=FILE")
    rn.add_argument("--keys", help="directory from `limbforge keygen`")
    rn.add_argument("--weights", help=".npz of named plaintext vectors")
    rn.add_argument("--output", help="write the result ciphertext here")
    rn.add_argument("--device-budget", type=int, default=None)
    rn.add_argument("--seed", type=int, default=0)
    rn.add_argument("--trace-comms", metavar="OUT.json",
                    help="write the comm/compute timeline and stats here")
    rn.set_defaults(fn=cmd_run)

    bn = sub.add_parser("bench", help="run the benchmark suite")
    bn.add_argument("names", nargs="*")
    bn.add_argument("--devices", default="1")
    bn.add_argument("--json", action="store_true")
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--fusion-only", action="store_true")
    bn.add_argument("--no-compression", action="store_true")
    bn.add_argument("--no-comm-fusion", action="store_true")
    bn.set_defaults(fn=cmd_bench)

    st = sub.add_parser("stats", help="print a bundle's structural statistics")
    st.add_argument("plan")
    st.set_defaults(fn=cmd_stats)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EX_USAGE if e.code not in (0, None) else EX_OK
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
