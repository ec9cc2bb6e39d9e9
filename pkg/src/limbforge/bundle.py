"""Sectioned single-file container for compiled plans.

Layout: magic, section table (name, offset, length, crc32), then raw
section bytes. The program section carries everything needed to rebuild
the plan deterministically (source, parameters, options); the artifact
sections (kernels, schedule, allocation, comm, transfer) carry canonical
JSON dumps of the compiled structures, and their checksums are re-verified
against a fresh rebuild on load, so a corrupted or stale bundle is
rejected before anything runs.
"""

import json
import struct
import zlib
from fractions import Fraction

from .params import CkksParams, KeySwitchConfig
from .pipeline import CompileOptions, CompiledProgram, compile_source, stats_summary
from .polyir import CallStep

MAGIC = b"LFPL"
_HEAD = struct.Struct("<4sHH")


def _json_default(o):
    if isinstance(o, Fraction):
        return {"__frac__": [o.numerator, o.denominator]}
    if hasattr(o, "item"):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"unserializable {type(o)}")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, default=_json_default).encode()


def params_to_dict(p: CkksParams) -> dict:
    return {
        "N": p.N, "rns_basis": list(p.rns_basis),
        "special_basis": list(p.special_basis),
        "scale": [p.scale.numerator, p.scale.denominator],
        "hamming_weight": p.hamming_weight, "d": p.ks.d,
        "seed": p.seed, "sigma": p.sigma,
    }


def params_from_dict(d: dict) -> CkksParams:
    return CkksParams(
        N=d["N"], rns_basis=tuple(d["rns_basis"]),
        special_basis=tuple(d["special_basis"]),
        scale=Fraction(*d["scale"]), hamming_weight=d["hamming_weight"],
        ks=KeySwitchConfig(d=d["d"]), seed=d["seed"], sigma=d["sigma"],
    )


def options_to_dict(o: CompileOptions) -> dict:
    return {
        "devices": o.devices, "horizontal": o.horizontal, "vertical": o.vertical,
        "compression": o.compression, "hoist": o.hoist,
        "merge_moddown": o.merge_moddown, "comm_fusion": o.comm_fusion,
        "comm_schedule": o.comm_schedule, "ks_pattern": o.ks_pattern,
        "subdag_max": o.cfg.subdag_max, "reg_threshold": o.cfg.reg_threshold,
        "operand_threshold": o.cfg.operand_threshold,
        "lazy_budget": o.cfg.lazy_budget,
    }


def options_from_dict(d: dict) -> CompileOptions:
    from .codegen import CompilerConfig

    return CompileOptions(
        devices=d["devices"], horizontal=d["horizontal"], vertical=d["vertical"],
        compression=d["compression"], hoist=d["hoist"],
        merge_moddown=d["merge_moddown"], comm_fusion=d["comm_fusion"],
        comm_schedule=d["comm_schedule"], ks_pattern=d["ks_pattern"],
        cfg=CompilerConfig(subdag_max=d["subdag_max"],
                           reg_threshold=d["reg_threshold"],
                           operand_threshold=d["operand_threshold"],
                           lazy_budget=d["lazy_budget"]),
    )


def _kernel_dump(plan):
    return {
        "id": plan.kernel_id, "opclass": plan.opclass,
        "operands": list(plan.operand_table), "writes": list(plan.writes),
        "est_regs": plan.est_regs, "est_operands": plan.est_operands,
        "lanes": [{
            "base": lane.base_id,
            "ops": [[op.opcode, op.dst_reg, list(map(list, op.srcs)),
                     op.store_slot, op.reduce_after] for op in lane.ops],
        } for lane in plan.lanes],
    }


def _sections_for(compiled: CompiledProgram, source: str):
    kernels, schedule, allocation, comm, transfer = [], [], [], [], []
    for fname, fn in sorted(compiled.functions.items()):
        for si, step in enumerate(fn.steps):
            if isinstance(step, CallStep):
                schedule.append({"fn": fname, "step": si, "call": step.callee})
                continue
            kernels.extend(_kernel_dump(p) for p in step.schedule.plans)
            schedule.append({"fn": fname, "step": si,
                             "kernels": [p.kernel_id for p in step.schedule.plans]})
            allocation.append({
                "fn": fname, "step": si,
                "pools": step.alloc.pool_sizes,
                "buffers": {str(k): list(v) for k, v in step.alloc.buffers.items()},
                "in_place": sorted(step.alloc.in_place),
            })
            if step.distributed is not None:
                st = step.distributed.stats()
                comm.append({"fn": fname, "step": si,
                             "ops": st.op_count, "bytes": st.total_bytes})
    return {
        "program": _dumps({
            "source": source,
            "params": params_to_dict(compiled.params),
            "options": options_to_dict(compiled.options),
        }),
        "kernels": _dumps(kernels),
        "schedule": _dumps(schedule),
        "allocation": _dumps(allocation),
        "comm": _dumps(comm),
        "transfer": _dumps(_transfer_dump(compiled)),
        "stats": _dumps(_stats_dump(compiled)),
    }


def _transfer_dump(compiled):
    from .runtime import link

    plan = link(compiled)
    if plan.transfer is None:
        return {"layers": 0, "streamed": False, "prefetchOps": 0,
                "residentTrace": []}
    t = plan.transfer
    return {
        "layers": len(plan.layers),
        "streamed": t.streamed,
        "prefetchOps": len(t.prefetch_ops),
        "residentTrace": list(t.resident_trace),
        "pinned": t.pinned,
    }


def _stats_dump(compiled):
    out = stats_summary(compiled)
    out.update({k: v for k, v in _transfer_dump(compiled).items()
                if k in ("prefetchOps", "residentTrace")})
    return out


def write_bundle(path, compiled: CompiledProgram, source: str):
    sections = _sections_for(compiled, source)
    names = sorted(sections)
    table = []
    blob = b""
    offset = 0
    for name in names:
        data = sections[name]
        table.append((name, offset, len(data), zlib.crc32(data)))
        blob += data
        offset += len(data)
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, 1, len(names)))
        for name, off, ln, crc in table:
            nb = name.encode()
            f.write(struct.pack("<B", len(nb)))
            f.write(nb)
            f.write(struct.pack("<QQI", off, ln, crc))
        f.write(blob)


def read_sections(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError("not a limbforge plan bundle")
    off = _HEAD.size
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", data, off)
        off += 1
        name = data[off:off + nlen].decode()
        off += nlen
        o, ln, crc = struct.unpack_from("<QQI", data, off)
        off += struct.calcsize("<QQI")
        table.append((name, o, ln, crc))
    base = off
    out = {}
    for name, o, ln, crc in table:
        chunk = data[base + o : base + o + ln]
        if zlib.crc32(chunk) != crc:
            raise ValueError(f"section {name!r} failed its checksum")
        out[name] = chunk
    return out


def load_bundle(path):
    """Rebuild the compiled program and verify it matches the stored sections."""
    sections = read_sections(path)
    meta = json.loads(sections["program"])
    params = params_from_dict(meta["params"])
    options = options_from_dict(meta["options"])
    compiled = compile_source(meta["source"], params, options)
    rebuilt = _sections_for(compiled, meta["source"])
    for name in ("kernels", "schedule", "allocation"):
        if zlib.crc32(rebuilt[name]) != zlib.crc32(sections[name]):
            raise ValueError(
                f"bundle section {name!r} does not match its rebuild; "
                "the bundle is stale or corrupted")
    return compiled, meta
