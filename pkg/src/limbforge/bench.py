"""Benchmark suite: desk-scale programs with built-in plaintext oracles.

Each benchmark carries circuit text, deterministic inputs and weights, the
evaluation keys it needs, and a plaintext reference; run_benchmark drives
the full pipeline under a chosen configuration and scores the decrypted
result against the oracle.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .bsgs import default_plan, emit_bsgs_matvec, matvec_oracle, pack_matrix_diagonals, pack_vector
from .circuit import print_program
from .ckks import decrypt, encrypt
from .encoding import encode
from .evaluate import KeyBundle
from .keys import keygen, make_rotation_key
from .params import CkksParams, gen_params
from .parser import parse_program
from .pipeline import CompileOptions, compile_source
from .runtime import Executor, link


@dataclass
class Benchmark:
    name: str
    text: str
    params: CkksParams
    input_vectors: dict            # param name -> slot vector
    plaintexts: dict               # name -> slot vector (weights included)
    rebinds: object                # per-layer weight dicts or a single dict
    oracle: np.ndarray             # expected decrypted slots
    tolerance: float
    rotations: set = field(default_factory=set)
    needs_relin: bool = False
    layers: int = 1

    def make_keys(self, seed=2024):
        sk, pk, rlk = keygen(self.params, seed=seed)
        rng = np.random.default_rng(seed + 1)
        rots = {}
        for r in sorted(self.rotations):
            r = r % self.params.n
            if r:
                rots[r] = make_rotation_key(self.params, sk, r, rng)
        return sk, pk, KeyBundle(public=pk, relin=rlk, rotations=rots)

    def encrypt_inputs(self, pk, seed=77):
        rng = np.random.default_rng(seed)
        return {name: encrypt(encode(vec, self.params), pk, self.params, rng)
                for name, vec in self.input_vectors.items()}


def bsgs64(params: CkksParams | None = None, dim: int = 64, seed=5) -> Benchmark:
    """Ciphertext-plaintext matrix-vector product over packed diagonals."""
    params = params or gen_params(4096, 6, d=3, seed=0)
    plan = default_plan(dim)
    prog = emit_bsgs_matvec(dim, plan, params, name="main", prefix="w")
    rng = np.random.default_rng(seed)
    mat = rng.uniform(-1, 1, (dim, dim)) / dim
    x = rng.uniform(-1, 1, dim)
    diags = pack_matrix_diagonals(mat, plan, params.n, "w")
    return Benchmark(
        name="bsgs64",
        text=print_program(prog),
        params=params,
        input_vectors={"x": pack_vector(x, params.n)},
        plaintexts=diags,
        rebinds=diags,
        oracle=matvec_oracle(mat, x, params.n),
        tolerance=0.08,
        rotations=set(prog.evalkeys.rotations),
    )


class CircuitBuilder:
    """Emits circuit text while tracking exact (level, scale) metadata.

    The alignment helper multiplies by a constant-one plaintext at the
    exactly computed scale and rescales, so any value can be brought to a
    chosen (level, scale) and additions always see identical rationals.
    """

    def __init__(self, params, in_level=None, in_scale=None):
        self.params = params
        self.lines = []
        self.decls = {}
        self.meta = {}
        self._n = 0
        self.in_level = params.max_level if in_level is None else in_level
        self.in_scale = Fraction(params.scale if in_scale is None else in_scale)
        self.meta["x"] = (self.in_level, self.in_scale)

    def fresh(self):
        self._n += 1
        return f"v{self._n}"

    def _pt(self, vec, scale):
        name = f"c{len(self.decls)}"
        self.decls[name] = (np.asarray(vec, dtype=float), Fraction(scale))
        return name

    def mul(self, a, b):
        (la, sa), (lb, sb) = self.meta[a], self.meta[b]
        assert la == lb, (la, lb)
        r = self.fresh()
        self.lines.append(f"  {r} = mul {a} {b}")
        self.meta[r] = (la, sa * sb)
        return r

    def rescale(self, a):
        la, sa = self.meta[a]
        r = self.fresh()
        self.lines.append(f"  {r} = rescale {a}")
        self.meta[r] = (la - 1, sa / self.params.rns_basis[la])
        return r

    def add(self, a, b):
        assert self.meta[a] == self.meta[b], (self.meta[a], self.meta[b])
        r = self.fresh()
        self.lines.append(f"  {r} = add {a} {b}")
        self.meta[r] = self.meta[a]
        return r

    def mulplain(self, a, vec, pt_scale):
        la, sa = self.meta[a]
        name = self._pt(vec, pt_scale)
        r = self.fresh()
        self.lines.append(f"  {r} = mulplain {a} {name}")
        self.meta[r] = (la, sa * Fraction(pt_scale))
        return r

    def addplain(self, a, vec):
        la, sa = self.meta[a]
        name = self._pt(vec, sa)
        r = self.fresh()
        self.lines.append(f"  {r} = add {a} {name}")
        self.meta[r] = (la, sa)
        return r

    def scale_term(self, a, factor_vec):
        """Multiply by plaintext values and land exactly at (level-1, D)."""
        la, sa = self.meta[a]
        q = self.params.rns_basis[la]
        pt_scale = Fraction(self.params.scale) * q / sa
        return self.rescale(self.mulplain(a, factor_vec, pt_scale))

    def down_level(self, a, level):
        """Burn levels with scaled one-multiplications; scale lands near D."""
        ones = np.ones(self.params.n)
        la, sa = self.meta[a]
        assert la >= level
        while la > level:
            q = self.params.rns_basis[la]
            a = self.rescale(self.mulplain(a, ones, Fraction(self.params.scale) * q / sa))
            la, sa = self.meta[a]
        return a

    def down_to(self, a, level, scale=None):
        """Align a to exactly (level, scale); needs at least one level drop
        unless the scale already matches."""
        scale = Fraction(self.params.scale if scale is None else scale)
        la, sa = self.meta[a]
        if (la, sa) == (level, scale):
            return a
        assert la > level, "cannot fix a scale without a level to spend"
        ones = np.ones(self.params.n)
        while la > level:
            q = self.params.rns_basis[la]
            target = scale if la - 1 == level else Fraction(self.params.scale)
            a = self.rescale(self.mulplain(a, ones, target * q / sa))
            la, sa = self.meta[a]
        assert (la, sa) == (level, scale), (la, sa, level, scale)
        return a

    def align_pair(self, a, b):
        lo = min(self.meta[a][0], self.meta[b][0])
        return self.down_level(a, lo), self.down_level(b, lo)

    def program_text(self, ret, extra=()):
        header = list(extra)
        for name, (_vec, scale) in self.decls.items():
            s = str(scale.numerator) if scale.denominator == 1 else \
                f"{scale.numerator}/{scale.denominator}"
            header.append(f"pt {name} len={self.params.n} scale={s}")
        s_in = str(self.in_scale.numerator) if self.in_scale.denominator == 1 \
            else f"{self.in_scale.numerator}/{self.in_scale.denominator}"
        body = [f"fn main(ct x level={self.in_level} scale={s_in}) {{"]
        body += self.lines
        body.append(f"  return {ret}")
        body.append("}")
        return "\n".join(header + body)

    def plaintext_vectors(self):
        return {name: vec for name, (vec, _s) in self.decls.items()}


class PowerChain:
    """x^p by halving recursion; scales stay exact Fractions, levels align."""

    def __init__(self, builder: CircuitBuilder, x="x"):
        self.b = builder
        self.memo = {1: x}

    def get(self, p):
        if p not in self.memo:
            b = self.b
            u, v = self.get((p + 1) // 2), self.get(p // 2)
            u, v = b.align_pair(u, v)
            self.memo[p] = b.rescale(b.mul(u, v))
        return self.memo[p]


def gelu_coefficients(degree: int) -> np.ndarray:
    """Least-squares polynomial fit of GELU on [-1, 1] (fixed, deterministic)."""
    xs = np.linspace(-1, 1, 512)
    gelu = 0.5 * xs * (1 + np.tanh(np.sqrt(2 / np.pi) * (xs + 0.044715 * xs ** 3)))
    return np.polynomial.polynomial.polyfit(xs, gelu, degree)


def _emit_poly(b: CircuitBuilder, chain: PowerChain, coeffs, n) -> str:
    degree = len(coeffs) - 1
    used = [p for p in range(1, degree + 1) if abs(coeffs[p]) > 1e-12]
    lowest = min(b.meta[chain.get(p)][0] for p in used)
    acc = None
    for p in used:
        v = b.down_level(chain.get(p), lowest)
        term = b.scale_term(v, np.full(n, float(coeffs[p])))
        acc = term if acc is None else b.add(acc, term)
    return b.addplain(acc, np.full(n, float(coeffs[0])))


def polyeval(params: CkksParams | None = None, degree: int = 15, seed=9) -> Benchmark:
    """Elementwise polynomial evaluation shaped like a GELU approximation."""
    params = params or gen_params(4096, 8, d=3, seed=0)
    coeffs = gelu_coefficients(degree)
    b = CircuitBuilder(params)
    chain = PowerChain(b)
    out = _emit_poly(b, chain, coeffs, params.n)
    text = b.program_text(out, extra=("evk relin",))

    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, params.n)
    return Benchmark(
        name="polyeval",
        text=text,
        params=params,
        input_vectors={"x": x},
        plaintexts=b.plaintext_vectors(),
        rebinds=b.plaintext_vectors(),
        oracle=np.polynomial.polynomial.polyval(x, coeffs),
        tolerance=0.1,
        needs_relin=True,
    )


def tinylayer(params: CkksParams | None = None, seed=13) -> Benchmark:
    """Matvec, degree-7 pointwise polynomial, matvec: a transformer-ish block."""
    params = params or gen_params(4096, 10, d=3, seed=0)
    dim = 64
    plan = default_plan(dim)
    rng = np.random.default_rng(seed)
    m1 = rng.uniform(-1, 1, (dim, dim)) / dim
    m2 = rng.uniform(-1, 1, (dim, dim)) / dim
    coeffs = gelu_coefficients(7)
    x = rng.uniform(-1, 1, dim)
    D = params.scale
    L = params.max_level

    b = CircuitBuilder(params)
    b.lines.append("  y1 = call mv1 x")
    b.meta["y1"] = (L, Fraction(D) * D)
    y = b.rescale("y1")

    chain = PowerChain(b, x=y)
    poly_out = _emit_poly(b, chain, coeffs, params.n)
    mv2_level = b.meta[poly_out][0] - 1
    z = b.down_to(poly_out, mv2_level, D)
    b.lines.append(f"  z2 = call mv2 {z}")
    b.meta["z2"] = (mv2_level, Fraction(D) * D)

    mv1 = emit_bsgs_matvec(dim, plan, params, name="mv1", prefix="w1",
                           level=L, scale=D)
    mv2 = emit_bsgs_matvec(dim, plan, params, name="mv2", prefix="w2",
                           level=mv2_level, scale=D)
    text = _merge_programs([b.program_text("z2", extra=("evk relin",)),
                            print_program(mv1), print_program(mv2)])

    y_plain = (m1 @ x)
    g = np.polynomial.polynomial.polyval(y_plain, coeffs)
    oracle = matvec_oracle(m2, g, params.n)

    pts = b.plaintext_vectors()
    pts.update(pack_matrix_diagonals(m1, plan, params.n, "w1"))
    pts.update(pack_matrix_diagonals(m2, plan, params.n, "w2"))
    return Benchmark(
        name="tinylayer",
        text=text,
        params=params,
        input_vectors={"x": pack_vector(x, params.n)},
        plaintexts=pts,
        rebinds=pts,
        oracle=oracle,
        tolerance=0.3,
        rotations=set(mv1.evalkeys.rotations) | set(mv2.evalkeys.rotations),
        needs_relin=True,
    )


def _merge_programs(texts):
    """Concatenate fragments so cross-fragment calls resolve, then normalize."""
    return print_program(parse_program("\n".join(texts)))


def tinylayer4(params: CkksParams | None = None, seed=21, n_layers: int = 4,
               weights_per_layer: int = 8) -> Benchmark:
    """Level-preserving layers sharing one compiled function.

    Each layer adds a set of weight masks and rotates by one slot, so every
    call references the same sub-plan with a different weight-pool binding:
    the shape the prefetch planner and plan-reuse tests exercise.
    """
    params = params or gen_params(4096, 6, d=3, seed=0)
    rng = np.random.default_rng(seed)
    lines = ["evk rot 1"]
    for i in range(weights_per_layer):
        lines.append(f"pt m{i} len={params.n} cat=Weight")
    lines.append("fn layer(ct v) {")
    cur = "v"
    for i in range(weights_per_layer):
        lines.append(f"  t{i} = add {cur} m{i}")
        cur = f"t{i}"
    lines.append(f"  r = rotate {cur} 1")
    lines.append("  return r")
    lines.append("}")
    lines.append("fn main(ct x) {")
    cur = "x"
    for l in range(n_layers):
        lines.append(f"  y{l} = call layer {cur}")
        cur = f"y{l}"
    lines.append(f"  return {cur}")
    lines.append("}")

    x = rng.uniform(-1, 1, params.n)
    layer_weights = []
    expected = x.copy()
    for l in range(n_layers):
        w = {f"m{i}": rng.uniform(-1, 1, params.n) for i in range(weights_per_layer)}
        layer_weights.append(w)
        for i in range(weights_per_layer):
            expected = expected + w[f"m{i}"]
        expected = np.roll(expected, -1)

    return Benchmark(
        name="tinylayer4",
        text="\n".join(lines),
        params=params,
        input_vectors={"x": x},
        plaintexts=layer_weights[0],
        rebinds=layer_weights,
        oracle=expected,
        tolerance=0.15,
        rotations={1},
        layers=n_layers,
    )


SUITE = {
    "bsgs64": bsgs64,
    "polyeval": polyeval,
    "tinylayer": tinylayer,
    "tinylayer4": tinylayer4,
}


def run_benchmark(bench: Benchmark, options: CompileOptions | None = None,
                  device_budget=None, memory_mode="pooled",
                  transfer_mode="prefetch", seed=0, keys_seed=2024):
    """Compile, link, execute, and score one benchmark configuration."""
    options = options or CompileOptions()
    sk, pk, keys = bench.make_keys(keys_seed)
    inputs = bench.encrypt_inputs(pk)
    compiled = compile_source(bench.text, bench.params, options)
    plan = link(compiled, device_budget=device_budget)
    ex = Executor(plan)
    out, stats = ex.execute(inputs, keys, plaintexts=bench.plaintexts,
                            rebinds=bench.rebinds, devices=options.devices,
                            memory_mode=memory_mode,
                            transfer_mode=transfer_mode, seed=seed)
    got = decrypt(out, sk, bench.params)
    err = float(np.abs(got - bench.oracle).max())
    return {
        "bench": bench.name,
        "output": out,
        "decrypted": got,
        "error": err,
        "pass": err < bench.tolerance,
        "stats": stats,
        "plan": plan,
        "executor": ex,
        "compiled": compiled,
    }
