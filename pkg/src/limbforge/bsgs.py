"""Baby-step giant-step ciphertext-plaintext matrix-vector products.

Emits the rotation-minimizing circuit over packed diagonals: the inner loop
rotates the input by the baby steps (all sharing one hoistable
decomposition), multiplies by pre-rotated diagonal plaintexts, and the
outer loop rotates partial sums by whole giant steps.

The input vector is expected packed with the length-m vector replicated
n/m times across the slots; outputs come back in the same layout, and all
diagonal plaintexts are m-periodic, so they compress with stride m.
"""

from dataclasses import dataclass

import numpy as np

from .circuit import CircuitOp, CircuitProgram, EvalKeyReqs, FunctionDef, Param, PlaintextDecl
from .errors import PlanTooSmall
from .params import CkksParams


@dataclass(frozen=True)
class BsgsPlan:
    dim: int        # square matrix side m
    baby: int
    giant: int

    def __post_init__(self):
        if self.baby * self.giant < self.dim:
            raise PlanTooSmall(
                f"{self.baby}x{self.giant} steps cover fewer than {self.dim} diagonals")


def default_plan(dim: int) -> BsgsPlan:
    baby = 1
    while baby * baby < dim:
        baby *= 2
    return BsgsPlan(dim=dim, baby=baby, giant=(dim + baby - 1) // baby)


def diag_name(prefix: str, delta: int) -> str:
    return f"{prefix}_d{delta}"


def emit_bsgs_matvec(
    dim: int,
    plan: BsgsPlan,
    params: CkksParams,
    name: str = "matvec",
    prefix: str | None = None,
    level: int | None = None,
    scale=None,
) -> CircuitProgram:
    """Standalone single-function program computing the m x m matvec."""
    if dim > params.n:
        raise PlanTooSmall(f"matrix side {dim} exceeds {params.n} slots")
    if dim < 1 or dim & (dim - 1):
        raise ValueError("matrix side must be a power of two")
    if plan.dim != dim:
        raise PlanTooSmall(f"plan was built for dim {plan.dim}, not {dim}")
    prefix = prefix or name

    decls = {}
    stride = dim if dim < params.n else None
    for delta in range(dim):
        nm = diag_name(prefix, delta)
        decls[nm] = PlaintextDecl(nm, length=params.n, stride=stride, category="Weight")

    rotations = set(range(1, min(plan.baby, dim)))
    body = []
    fresh = iter(f"v{i}" for i in range(10 * dim + 16))

    baby_vals = {0: "x"}
    for b in range(1, plan.baby):
        if b >= dim:
            break
        r = next(fresh)
        body.append(CircuitOp(r, "rotate", ("x",), rho=b))
        baby_vals[b] = r

    giant_terms = []
    for g in range(plan.giant):
        acc = None
        for b in range(plan.baby):
            delta = g * plan.baby + b
            if delta >= dim:
                break
            t = next(fresh)
            body.append(CircuitOp(t, "mulplain", (baby_vals[b], diag_name(prefix, delta))))
            if acc is None:
                acc = t
            else:
                s = next(fresh)
                body.append(CircuitOp(s, "add", (acc, t)))
                acc = s
        if acc is None:
            continue
        shift = (g * plan.baby) % params.n
        if shift:
            rotations.add(shift)
            r = next(fresh)
            body.append(CircuitOp(r, "rotate", (acc,), rho=shift))
            acc = r
        giant_terms.append(acc)

    out = giant_terms[0]
    for term in giant_terms[1:]:
        s = next(fresh)
        body.append(CircuitOp(s, "add", (out, term)))
        out = s

    fn = FunctionDef(
        name=name,
        params=[Param("x", level=level, scale=scale)],
        body=body,
        returns=out,
    )
    return CircuitProgram(
        functions={name: fn},
        entry=name,
        plaintexts=decls,
        evalkeys=EvalKeyReqs(relin=False, rotations=rotations),
    )


def pack_matrix_diagonals(matrix: np.ndarray, plan: BsgsPlan, n: int, prefix: str) -> dict:
    """Pre-rotated diagonal vectors keyed by plaintext name.

    Diagonal delta holds M[i mod m, (i+delta) mod m]; the giant-step trick
    stores it rotated right by g*baby so the outer rotation realigns it.
    """
    m = matrix.shape[0]
    assert matrix.shape == (m, m) and n % m == 0
    out = {}
    rows = np.arange(n) % m
    for delta in range(m):
        diag = matrix[rows, (rows + delta) % m]
        g = delta // plan.baby
        out[diag_name(prefix, delta)] = np.roll(diag, g * plan.baby)
    return out


def pack_vector(x: np.ndarray, n: int) -> np.ndarray:
    """Replicate the length-m input across all n slots."""
    m = len(x)
    assert n % m == 0
    return np.tile(x, n // m)


def matvec_oracle(matrix: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """Plaintext reference: the replicated-layout product."""
    return pack_vector(matrix @ x, n)
