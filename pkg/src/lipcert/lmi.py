"""Block LMI assembly over the stacked vector x = [x_0; x_1; ...; x_l] and a
small SDP layer on top of an interior-point conic solver.

Matrix-valued expressions are affine in scalar decision variables and kept
sparse throughout: each neuron's multiplier touches only one row of W_k and
one coordinate of x_{k+1}.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .deltaqc import SlopeBounds
from .network import Network

log = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, NUMERICAL_FAILURE = "optimal", "infeasible", "numerical-failure"


@dataclass
class SolverConfig:
    backend: str = "cvxopt"
    abstol: float = 1e-8
    reltol: float = 1e-8
    feastol: float = 1e-8
    max_iters: int = 200
    # acceptance threshold on the max eigenvalue of every solved LMI
    residual_tol: float = 1e-7
    # strictness: LMIs are imposed as expr <= -margin * I
    margin: float = 1e-9
    # solutions with larger entries are numerically meaningless in double precision
    max_value: float = 1e10
    # restrict the LMI to the subspace where fixed ReLU neurons are linear
    eliminate_fixed: bool = True
    # rescale the output layer to O(1) gain before solving
    normalize_output: bool = True

    def __post_init__(self):
        for name in ("abstol", "reltol", "feastol", "residual_tol", "max_value"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


# ---------------------------------------------------------------- expressions

class AffineMatrix:
    """Symmetric matrix  const + sum_j v_j * coeffs[j]  with sparse terms."""

    def __init__(self, size: int, const=None, coeffs: Optional[Dict[int, sp.spmatrix]] = None):
        self.size = size
        self.const = sp.csr_matrix((size, size)) if const is None else sp.csr_matrix(const)
        self.coeffs = {} if coeffs is None else {j: sp.csr_matrix(A) for j, A in coeffs.items()}

    @classmethod
    def variable(cls, size: int, var: int, A) -> "AffineMatrix":
        return cls(size, None, {var: A})

    def copy(self) -> "AffineMatrix":
        return AffineMatrix(self.size, self.const.copy(), {j: A.copy() for j, A in self.coeffs.items()})

    def __add__(self, other):
        if isinstance(other, AffineMatrix):
            if other.size != self.size:
                raise ValueError("size mismatch")
            out = self.copy()
            out.const = out.const + other.const
            for j, A in other.coeffs.items():
                out.coeffs[j] = out.coeffs[j] + A if j in out.coeffs else A.copy()
            return out
        out = self.copy()
        out.const = out.const + sp.csr_matrix(other)
        return out

    def __mul__(self, c: float):
        return AffineMatrix(self.size, self.const * c, {j: A * c for j, A in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def congruence(self, T) -> "AffineMatrix":
        """T^T X T for a (size x N) matrix T."""
        T = sp.csr_matrix(T)
        if T.shape[0] != self.size:
            raise ValueError(f"congruence needs {self.size} rows, got {T.shape[0]}")
        Tt = T.T.tocsr()
        return AffineMatrix(T.shape[1], Tt @ self.const @ T, {j: Tt @ A @ T for j, A in self.coeffs.items()})

    @property
    def variables(self) -> List[int]:
        return sorted(self.coeffs)

    def evaluate(self, values) -> np.ndarray:
        """Dense matrix at variable values (indexable by variable id)."""
        out = self.const.toarray()
        for j, A in self.coeffs.items():
            out += values[j] * A.toarray()
        return out

    def max_eig(self, values) -> float:
        M = self.evaluate(values)
        return float(np.linalg.eigvalsh((M + M.T) / 2)[-1])


# ---------------------------------------------------------------- selectors

@dataclass(frozen=True)
class SelectorLayout:
    """Offsets of x_0 .. x_l inside the stacked vector."""

    sizes: tuple
    offsets: tuple = field(init=False)

    def __post_init__(self):
        off = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)
        object.__setattr__(self, "offsets", tuple(int(o) for o in off))

    @classmethod
    def for_network(cls, net: Network) -> "SelectorLayout":
        return cls(tuple(net.dims[:-1]))

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    def slice(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k] + self.sizes[k])

    def selector(self, k: int) -> sp.csr_matrix:
        """E_k with x_k = E_k x."""
        n = self.sizes[k]
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.offsets[k] + np.arange(n))), shape=(n, self.total))

    def stack(self, parts: Sequence) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=-1)


@dataclass
class QcFamily:
    """Multiplier family of activation layer k, tied to decision variables."""

    layer: int
    bounds: SlopeBounds
    var_ids: tuple


def neuron_term_matrices(net: Network, layout: SelectorLayout, k: int, bounds: SlopeBounds) -> List[sp.csr_matrix]:
    """[W_k E_k; E_{k+1}]^T Q_i [W_k E_k; E_{k+1}] for each neuron i of layer k
    with unit multiplier."""
    W = net.layers[k].W
    N = layout.total
    in_off = layout.offsets[k]
    out_off = layout.offsets[k + 1]
    n_in = W.shape[1]
    cols = in_off + np.arange(n_in)
    out = []
    for i in range(W.shape[0]):
        a, b = bounds.alpha[i], bounds.beta[i]
        w = W[i]
        e = out_off + i
        rows = [np.repeat(cols, n_in), cols, np.full(n_in, e), [e]]
        cc = [np.tile(cols, n_in), np.full(n_in, e), cols, [e]]
        vals = [-2 * a * b * np.outer(w, w).ravel(), (a + b) * w, (a + b) * w, [-2.0]]
        out.append(sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cc))), shape=(N, N)))
    return out


def output_selector(net: Network, layout: SelectorLayout) -> sp.csr_matrix:
    """[E_0; W_l E_l], mapping the stacked increment to [dx_0; df]."""
    l = net.depth
    return sp.vstack([layout.selector(0), sp.csr_matrix(net.W_out) @ layout.selector(l)]).tocsr()


def fixed_mask(sb: SlopeBounds) -> np.ndarray:
    """Neurons with a single incremental slope (alpha == beta)."""
    return sb.alpha == sb.beta


def fixed_subspace_basis(net: Network, slopes: Sequence[SlopeBounds]) -> sp.csr_matrix:
    """Basis V of the stacked increments on which every fixed neuron is exactly
    linear: dx_{k+1,i} = alpha_i (W_k dx_k)_i whenever alpha_i == beta_i.

    Columns are dx_0 followed by the increments of the non-fixed neurons.
    Every network trajectory difference over the certified region lies in
    range(V) (the slope interval of a fixed neuron pins its increment), and
    the terms of fixed neurons vanish on it identically, whatever the sign of
    their multiplier.
    """
    n0 = net.n_in
    blocks = [np.eye(n0)]
    n_red = n0
    for k, sb in enumerate(slopes):
        W = net.layers[k].W
        prev = blocks[-1]
        fixed = fixed_mask(sb)
        free_count = int(np.count_nonzero(~fixed))
        for j in range(len(blocks)):
            blocks[j] = np.hstack([blocks[j], np.zeros((blocks[j].shape[0], free_count))])
        prev = blocks[-1]
        rows = np.zeros((W.shape[0], n_red + free_count))
        rows[fixed] = (sb.alpha[fixed, None] * W[fixed]) @ prev
        rows[np.flatnonzero(~fixed), n_red + np.arange(free_count)] = 1.0
        blocks.append(rows)
        n_red += free_count
    return sp.csr_matrix(np.vstack(blocks))


def assemble_M(net: Network, qcs: Sequence[QcFamily], Q_f: AffineMatrix,
               eliminate_fixed: bool = False) -> AffineMatrix:
    """sum_k [W_k E_k; E_{k+1}]^T Q_k [W_k E_k; E_{k+1}] - [E_0; W_l E_l]^T Q_f [E_0; W_l E_l].

    Biases never appear: the constraint is on increments. With
    ``eliminate_fixed`` the matrix is restricted (by congruence) to the
    subspace from :func:`fixed_subspace_basis`; fixed neurons then contribute
    nothing and their entries in ``var_ids`` may be None.
    """
    layout = SelectorLayout.for_network(net)
    if len(qcs) != net.depth:
        raise ValueError(f"need {net.depth} multiplier families, got {len(qcs)}")
    if Q_f.size != net.n_in + net.n_out:
        raise ValueError(f"Q_f must be {net.n_in + net.n_out} square, got {Q_f.size}")
    M = AffineMatrix(layout.total)
    for k, qc in enumerate(qcs):
        if qc.layer != k or qc.bounds.size != net.hidden_sizes[k] or len(qc.var_ids) != qc.bounds.size:
            raise ValueError(f"multiplier family {k} does not match layer {k}")
        for i, (var, A) in enumerate(zip(qc.var_ids, neuron_term_matrices(net, layout, k, qc.bounds))):
            if eliminate_fixed and qc.bounds.alpha[i] == qc.bounds.beta[i]:
                continue
            if var is None:
                raise ValueError(f"neuron {i} of layer {k} has no multiplier variable")
            M.coeffs[var] = M.coeffs[var] + A if var in M.coeffs else A
    M = M - Q_f.congruence(output_selector(net, layout))
    if eliminate_fixed:
        M = M.congruence(fixed_subspace_basis(net, [qc.bounds for qc in qcs]))
    return M


# ---------------------------------------------------------------- problems

@dataclass
class Variable:
    index: int
    name: str
    lower: float = -np.inf
    upper: float = np.inf


@dataclass
class SymmetricVariable:
    """Symmetric matrix decision variable built from scalar basis variables."""

    name: str
    size: int
    var_ids: tuple

    def basis(self):
        """Yield (var id, basis matrix) pairs: E_ii and E_ij + E_ji."""
        it = iter(self.var_ids)
        for i in range(self.size):
            for j in range(i + 1):
                if i == j:
                    B = sp.csr_matrix(([1.0], ([i], [i])), shape=(self.size, self.size))
                else:
                    B = sp.csr_matrix(([1.0, 1.0], ([i, j], [j, i])), shape=(self.size, self.size))
                yield next(it), B

    def expr(self) -> AffineMatrix:
        return AffineMatrix(self.size, None, dict(self.basis()))

    def value(self, values) -> np.ndarray:
        return self.expr().evaluate(values)


@dataclass
class Lmi:
    name: str
    expr: AffineMatrix
    margin: float
    # soft constraints absorb the feasibility slack in feasibility mode
    soft: bool = True


@dataclass
class SolverReport:
    status: str
    values: np.ndarray
    objective: Optional[float]
    lmi_max_eig: Dict[str, float]
    solve_time: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def to_json(self, timing: bool = False) -> dict:
        doc = {
            "status": self.status,
            "objective": self.objective,
            "lmi_max_eig": dict(self.lmi_max_eig),
            "solver_status": self.diagnostics.get("solver_status"),
            "iterations": self.diagnostics.get("iterations"),
        }
        if timing:
            doc["solve_time"] = self.solve_time
        return doc


class SdpProblem:
    """minimize c^T v  s.t.  sum_j v_j A_j + A_0 <= -margin I  (per LMI),
    scalar bounds on v, symmetric-matrix variables with P >= mu I.

    Without an objective the problem is solved as feasibility: the largest
    eigenvalue t of the soft LMIs is minimized (down to -1) and the verdict is
    feasible iff t <= -margin.
    """

    def __init__(self):
        self.variables: List[Variable] = []
        self.lmis: List[Lmi] = []
        self.objective: Dict[int, float] = {}
        self.matrices: Dict[str, SymmetricVariable] = {}

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def add_scalar(self, name: str, sign: str = "free", lower: float = -np.inf, upper: float = np.inf) -> int:
        if sign == "nonneg":
            lower = max(lower, 0.0)
        elif sign == "nonpos":
            upper = min(upper, 0.0)
        elif sign != "free":
            raise ValueError(f"unknown sign {sign!r}")
        var = Variable(len(self.variables), name, lower, upper)
        self.variables.append(var)
        return var.index

    def add_psd_matrix(self, name: str, size: int, mu: float = 0.0) -> SymmetricVariable:
        ids = tuple(self.add_scalar(f"{name}[{i},{j}]") for i in range(size) for j in range(i + 1))
        P = SymmetricVariable(name, size, ids)
        self.matrices[name] = P
        # -P + mu I <= 0
        self.lmis.append(Lmi(f"{name}>=mu", -P.expr() + mu * sp.identity(size, format="csr"), 0.0, soft=False))
        return P

    def add_lmi(self, name: str, expr: AffineMatrix, margin: float = 0.0, soft: bool = True) -> None:
        unknown = [j for j in expr.variables if j >= self.n_vars]
        if unknown:
            raise ValueError(f"LMI {name!r} references undeclared variables {unknown}")
        self.lmis.append(Lmi(name, expr, margin, soft))

    def minimize(self, coeffs: Dict[int, float]) -> None:
        unknown = [j for j in coeffs if j >= self.n_vars]
        if unknown:
            raise ValueError(f"objective references undeclared variables {unknown}")
        self.objective = dict(coeffs)

    def residuals(self, values) -> Dict[str, float]:
        return {L.name: L.expr.max_eig(values) for L in self.lmis}

    def solve(self, config: Optional[SolverConfig] = None) -> SolverReport:
        config = config or SolverConfig()
        t0 = time.perf_counter()
        if self.n_vars == 0:
            report = self._solve_constant()
        else:
            backend = BACKENDS.get(config.backend)
            if backend is None:
                raise ValueError(f"unknown solver backend {config.backend!r}")
            report = backend(self, config)
        report.solve_time = time.perf_counter() - t0
        if report.status == OPTIMAL:
            worst = max(report.lmi_max_eig.values(), default=-np.inf)
            biggest = float(np.max(np.abs(report.values), initial=0.0))
            if biggest > config.max_value:
                report.diagnostics["rejected_magnitude"] = biggest
                report.status = NUMERICAL_FAILURE
            elif worst > config.residual_tol:
                report.diagnostics["rejected_residual"] = worst
                report.status = NUMERICAL_FAILURE
        log.debug("sdp solved: %s in %.3fs", report.status, report.solve_time)
        return report

    def _solve_constant(self) -> SolverReport:
        values = np.zeros(0)
        res = self.residuals(values)
        ok = all(res[L.name] <= -L.margin for L in self.lmis)
        return SolverReport(OPTIMAL if ok else INFEASIBLE, values, 0.0 if ok else None, res, 0.0,
                            {"solver_status": "constant"})

    # -- sparse triplet export for external cross-checks
    def to_json(self) -> dict:
        blocks = []
        for L in self.lmis:
            entries = []
            for var, A in [(-1, L.expr.const)] + sorted(L.expr.coeffs.items()):
                A = sp.tril(A).tocoo()
                entries.extend([int(var), int(r), int(c), float(v)] for r, c, v in zip(A.row, A.col, A.data) if v != 0)
            blocks.append({"name": L.name, "size": L.expr.size, "margin": L.margin, "soft": L.soft,
                           "entries": entries})
        return {
            "variables": [{"name": v.name, "lower": _jsonable(v.lower), "upper": _jsonable(v.upper)}
                          for v in self.variables],
            "objective": {str(j): c for j, c in sorted(self.objective.items())},
            "lmis": blocks,
            "convention": "sum_v value[v] * A_v + A_const <= -margin I; var -1 is the constant; lower triangle",
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _jsonable(x: float):
    return None if not np.isfinite(x) else float(x)


# ---------------------------------------------------------------- backends

def _standard_form(prob: SdpProblem):
    """Shared canonicalization: returns (c, linear rows, lmi blocks, t index).

    Linear rows are (coeff dict, rhs) meaning sum coeff*v <= rhs. LMI blocks
    are (size, {var: sparse}, const) meaning sum v A + const <= 0.
    """
    n = prob.n_vars
    feasibility = not prob.objective
    t = n if feasibility else None
    nv = n + (1 if feasibility else 0)
    c = np.zeros(nv)
    if feasibility:
        c[t] = 1.0
    else:
        for j, cj in prob.objective.items():
            c[j] = cj
    rows = []
    for v in prob.variables:
        if np.isfinite(v.lower):
            rows.append(({v.index: -1.0}, -v.lower))
        if np.isfinite(v.upper):
            rows.append(({v.index: 1.0}, v.upper))
    if feasibility:
        rows.append(({t: -1.0}, 1.0))
    blocks = []
    for L in prob.lmis:
        coeffs = dict(L.expr.coeffs)
        const = L.expr.const
        eye = sp.identity(L.expr.size, format="csr")
        if feasibility and L.soft:
            coeffs[t] = -eye
        else:
            const = const + L.margin * eye
        blocks.append((L.expr.size, coeffs, const))
    return c, rows, blocks, t, nv


def _finish(prob: SdpProblem, x: np.ndarray, t: Optional[int], converged: bool, diag: dict) -> SolverReport:
    values = x[: prob.n_vars]
    res = prob.residuals(values)
    if t is not None:
        tval = float(x[t])
        diag["feasibility_slack"] = tval
        margin = max((L.margin for L in prob.lmis if L.soft), default=0.0)
        if not converged:
            status = NUMERICAL_FAILURE
        elif tval <= -margin:
            status = OPTIMAL
        else:
            status = INFEASIBLE
        return SolverReport(status, values, None, res, 0.0, diag)
    status = OPTIMAL if converged else NUMERICAL_FAILURE
    obj = float(sum(c * values[j] for j, c in prob.objective.items()))
    return SolverReport(status, values, obj, res, 0.0, diag)


def _solve_cvxopt(prob: SdpProblem, config: SolverConfig) -> SolverReport:
    import cvxopt
    from cvxopt import solvers

    c, rows, blocks, t, nv = _standard_form(prob)
    if rows:
        ri, ci, vi = [], [], []
        for r, (coeffs, _) in enumerate(rows):
            for j, a in coeffs.items():
                ri.append(r)
                ci.append(j)
                vi.append(a)
        Gl = cvxopt.spmatrix(vi, ri, ci, (len(rows), nv))
        hl = cvxopt.matrix([float(h) for _, h in rows])
    else:
        Gl = cvxopt.spmatrix([], [], [], (0, nv))
        hl = cvxopt.matrix(0.0, (0, 1))
    Gs, hs = [], []
    for size, coeffs, const in blocks:
        ri, ci, vi = [], [], []
        for j, A in coeffs.items():
            A = sp.tril(A).tocoo()
            # column-major vec index of (r, c)
            ri.extend((A.col * size + A.row).tolist())
            ci.extend([j] * A.nnz)
            vi.extend(A.data.tolist())
        Gs.append(cvxopt.spmatrix(vi, ri, ci, (size * size, nv)))
        hs.append(cvxopt.matrix(-np.tril(const.toarray())))
    options = {
        "show_progress": False,
        "abstol": config.abstol,
        "reltol": config.reltol,
        "feastol": config.feastol,
        "maxiters": config.max_iters,
    }
    try:
        sol = solvers.sdp(cvxopt.matrix(c), Gl=Gl, hl=hl, Gs=Gs, hs=hs, options=options)
    except (ValueError, ArithmeticError) as exc:
        return SolverReport(NUMERICAL_FAILURE, np.zeros(prob.n_vars), None, {}, 0.0,
                            {"solver_status": "exception", "error": str(exc)})
    diag = {
        "solver_status": sol["status"],
        "iterations": sol.get("iterations"),
        "gap": sol.get("gap"),
        "relative_gap": sol.get("relative gap"),
        "primal_infeasibility": sol.get("primal infeasibility"),
        "dual_infeasibility": sol.get("dual infeasibility"),
    }
    if sol["status"] == "primal infeasible":
        return SolverReport(INFEASIBLE, np.zeros(prob.n_vars), None, {}, 0.0, diag)
    if sol["x"] is None:
        return SolverReport(NUMERICAL_FAILURE, np.zeros(prob.n_vars), None, {}, 0.0, diag)
    x = np.array(sol["x"]).ravel()
    converged = sol["status"] == "optimal" or _near_optimal(sol, config)
    return _finish(prob, x, t, converged, diag)


def _near_optimal(sol, config: SolverConfig) -> bool:
    # cvxopt stops with 'unknown' when it stalls just short of its tolerances;
    # accept only if gap and both infeasibilities are close to target
    gap = sol.get("relative gap")
    if gap is None:
        gap = sol.get("gap")
    pinf = sol.get("primal infeasibility")
    dinf = sol.get("dual infeasibility")
    return (gap is not None and pinf is not None and dinf is not None
            and abs(gap) < 1e3 * config.reltol and pinf < 1e3 * config.feastol and dinf < 1e3 * config.feastol)


def _solve_cvxpy(prob: SdpProblem, config: SolverConfig) -> SolverReport:
    import cvxpy as cp

    c, rows, blocks, t, nv = _standard_form(prob)
    x = cp.Variable(nv)
    cons = []
    for coeffs, h in rows:
        cons.append(sum(a * x[j] for j, a in coeffs.items()) <= h)
    for size, coeffs, const in blocks:
        ri, ci, vi = [], [], []
        for j, A in coeffs.items():
            A = A.tocoo()
            ri.extend((A.col * size + A.row).tolist())
            ci.extend([j] * A.nnz)
            vi.extend(A.data.tolist())
        G = sp.csr_matrix((vi, (ri, ci)), shape=(size * size, nv))
        expr = cp.reshape(G @ x, (size, size), order="F") + const.toarray()
        cons.append((expr + expr.T) / 2 << 0)
    problem = cp.Problem(cp.Minimize(c @ x), cons)
    try:
        problem.solve(solver=cp.CLARABEL)
    except cp.error.SolverError as exc:
        return SolverReport(NUMERICAL_FAILURE, np.zeros(prob.n_vars), None, {}, 0.0,
                            {"solver_status": "exception", "error": str(exc)})
    diag = {"solver_status": problem.status, "iterations": problem.solver_stats.num_iters}
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolverReport(INFEASIBLE, np.zeros(prob.n_vars), None, {}, 0.0, diag)
    if x.value is None:
        return SolverReport(NUMERICAL_FAILURE, np.zeros(prob.n_vars), None, {}, 0.0, diag)
    return _finish(prob, np.asarray(x.value), t, problem.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE), diag)


BACKENDS = {"cvxopt": _solve_cvxopt, "cvxpy": _solve_cvxpy}
