"""Independent reference values for tests and benchmarks.

None of these routines touch the SDP path: sampling lower bounds, exact local
Lipschitz constants of small ReLU nets by activation-pattern enumeration,
grid search over activation derivatives, and the classical discrete Lyapunov
equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import linprog

from .network import Activation, InputRegion, Network

LOWER_BOUND, EXACT, REFERENCE = "lower-bound", "exact", "reference"
ENUM_MAX_NEURONS = 20
PATTERN_SLACK = 1e-9


class BudgetExceeded(ValueError):
    pass


@dataclass
class OracleResult:
    value: float
    kind: str
    count: int = 0
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"value": self.value, "kind": self.kind, "count": self.count, "seed": self.seed}


def _spectral_norms(J: np.ndarray) -> np.ndarray:
    if J.size == 0:
        return np.zeros(J.shape[0])
    return np.linalg.norm(J, 2, axis=(1, 2))


def sample_lipschitz_lb(net: Network, region: InputRegion, pairs: int = 100_000, seed: Optional[int] = 0,
                        grad_points: Optional[int] = None, chunk: int = 20_000) -> OracleResult:
    """max |f(x) - f(y)| / |x - y| over uniform pairs in the region, and max
    |J(x)|_2 over uniform points (points on a ReLU kink are skipped)."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    grad_points = min(pairs, 10_000) if grad_points is None else grad_points
    best = 0.0
    done = 0
    while done < pairs:
        n = min(chunk, pairs - done)
        x = region.sample(n, rng)
        y = region.sample(n, rng)
        dx = np.linalg.norm(x - y, axis=1)
        df = np.linalg.norm(net(x) - net(y), axis=1)
        ok = dx > 0
        if np.any(ok):
            best = max(best, float(np.max(df[ok] / dx[ok])))
        done += n
    best_grad = 0.0
    if grad_points > 0:
        x = region.sample(grad_points, rng)
        tr = net.trace(x)
        on_kink = np.zeros(grad_points, dtype=bool)
        for layer, z in zip(net.layers, tr.z):
            if layer.act.is_piecewise_linear and layer.act.tag != "identity":
                on_kink |= np.any(z == 0.0, axis=-1)
        norms = _spectral_norms(net.jacobian(x[~on_kink]))
        if norms.size:
            best_grad = float(norms.max())
    return OracleResult(max(best, best_grad), LOWER_BOUND, pairs + grad_points, seed,
                        {"pairs": best, "gradients": best_grad})


def exact_local_lipschitz_enum(net: Network, region: InputRegion, max_neurons: int = ENUM_MAX_NEURONS,
                               slack: float = PATTERN_SLACK, collect: bool = False) -> OracleResult:
    """Exact local l2 Lipschitz constant of a (leaky) ReLU net on a box: the max
    spectral norm of the Jacobian over all activation patterns whose linear
    region meets the box.

    Patterns are enumerated depth first, neuron by neuron; a branch is kept if
    its sign constraints (relaxed by ``slack``) admit a point of the box. The
    witness of the parent settles one child without a new LP. With
    ``collect`` the feasible patterns (tuples of 0/1 per hidden neuron) are
    returned in ``extra["patterns_found"]``.
    """
    for k, layer in enumerate(net.layers):
        if layer.act.tag not in ("relu", "leaky_relu"):
            raise ValueError(f"layer {k}: enumeration needs ReLU activations, got {layer.act.tag}")
    if net.n_hidden > max_neurons:
        raise BudgetExceeded(f"{net.n_hidden} hidden neurons exceed the enumeration budget of {max_neurons}")

    box = list(zip(region.lower, region.upper))
    n0 = net.n_in
    stats = {"patterns": 0, "lps": 0}
    best = [0.0]
    found = []

    def feasible(A, b):
        stats["lps"] += 1
        if not A:
            return region.center
        res = linprog(np.zeros(n0), A_ub=np.array(A), b_ub=np.array(b), bounds=box, method="highs")
        return res.x if res.status == 0 else None

    def visit(k, i, G, g, z_lin, z_off, slopes, A, b, witness, pattern=()):
        # G, g: affine map x0 -> x_k; z_lin, z_off: x0 -> pre-activations of layer k
        if k == net.depth:
            J = net.W_out @ G
            best[0] = max(best[0], float(np.linalg.norm(J, 2)) if J.size else 0.0)
            stats["patterns"] += 1
            if collect:
                found.append(pattern)
            return
        n_k = z_lin.shape[0]
        if i == n_k:
            D = np.array(slopes)
            Gn = D[:, None] * z_lin
            gn = D * z_off
            if k + 1 < net.depth:
                W, bb = net.layers[k + 1].W, net.layers[k + 1].b
                visit(k + 1, 0, Gn, gn, W @ Gn, W @ gn + bb, [], A, b, witness, pattern)
            else:
                visit(k + 1, 0, Gn, gn, None, None, [], A, b, witness, pattern)
            return
        a, c = z_lin[i], z_off[i]
        leak = net.layers[k].act.negative_slope
        wz = a @ witness + c
        # the child the witness satisfies goes first and needs no LP
        order = (True, False) if wz >= 0 else (False, True)
        for active in order:
            if active:
                row, rhs = -a, c + slack
            else:
                row, rhs = a, slack - c
            if row @ witness <= rhs:
                w = witness
            else:
                w = feasible(A + [row], b + [rhs])
                if w is None:
                    continue
            visit(k, i + 1, G, g, z_lin, z_off, slopes + [1.0 if active else leak], A + [row], b + [rhs], w,
                  pattern + (int(active),))

    W0, b0 = net.layers[0].W, net.layers[0].b
    visit(0, 0, np.eye(n0), np.zeros(n0), W0, b0, [], [], [], region.center)
    extra = dict(stats)
    if collect:
        extra["patterns_found"] = found
    return OracleResult(best[0], EXACT, stats["patterns"], None, extra)


def grid_slope_extrema(act: Activation, l: float, u: float, points: int = 1_000_000):
    """(min, max) of the activation derivative on a uniform grid over [l, u]."""
    if l > u:
        raise ValueError(f"empty interval [{l}, {u}]")
    d = act.derivative(np.linspace(l, u, points))
    return float(np.min(d)), float(np.max(d))


@dataclass
class LyapunovReference:
    feasible: bool
    P: Optional[np.ndarray]
    spectral_radius: float


def lyapunov_reference(A_cl, delta: float = 1e-9) -> LyapunovReference:
    """Classical test for A^T P A - P <= -delta I: feasible iff the spectral
    radius is below 1. P solves A^T P A - P = -I, which meets the margin for
    any delta <= 1."""
    A = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("A_cl must be square")
    r = float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0
    if r >= 1.0:
        return LyapunovReference(False, None, r)
    P = solve_discrete_lyapunov(A.T, np.eye(A.shape[0]))
    P = (P + P.T) / 2
    return LyapunovReference(True, P, r)
