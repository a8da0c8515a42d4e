"""Local stability of x+ = A x + B f(x) with a network controller f.

A quadratic V(x) = (x - x*)^T P (x - x*) certifies

    [dx; df]^T [[A^T P A - rho P, A^T P B], [B^T P A, B^T P B]] [dx; df] <= 0

on the box D = {|x - x*|_inf <= eps}, i.e. V(x+) <= rho V(x). P and the
multipliers enter the network LMI jointly and linearly.

Normalization: the problem is homogeneous in (P, lambda), so P >= mu I with
M <= -delta I is the same as P >= I with M <= -(delta / mu) I. The scaled form
is solved; the reported P therefore has min eigenvalue >= 1 >= mu.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from .deltaqc import SlopeBounds, layer_slope_bounds
from .lipschitz import add_multipliers, multiplier_values
from .lmi import INFEASIBLE, AffineMatrix, SdpProblem, SolverConfig, SolverReport, assemble_M
from .network import InputRegion, Network
from .relaxation import LayerBounds, propagate_bounds

log = logging.getLogger(__name__)

P_MIN_EIG = 1e-6
EQ_TOL = 1e-10


class NoEquilibriumError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Plant:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got shape {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("plant matrices must be finite")
        A.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def check_controller(self, net: Network) -> None:
        if net.n_in != self.n_x or net.n_out != self.n_u:
            raise ValueError(
                f"controller maps R^{net.n_in} -> R^{net.n_out}, plant needs R^{self.n_x} -> R^{self.n_u}")

    def step(self, net: Network, x) -> np.ndarray:
        """One closed-loop step; ``x`` may be a batch (N, n_x)."""
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + net(x) @ self.B.T

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist()}


def plant_from_json(doc: dict) -> Plant:
    try:
        return Plant(np.array(doc["A"], dtype=float), np.array(doc["B"], dtype=float))
    except KeyError as exc:
        raise ValueError(f"plant document missing {exc}") from None


def load_plant(path) -> Plant:
    with open(path) as fh:
        return plant_from_json(json.load(fh))


def double_integrator() -> Plant:
    """The unstable discrete double integrator A = 1.2 [[1, 1], [0, 1]], B = [1; 0.5]."""
    return Plant(1.2 * np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[1.0], [0.5]]))


def lqr_gain(plant: Plant, Q=None, R=None) -> np.ndarray:
    """Discrete LQR gain K (u = K x) from the Riccati equation."""
    from scipy.linalg import solve_discrete_are

    Q = np.eye(plant.n_x) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(plant.n_u) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    A, B = plant.A, plant.B
    X = solve_discrete_are(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)


# ---------------------------------------------------------------- equilibrium

def find_equilibrium(plant: Plant, net: Network, guess=None, tol: float = EQ_TOL, max_iter: int = 500) -> np.ndarray:
    """x* with |A x* + B f(x*) - x*|_inf <= tol.

    Damped fixed-point iteration with step halving on the residual, then a
    hybrid Powell root solve (finite-difference Jacobian) if that stalls.
    """
    plant.check_controller(net)

    def resid(x):
        return plant.step(net, x) - x

    x = np.zeros(plant.n_x) if guess is None else np.asarray(guess, dtype=float).ravel().copy()
    r = resid(x)
    nr = np.max(np.abs(r))
    for _ in range(max_iter):
        if nr <= tol:
            return x
        step = 1.0
        while step >= 1e-6:
            xn = x + step * r
            rn = resid(xn)
            nn = np.max(np.abs(rn))
            if nn < nr:
                break
            step /= 2
        else:
            break
        x, r, nr = xn, rn, nn
    if nr <= tol:
        return x
    log.debug("fixed-point iteration stalled at residual %.3g; trying root solve", nr)
    sol = scipy.optimize.root(resid, x, method="hybr", options={"xtol": 1e-14})
    xs = np.asarray(sol.x, dtype=float)
    ns = np.max(np.abs(resid(xs)))
    if ns <= tol:
        return xs
    raise NoEquilibriumError(f"no equilibrium found: residual stalled at {min(ns, nr):.3g}")


# ---------------------------------------------------------------- ellipsoids

@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """{x : (x - center)^T P (x - center) <= level}."""

    P: np.ndarray
    center: np.ndarray
    level: float

    def value(self, x) -> np.ndarray:
        d = np.atleast_2d(x) - self.center
        return np.einsum("ni,ij,nj->n", d, self.P, d)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.value(x) <= self.level + tol

    def sample(self, n: int, rng=None, boundary_fraction: float = 0.5) -> np.ndarray:
        """``n`` points; a ``boundary_fraction`` share lies on the boundary,
        the rest uniformly inside."""
        rng = np.random.default_rng(rng)
        dim = self.center.size
        u = rng.standard_normal((n, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = rng.random(n) ** (1.0 / dim)
        r[: int(round(boundary_fraction * n))] = 1.0
        # x = center + sqrt(level) L^{-T} u with P = L L^T gives V(x) = level |u|^2
        L = np.linalg.cholesky(self.P)
        y = np.linalg.solve(L.T, (u * r[:, None]).T).T
        return self.center + np.sqrt(self.level) * y

    def to_json(self) -> dict:
        return {"P": self.P.tolist(), "center": self.center.tolist(), "level": self.level}


def max_ellipsoid_level(P, center, eps: float) -> float:
    """Largest beta with {V <= beta} inside the box |x - center|_inf <= eps:
    beta = eps^2 / max_i (P^-1)_ii."""
    P = np.asarray(P, dtype=float)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError("P must be positive definite") from None
    Pinv = np.linalg.inv(P)
    return float(eps) ** 2 / float(np.max(np.diag(Pinv)))


# ---------------------------------------------------------------- certificates

@dataclass
class StabilityCertificate:
    equilibrium: np.ndarray
    eps: float
    rho_rate: float
    P: Optional[np.ndarray]
    level: float
    multipliers: List[np.ndarray]
    report: SolverReport
    bounds: LayerBounds
    slopes: List[SlopeBounds]

    @property
    def ok(self) -> bool:
        return self.report.ok and self.P is not None

    @property
    def ellipsoid(self) -> Ellipsoid:
        if not self.ok:
            raise ValueError("no certificate")
        return Ellipsoid(self.P, self.equilibrium, self.level)

    def to_json(self) -> dict:
        doc = {
            "status": self.report.status,
            "equilibrium": self.equilibrium.tolist(),
            "eps": self.eps,
            "rho_rate": self.rho_rate,
            "solver": self.report.to_json(),
        }
        if self.ok:
            doc["P"] = self.P.tolist()
            doc["level"] = self.level
            doc["multipliers"] = [m.tolist() for m in self.multipliers]
        return doc


def _check_rate(rho_rate: float) -> None:
    if not 0.0 < rho_rate <= 1.0:
        raise ValueError(f"rho_rate must lie in (0, 1], got {rho_rate}")


def lyapunov_form(plant: Plant, P: AffineMatrix, rho_rate: float) -> AffineMatrix:
    """[[A^T P A - rho P, A^T P B], [B^T P A, B^T P B]] as an affine matrix in P."""
    n, m = plant.n_x, plant.n_u
    AB = sp.csr_matrix(np.hstack([plant.A, plant.B]))
    I0 = sp.hstack([sp.identity(n), sp.csr_matrix((n, m))]).tocsr()
    return P.congruence(AB) - rho_rate * P.congruence(I0)


def stability_problem(plant: Plant, net: Network, slopes, rho_rate: float, margin: float,
                      eliminate_fixed: bool = True, min_trace: bool = False):
    prob = SdpProblem()
    P = prob.add_psd_matrix("P", plant.n_x, mu=1.0)
    qcs = add_multipliers(prob, slopes, skip_fixed=eliminate_fixed)
    # Q_f is minus the Lyapunov form
    Q_f = -lyapunov_form(plant, P.expr(), rho_rate)
    prob.add_lmi("M", assemble_M(net, qcs, Q_f, eliminate_fixed=eliminate_fixed), margin=margin)
    if min_trace:
        prob.minimize({j: 1.0 for j, B in P.basis() if B.diagonal().any()})
    return prob, P, qcs


def stability_lmi(plant: Plant, net: Network, x_eq, eps: float, rho_rate: float = 1.0,
                  config: Optional[SolverConfig] = None, min_trace: bool = False) -> StabilityCertificate:
    """Feasibility of the local stability LMI on the box of half-width ``eps``
    around ``x_eq``. Infeasibility is a verdict (status 'infeasible')."""
    _check_rate(rho_rate)
    plant.check_controller(net)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    config = config or SolverConfig()
    x_eq = np.asarray(x_eq, dtype=float).ravel()
    bounds = propagate_bounds(net, InputRegion.ball(x_eq, eps))
    slopes = [layer_slope_bounds(L.act, lo, hi) for L, (lo, hi) in zip(net.layers, bounds)]
    margin = config.margin / P_MIN_EIG
    prob, P, qcs = stability_problem(plant, net, slopes, rho_rate, margin, config.eliminate_fixed, min_trace)
    report = prob.solve(config)
    if report.ok:
        Pv = P.value(report.values)
        Pv = (Pv + Pv.T) / 2
        level = max_ellipsoid_level(Pv, x_eq, eps)
    else:
        Pv, level = None, float("nan")
    mults = multiplier_values(qcs, report.values)
    return StabilityCertificate(x_eq, float(eps), rho_rate, Pv, level, mults, report, bounds, slopes)


@dataclass
class RegionSearch:
    certificate: Optional[StabilityCertificate]
    eps: float
    trace: list

    @property
    def ok(self) -> bool:
        return self.certificate is not None

    def to_json(self) -> dict:
        doc = {"eps": self.eps, "trace": [{"eps": e, "status": s} for e, s in self.trace]}
        doc["certificate"] = None if self.certificate is None else self.certificate.to_json()
        return doc


def max_region(plant: Plant, net: Network, x_eq, rho_rate: float = 1.0, eps_min: float = 1e-3,
               eps_max: float = 1.0, tol: float = 1e-3, max_grow: int = 20,
               config: Optional[SolverConfig] = None) -> RegionSearch:
    """Bisection for the largest feasible eps; the final certificate is
    re-solved minimizing trace(P)."""
    _check_rate(rho_rate)
    config = config or SolverConfig()
    trace = []

    def probe(eps):
        cert = stability_lmi(plant, net, x_eq, eps, rho_rate, config)
        trace.append((eps, cert.report.status))
        if not cert.ok and cert.report.status != INFEASIBLE:
            log.warning("solver failure at eps=%g treated as infeasible: %s", eps, cert.report.diagnostics)
        return cert.ok

    if not probe(eps_min):
        return RegionSearch(None, 0.0, trace)
    lo, hi = eps_min, max(eps_max, eps_min)
    grown = 0
    while probe(hi):
        lo = hi
        hi *= 2.0
        grown += 1
        if grown >= max_grow:
            log.warning("stability region still feasible at eps=%g; stopping growth", lo)
            hi = lo
            break
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    cert = stability_lmi(plant, net, x_eq, lo, rho_rate, config, min_trace=True)
    if not cert.ok:
        # the feasibility solution at lo is still a valid certificate
        cert = stability_lmi(plant, net, x_eq, lo, rho_rate, config)
    return RegionSearch(cert if cert.ok else None, lo if cert.ok else 0.0, trace)


# ---------------------------------------------------------------- simulation

def simulate_reachable(plant: Plant, net: Network, initial, steps: int, samples: int = 1000,
                       seed: Optional[int] = 0, boundary_fraction: float = 0.5) -> np.ndarray:
    """States (steps + 1, samples, n_x) of the closed loop from sampled initial
    states. ``initial`` is an Ellipsoid (boundary-biased sampling) or an
    explicit array of initial points."""
    plant.check_controller(net)
    if isinstance(initial, Ellipsoid):
        x = initial.sample(samples, seed, boundary_fraction)
    else:
        x = np.atleast_2d(np.asarray(initial, dtype=float))
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            x = plant.step(net, x)
            out[k + 1] = x
    return out


def reachable_csv(states: np.ndarray) -> str:
    """CSV with header step,sample,x1..xn (12 significant digits)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = states.shape[2]
    w.writerow(["step", "sample"] + [f"x{i + 1}" for i in range(n)])
    for k, pts in enumerate(states):
        for s, p in enumerate(pts):
            w.writerow([k, s] + [f"{v:.12g}" for v in p])
    return buf.getvalue()
