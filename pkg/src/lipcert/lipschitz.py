"""Local and global l2 Lipschitz bounds, and certified l-infinity radii for
classifiers.

The squared Lipschitz bound ``rho`` is minimized subject to M(lambda, rho) <= 0
with output multiplier Q_f = [[rho I, 0], [0, -I]]. The classifier margin is
a different quantity and is always called ``margin`` here.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .deltaqc import SlopeBounds, global_slope_bounds, layer_slope_bounds
from .lmi import (
    INFEASIBLE,
    NUMERICAL_FAILURE,
    AffineMatrix,
    QcFamily,
    SdpProblem,
    SolverConfig,
    SolverReport,
    assemble_M,
    fixed_mask,
)
from .network import InputRegion, Network
from .relaxation import LayerBounds, global_bounds, propagate_bounds

log = logging.getLogger(__name__)


@dataclass
class LipschitzCertificate:
    region: Optional[InputRegion]
    L: float
    rho: float
    multipliers: List[np.ndarray]
    mode: str
    bounds: LayerBounds
    slopes: List[SlopeBounds]
    report: SolverReport

    @property
    def ok(self) -> bool:
        return self.report.ok

    def to_json(self) -> dict:
        doc = {
            "mode": self.mode,
            "L": self.L,
            "rho": self.rho,
            "status": self.report.status,
            "multipliers": [m.tolist() for m in self.multipliers],
            "solver": self.report.to_json(),
        }
        if self.region is not None:
            doc["region"] = {"lower": self.region.lower.tolist(), "upper": self.region.upper.tolist()}
        return doc


def add_multipliers(prob: SdpProblem, slopes: Sequence[SlopeBounds], skip_fixed: bool = False) -> List[QcFamily]:
    """Declare one multiplier per neuron; fixed neurons get free multipliers.
    With ``skip_fixed`` neurons with alpha == beta get none at all because
    they are eliminated from the LMI."""
    qcs = []
    for k, sb in enumerate(slopes):
        fixed = fixed_mask(sb)
        ids = tuple(
            None if (skip_fixed and fixed[i])
            else prob.add_scalar(f"lambda[{k}][{i}]", sign="free" if sb.free[i] else "nonneg")
            for i in range(sb.size)
        )
        qcs.append(QcFamily(k, sb, ids))
    return qcs


def multiplier_values(qcs: Sequence[QcFamily], values, scale: float = 1.0) -> List[np.ndarray]:
    """Multiplier vectors; eliminated neurons report 0 (any value is admissible)."""
    return [np.array([0.0 if j is None else scale * float(values[j]) for j in qc.var_ids]) for qc in qcs]


def gain_scale(net: Network, slopes: Sequence[SlopeBounds]) -> float:
    """Product of spectral norms times the largest slope per layer: a cheap upper
    bound on L used to normalize the output layer. Returns 1 when it is 0."""
    s = float(np.linalg.norm(net.W_out, 2))
    for layer, sb in zip(net.layers, slopes):
        beta = float(np.max(np.abs(np.r_[sb.alpha, sb.beta]))) if sb.size else 0.0
        s *= float(np.linalg.norm(layer.W, 2)) * beta
    return s if np.isfinite(s) and s > 0 else 1.0


def lipschitz_problem(net: Network, slopes: Sequence[SlopeBounds], margin: float = 0.0,
                      output_scale: float = 1.0, eliminate_fixed: bool = False):
    """(problem, rho variable id, multiplier families) for min rho s.t. M <= 0.

    With ``output_scale`` s the output multiplier is diag(rho I, -I/s^2), which
    is the problem for the network with W_out / s: its optimum rho_s relates to
    the original by rho = s^2 rho_s, and multipliers scale by s^2 as well.
    """
    prob = SdpProblem()
    rho = prob.add_scalar("rho", sign="nonneg")
    qcs = add_multipliers(prob, slopes, skip_fixed=eliminate_fixed)
    n0, nf = net.n_in, net.n_out
    Q_f = AffineMatrix(
        n0 + nf,
        sp.diags(np.r_[np.zeros(n0), -np.ones(nf) / output_scale**2]),
        {rho: sp.diags(np.r_[np.ones(n0), np.zeros(nf)])},
    )
    prob.add_lmi("M", assemble_M(net, qcs, Q_f, eliminate_fixed=eliminate_fixed), margin=margin)
    prob.minimize({rho: 1.0})
    return prob, rho, qcs


def exact_rho(M: AffineMatrix, rho_id: int, values, n0: int) -> Optional[float]:
    """Smallest rho with M(lambda, rho) <= 0 for the multipliers in ``values``.

    rho enters only as -rho on the leading n0 x n0 block, so the answer is the
    top eigenvalue of the Schur complement M00 - M0h Mhh^-1 Mh0, provided the
    trailing block is negative definite. Returns None otherwise.
    """
    v = np.array(values, dtype=float)
    v[rho_id] = 0.0
    A = M.evaluate(v)
    A = (A + A.T) / 2
    M00, M0h, Mhh = A[:n0, :n0], A[:n0, n0:], A[n0:, n0:]
    if Mhh.size:
        w, U = np.linalg.eigh(Mhh)
        if w[-1] >= -1e-13 * max(1.0, np.abs(w).max()):
            return None
        B = M0h @ U
        S = M00 - (B / w) @ B.T
    else:
        S = M00
    return max(float(np.linalg.eigvalsh((S + S.T) / 2)[-1]), 0.0)


def _certify(net, region, bounds, slopes, mode, config: SolverConfig) -> LipschitzCertificate:
    s = gain_scale(net, slopes) if config.normalize_output else 1.0
    # rho is minimized, so no strictness margin: it would only bias the bound
    prob, rho_id, qcs = lipschitz_problem(net, slopes, 0.0, s, config.eliminate_fixed)
    report = prob.solve(config)
    if report.status == INFEASIBLE:
        # rho is unbounded above, so this can only be a solver artefact
        report.status = NUMERICAL_FAILURE
    if report.ok:
        rho_s = max(float(report.values[rho_id]), 0.0)
        # replace the solver's rho by the exact minimum for its multipliers so
        # that solver tolerance cannot undercut the bound
        polished = exact_rho(prob.lmis[0].expr, rho_id, report.values, net.n_in)
        report.diagnostics["rho_solver"] = s * s * rho_s
        if polished is not None:
            rho_s = polished
            report.values[rho_id] = rho_s
            report.lmi_max_eig = prob.residuals(report.values)
        rho = s * s * rho_s
        L = math.sqrt(rho)
    else:
        rho = L = float("nan")
    report.diagnostics["output_scale"] = s
    mults = multiplier_values(qcs, report.values, s * s)
    return LipschitzCertificate(region, L, rho, mults, mode, bounds, list(slopes), report)


def local_lipschitz(net: Network, region: InputRegion, config: Optional[SolverConfig] = None) -> LipschitzCertificate:
    """Certified bound on the l2 Lipschitz constant of ``net`` over ``region``."""
    config = config or SolverConfig()
    bounds = propagate_bounds(net, region)
    slopes = [layer_slope_bounds(L.act, lo, hi) for L, (lo, hi) in zip(net.layers, bounds)]
    return _certify(net, region, bounds, slopes, "local", config)


def global_lipschitz(net: Network, config: Optional[SolverConfig] = None) -> LipschitzCertificate:
    """Certified bound valid on the whole input space (global slope ranges)."""
    config = config or SolverConfig()
    slopes = [global_slope_bounds(L.act, L.W.shape[0]) for L in net.layers]
    return _certify(net, None, global_bounds(net), slopes, "global", config)


# ---------------------------------------------------------------- classifiers

class MarginError(ValueError):
    """The point has no positive margin to certify (misclassified or one class)."""


@dataclass(frozen=True)
class Margin:
    value: float
    label: int
    tie: bool = False


def classifier_margin(logits, label: Optional[int] = None) -> Margin:
    """min over i != label of |logit_label - logit_i| / sqrt(2).

    ``label`` defaults to the argmax. A label that is not a (possibly tied)
    maximizer means the point is misclassified and raises MarginError.
    """
    logits = np.asarray(logits, dtype=float).ravel()
    if logits.size < 2:
        raise MarginError("need at least two classes")
    top = int(np.argmax(logits))
    label = top if label is None else int(label)
    if not 0 <= label < logits.size:
        raise MarginError(f"label {label} out of range")
    others = np.delete(logits, label)
    gap = logits[label] - others.max()
    if gap < 0:
        raise MarginError(f"margin nonpositive: class {label} is not the predicted class {top}")
    if gap == 0:
        return Margin(0.0, label, tie=True)
    return Margin(float(np.min(np.abs(logits[label] - others)) / math.sqrt(2.0)), label)


@dataclass
class RobustnessResult:
    x: np.ndarray
    label: int
    margin: float
    radius: float
    L: float
    trace: list = field(default_factory=list)
    tie: bool = False
    converged: bool = True

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "margin": self.margin,
            "radius": self.radius,
            "L_local": self.L,
            "tie": self.tie,
            "converged": self.converged,
            "trace": [{"eps": e, "L": L, "g": g} for e, L, g in self.trace],
        }


def certify_radius(
    net: Network,
    x,
    label: Optional[int] = None,
    eps_max: float = 1.0,
    tol: float = 1e-4,
    max_iter: int = 60,
    config: Optional[SolverConfig] = None,
) -> RobustnessResult:
    """Largest probed eps with sqrt(n0) * L_loc(eps) * eps <= margin.

    Every l-infinity perturbation of size <= eps then moves the output by at
    most ``margin`` in l2, which cannot change the predicted class.
    """
    config = config or SolverConfig()
    x = np.asarray(x, dtype=float).ravel()
    if net.n_out < 2:
        raise MarginError("certify_radius needs a classifier with at least two outputs")
    m = classifier_margin(net(x), label)
    scale = math.sqrt(net.n_in)
    trace = []

    def L_at(eps):
        cert = local_lipschitz(net, InputRegion.ball(x, eps), config)
        if not cert.ok:
            raise RuntimeError(f"solver failed at eps={eps}: {cert.report.status}")
        return cert.L

    def g(eps):
        L = L_at(eps)
        val = scale * L * eps - m.value
        trace.append((eps, L, val))
        return val, L

    if m.value == 0.0:
        return RobustnessResult(x, m.label, 0.0, 0.0, L_at(0.0), trace, tie=True)

    lo, L_lo = 0.0, None
    hi = eps_max
    converged = True
    it = 0
    gh, Lh = g(hi)
    while gh <= 0.0:
        # the whole bracket is certified: grow it
        lo, L_lo = hi, Lh
        hi *= 2.0
        it += 1
        if it >= max_iter:
            converged = False
            break
        gh, Lh = g(hi)
    while converged and hi - lo > tol:
        if it >= max_iter:
            converged = False
            break
        mid = 0.5 * (lo + hi)
        gm, Lm = g(mid)
        it += 1
        if gm <= 0.0:
            lo, L_lo = mid, Lm
        else:
            hi = mid
    if not converged:
        warnings.warn("bisection budget exhausted; returning the best certified radius", RuntimeWarning)
    if L_lo is None:
        L_lo = L_at(0.0)
    return RobustnessResult(x, m.label, m.value, lo, L_lo, trace, converged=converged)
