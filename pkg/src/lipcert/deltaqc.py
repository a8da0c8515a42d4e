"""Local incremental quadratic constraints for activation layers.

For a neuron whose incremental slope (phi(x) - phi(y)) / (x - y) is known to
lie in [alpha, beta] on a box, every lambda >= 0 gives

    [dx; dphi]^T [[-2 alpha beta lambda, (alpha+beta) lambda],
                  [(alpha+beta) lambda, -2 lambda]] [dx; dphi] >= 0.

Piecewise-linear neurons whose sign is fixed on the box are exactly linear
there, so their term vanishes identically and the multiplier may take either
sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Activation
from .relaxation import IntervalError

ACTIVE, INACTIVE, UNKNOWN = "active", "inactive", "unknown"


class AdmissibilityError(ValueError):
    """A multiplier violates its sign constraint."""


@dataclass(frozen=True)
class SlopeBounds:
    """Per-neuron incremental slope intervals of one layer.

    ``partition`` is only meaningful for piecewise-linear activations;
    ``free`` marks neurons whose multiplier is sign-unconstrained.
    """

    alpha: np.ndarray
    beta: np.ndarray
    partition: tuple
    free: np.ndarray

    def __post_init__(self):
        if np.any(self.alpha > self.beta):
            raise IntervalError("slope lower bound exceeds upper bound")
        if np.any(self.free & (self.alpha != self.beta)):
            raise ValueError("free multipliers require alpha == beta")

    @property
    def size(self) -> int:
        return self.alpha.size

    def index_sets(self) -> tuple:
        """(I+, I-, I+-) as sorted index arrays."""
        tags = np.asarray(self.partition)
        return tuple(np.flatnonzero(tags == t) for t in (ACTIVE, INACTIVE, UNKNOWN))


def _check_interval(l, u):
    l = np.atleast_1d(np.asarray(l, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if l.shape != u.shape:
        raise IntervalError("lower and upper bound shapes differ")
    if np.any(l > u):
        raise IntervalError("lower bound exceeds upper bound")
    return l, u


def slope_bounds_smooth(act: Activation, l, u):
    """(alpha, beta) = (inf, sup) of phi' over [l, u] for tanh / sigmoid.

    Both derivatives are unimodal with their peak at 0, so the infimum sits at
    an endpoint and the supremum is phi'(0) whenever 0 is inside.
    """
    if not act.is_smooth:
        raise ValueError(f"{act.tag} is not a smooth activation")
    l, u = _check_interval(l, u)
    dl, du = act.derivative(l), act.derivative(u)
    alpha = np.minimum(dl, du)
    peak = float(act.derivative(0.0))
    beta = np.where((l <= 0.0) & (u >= 0.0), peak, np.maximum(dl, du))
    return alpha, beta


def relu_partition(l, u, leak: float = 0.0) -> SlopeBounds:
    """Split (leaky) ReLU neurons into always-active, always-inactive and unknown.

    Active means l >= 0, inactive means u < 0 (strict), everything else unknown.
    """
    l, u = _check_interval(l, u)
    active = l >= 0.0
    inactive = u < 0.0
    alpha = np.where(active, 1.0, leak)
    beta = np.where(inactive, leak, 1.0)
    tags = tuple(ACTIVE if a else INACTIVE if i else UNKNOWN for a, i in zip(active, inactive))
    return SlopeBounds(alpha, beta, tags, active | inactive)


def layer_slope_bounds(act: Activation, l, u) -> SlopeBounds:
    """Slope bounds for any supported activation on the box [l, u].

    Infinite boxes give the activation's global slope range.
    """
    l, u = _check_interval(l, u)
    if act.is_piecewise_linear:
        return relu_partition(l, u, act.negative_slope)
    n = l.size
    if act.tag == "identity":
        ones = np.ones(n)
        return SlopeBounds(ones, ones.copy(), (ACTIVE,) * n, np.ones(n, dtype=bool))
    alpha, beta = slope_bounds_smooth(act, l, u)
    return SlopeBounds(alpha, beta, (UNKNOWN,) * n, np.zeros(n, dtype=bool))


def global_slope_bounds(act: Activation, n: int) -> SlopeBounds:
    """Global slope range for every neuron; all multipliers sign-constrained."""
    a, b = act.slope_range
    return SlopeBounds(np.full(n, a), np.full(n, b), (UNKNOWN,) * n, np.zeros(n, dtype=bool))


def qc_matrix(bounds: SlopeBounds, lam) -> np.ndarray:
    """The 2m x 2m multiplier matrix of a layer for multipliers ``lam``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.shape != bounds.alpha.shape:
        raise ValueError(f"expected {bounds.size} multipliers, got {lam.size}")
    bad = (~bounds.free) & (lam < 0)
    if np.any(bad):
        raise AdmissibilityError(f"negative multiplier on constrained neurons {np.flatnonzero(bad).tolist()}")
    a, b = bounds.alpha, bounds.beta
    return np.block([
        [np.diag(-2 * a * b * lam), np.diag((a + b) * lam)],
        [np.diag((a + b) * lam), np.diag(-2 * lam)],
    ])


def qc_form(bounds: SlopeBounds, lam, dx, dphi) -> np.ndarray:
    """[dx; dphi]^T Q(lam) [dx; dphi] for a batch of increments (N, m)."""
    a, b = bounds.alpha, bounds.beta
    lam = np.asarray(lam, dtype=float)
    dx = np.asarray(dx, dtype=float)
    dphi = np.asarray(dphi, dtype=float)
    terms = -2 * a * b * dx**2 + 2 * (a + b) * dx * dphi - 2 * dphi**2
    return terms @ lam
