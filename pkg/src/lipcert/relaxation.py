"""Pre-activation boxes from layerwise linear relaxations of the activations.

Each neuron's activation on [l, u] is sandwiched between two lines

    slope_L * x + offset_L  <=  phi(x)  <=  slope_U * x + offset_U,

and the boxes are pushed forward one layer at a time with the closed-form
interval step (no back-substitution through earlier layers).

Lines are stored as (slope, offset) rather than the factored form
slope * (x + shift): the factored form cannot express a flat line away from
zero, which tanh produces in floating point far from the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Activation, InputRegion, Network

TANGENT_TOL = 1e-9
TANGENT_MAX_ITER = 200


class IntervalError(ValueError):
    pass


@dataclass(frozen=True)
class LinearRelaxation:
    """Per-neuron bounding lines of one activation layer."""

    slope_L: np.ndarray
    offset_L: np.ndarray
    slope_U: np.ndarray
    offset_U: np.ndarray

    @property
    def shift_L(self) -> np.ndarray:
        """beta in the factored form slope * (x + beta)."""
        return _shift(self.slope_L, self.offset_L)

    @property
    def shift_U(self) -> np.ndarray:
        return _shift(self.slope_U, self.offset_U)

    def lower(self, x):
        return self.slope_L * x + self.offset_L

    def upper(self, x):
        return self.slope_U * x + self.offset_U


def _shift(slope, offset):
    slope = np.asarray(slope, dtype=float)
    offset = np.asarray(offset, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(slope != 0.0, offset / np.where(slope != 0.0, slope, 1.0), 0.0)
    return np.where((slope == 0.0) & (offset != 0.0), np.copysign(np.inf, offset), out)


@dataclass(frozen=True)
class LayerBounds:
    """Pre-activation boxes ``lower[k] <= W_k x_k + b_k <= upper[k]``."""

    lower: tuple
    upper: tuple

    def __len__(self):
        return len(self.lower)

    def __iter__(self):
        return iter(zip(self.lower, self.upper))

    def contains(self, z, k: int, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of samples ``z`` (N, n_{k+1}) lying inside box k."""
        z = np.atleast_2d(z)
        return np.all((z >= self.lower[k] - tol) & (z <= self.upper[k] + tol), axis=-1)

    def to_json(self) -> list:
        return [{"l": l.tolist(), "u": u.tolist()} for l, u in self]


# ---------------------------------------------------------------- scalar lines

def _tangent(phi, dphi, d):
    s = float(dphi(d))
    return s, float(phi(d)) - s * d


def _chord(phi, l, u, smax):
    fl, fu = float(phi(l)), float(phi(u))
    # the exact chord slope lies in [0, smax]; clamp cancellation error on tiny intervals
    s = min(max((fu - fl) / (u - l), 0.0), smax)
    return s, fl - s * l


def _bisect(g, a, b):
    """Bisection on a sign change of g over [a, b]; returns the final bracket
    end where g >= 0 (the side on which the tangent line is sound)."""
    ga = g(a)
    for _ in range(TANGENT_MAX_ITER):
        m = 0.5 * (a + b)
        gm = g(m)
        if (gm >= 0) == (ga >= 0):
            a, ga = m, gm
        else:
            b = m
        if abs(gm) <= TANGENT_TOL or b - a <= 1e-15 * max(1.0, abs(a)):
            break
    return a if ga >= 0 else b


def _s_shaped_lines(phi, dphi, l, u):
    """Bounding lines for an increasing activation that is convex on x<=0 and
    concave on x>=0 (tanh, sigmoid)."""
    if u <= 0.0:
        upper = _chord(phi, l, u, float(dphi(0.0)))
        lower = _tangent(phi, dphi, 0.5 * (l + u))
        return lower, upper
    if l >= 0.0:
        lower = _chord(phi, l, u, float(dphi(0.0)))
        upper = _tangent(phi, dphi, 0.5 * (l + u))
        return lower, upper

    fl, fu = float(phi(l)), float(phi(u))

    # upper: tangent at d in [0, u] passing through (l, phi(l)).
    # g_up(d) >= 0 means the tangent lies on or above phi(l) at x = l.
    def g_up(d):
        return float(phi(d)) + float(dphi(d)) * (l - d) - fl

    if g_up(u) <= 0.0:
        upper = _chord(phi, l, u, float(dphi(0.0)))
    else:
        d = _bisect(g_up, 0.0, u)
        upper = _tangent(phi, dphi, d)

    # lower: tangent at d in [l, 0] passing through (u, phi(u)).
    # g_lo(d) <= 0 means the tangent lies on or below phi(u) at x = u.
    def g_lo(d):
        return float(phi(d)) + float(dphi(d)) * (u - d) - fu

    if g_lo(l) >= 0.0:
        lower = _chord(phi, l, u, float(dphi(0.0)))
    else:
        d = _bisect(lambda t: -g_lo(t), l, 0.0)
        lower = _tangent(phi, dphi, d)
    return lower, upper


def relax_scalar(act: Activation, l: float, u: float):
    """((slope_L, offset_L), (slope_U, offset_U)) bounding ``act`` on [l, u]."""
    l, u = float(l), float(u)
    if l > u:
        raise IntervalError(f"empty interval [{l}, {u}]")
    if l == u:
        s = float(act.derivative(l))
        line = (s, float(act(l)) - s * l)
        return line, line
    if act.tag == "identity":
        return (1.0, 0.0), (1.0, 0.0)
    if act.is_piecewise_linear:
        a = act.negative_slope
        if l >= 0.0:
            return (1.0, 0.0), (1.0, 0.0)
        if u <= 0.0:
            return (a, 0.0), (a, 0.0)
        s = (u - a * l) / (u - l)
        upper = (s, u - s * u)
        # tie |u| == |l| goes to the identity line
        lower = (1.0, 0.0) if abs(u) >= abs(l) else (a, 0.0)
        return lower, upper
    return _s_shaped_lines(act, act.derivative, l, u)


def relax_activation(act: Activation, l, u) -> LinearRelaxation:
    """Bounding lines for every neuron of a layer with pre-activation box [l, u]."""
    l = np.atleast_1d(np.asarray(l, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if l.shape != u.shape:
        raise IntervalError("lower and upper bound shapes differ")
    if np.any(l > u):
        raise IntervalError("lower bound exceeds upper bound")
    out = np.empty((4, l.size))
    for i, (li, ui) in enumerate(zip(l, u)):
        (sl, ol), (su, ou) = relax_scalar(act, li, ui)
        out[:, i] = sl, ol, su, ou
    return LinearRelaxation(*out)


# ---------------------------------------------------------------- propagation

def _interval_affine(C, d, lo, hi, upper: bool):
    mid = (hi + lo) / 2
    rad = (hi - lo) / 2
    dev = np.abs(C) @ rad
    return C @ mid + d + (dev if upper else -dev)


def propagate_bounds(net: Network, region: InputRegion) -> LayerBounds:
    """Boxes [l^k, u^k] containing the pre-activations of every layer over ``region``."""
    if region.dim != net.n_in:
        raise ValueError(f"region has dimension {region.dim}, network expects {net.n_in}")
    W0, b0 = net.layers[0].W, net.layers[0].b
    lo = _interval_affine(W0, b0, region.lower, region.upper, upper=False)
    hi = _interval_affine(W0, b0, region.lower, region.upper, upper=True)
    lowers, uppers = [lo], [hi]
    for k in range(1, net.depth):
        rel = relax_activation(net.layers[k - 1].act, lo, hi)
        W, b = net.layers[k].W, net.layers[k].b
        Wp = (W + np.abs(W)) / 2
        Wm = (W - np.abs(W)) / 2
        C_lo = Wp * rel.slope_L + Wm * rel.slope_U
        C_hi = Wp * rel.slope_U + Wm * rel.slope_L
        d_lo = Wp @ rel.offset_L + Wm @ rel.offset_U + b
        d_hi = Wp @ rel.offset_U + Wm @ rel.offset_L + b
        lo, hi = (
            _interval_affine(C_lo, d_lo, lo, hi, upper=False),
            _interval_affine(C_hi, d_hi, lo, hi, upper=True),
        )
        # rounding can cross the bounds on zero-width boxes
        hi = np.maximum(hi, lo)
        lowers.append(lo)
        uppers.append(hi)
    return LayerBounds(tuple(lowers), tuple(uppers))


def global_bounds(net: Network) -> LayerBounds:
    """Unbounded boxes (whole real line) for every layer."""
    lo = tuple(np.full(n, -np.inf) for n in net.hidden_sizes)
    hi = tuple(np.full(n, np.inf) for n in net.hidden_sizes)
    return LayerBounds(lo, hi)
