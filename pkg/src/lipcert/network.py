"""Feedforward networks: x_{k+1} = phi_k(W_k x_k + b_k), f(x_0) = W_l x_l + b_l.

Networks are immutable once built. Weights are validated when a network is
constructed (or loaded), never at use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

ACTIVATION_TAGS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")
SMOOTH_TAGS = ("tanh", "sigmoid")
PIECEWISE_LINEAR_TAGS = ("relu", "leaky_relu")


class NetworkSchemaError(ValueError):
    """Raised when a network document or constructor input is malformed."""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class UnsupportedActivationError(NetworkSchemaError):
    pass


def _sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class Activation:
    """Scalar activation applied elementwise.

    ``leak`` is only meaningful for ``leaky_relu`` (slope on the negative side).
    """

    tag: str
    leak: float = 0.0

    def __post_init__(self):
        if self.tag not in ACTIVATION_TAGS:
            raise UnsupportedActivationError(f"unsupported activation {self.tag!r}")
        if self.tag == "leaky_relu":
            if not (0.0 <= self.leak < 1.0):
                raise NetworkSchemaError(f"leaky_relu slope must lie in [0, 1), got {self.leak}")
        elif self.leak != 0.0:
            raise NetworkSchemaError(f"leak given for non-leaky activation {self.tag!r}")

    @property
    def is_smooth(self) -> bool:
        return self.tag in SMOOTH_TAGS

    @property
    def is_piecewise_linear(self) -> bool:
        return self.tag in PIECEWISE_LINEAR_TAGS

    @property
    def negative_slope(self) -> float:
        """Slope of a (leaky) ReLU left of the kink; 0 for plain ReLU."""
        return self.leak if self.tag == "leaky_relu" else 0.0

    @property
    def slope_range(self) -> tuple[float, float]:
        """Global (inf, sup) of the derivative over the real line."""
        if self.tag in PIECEWISE_LINEAR_TAGS:
            return (self.negative_slope, 1.0)
        if self.tag == "tanh":
            return (0.0, 1.0)
        if self.tag == "sigmoid":
            return (0.0, 0.25)
        return (1.0, 1.0)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.tag == "relu":
            return np.maximum(z, 0.0)
        if self.tag == "leaky_relu":
            return np.where(z >= 0.0, z, self.leak * z)
        if self.tag == "tanh":
            return np.tanh(z)
        if self.tag == "sigmoid":
            return _sigmoid(z)
        return z.copy()

    def derivative(self, z):
        """Elementwise derivative. At a ReLU kink (z == 0) the left slope is used."""
        z = np.asarray(z, dtype=float)
        if self.tag in PIECEWISE_LINEAR_TAGS:
            return np.where(z > 0.0, 1.0, self.negative_slope)
        if self.tag == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if self.tag == "sigmoid":
            s = _sigmoid(z)
            return s * (1.0 - s)
        return np.ones_like(z)

    def to_json(self) -> dict:
        doc = {"act": self.tag}
        if self.tag == "leaky_relu":
            doc["leak"] = self.leak
        return doc


def _as_activation(act: Union[str, Activation]) -> Activation:
    return act if isinstance(act, Activation) else Activation(act)


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: Activation


@dataclass(frozen=True)
class ForwardTrace:
    """Intermediate quantities of one forward pass.

    ``x[k]`` is the input of layer k (``x[0]`` the network input, ``x[l]`` the
    last hidden output), ``z[k] = W_k x[k] + b_k`` the pre-activation of
    layer k, and ``output`` the final affine map applied to ``x[l]``.
    """

    x: list
    z: list
    output: np.ndarray


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    W_out: np.ndarray
    b_out: np.ndarray
    dims: tuple = field(init=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkSchemaError("network needs at least one activation layer")
        checked = []
        n_in = None
        for k, layer in enumerate(layers):
            W, b = _check_affine(layer.W, layer.b, k, n_in)
            act = _as_activation(layer.act)
            checked.append(Layer(W, b, act))
            n_in = W.shape[0]
        W_out, b_out = _check_affine(self.W_out, self.b_out, len(layers), n_in)
        dims = (checked[0].W.shape[1],) + tuple(L.W.shape[0] for L in checked) + (W_out.shape[0],)
        object.__setattr__(self, "layers", tuple(checked))
        object.__setattr__(self, "W_out", W_out)
        object.__setattr__(self, "b_out", b_out)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence, acts) -> "Network":
        """Build from ``len(acts) + 1`` weight/bias pairs; the last pair is the
        final affine map. ``acts`` may be a single tag shared by all layers."""
        if isinstance(acts, (str, Activation)):
            acts = [acts] * (len(weights) - 1)
        if len(weights) != len(biases) or len(weights) != len(acts) + 1:
            raise NetworkSchemaError("need one more weight/bias pair than activations")
        layers = [Layer(W, b, _as_activation(a)) for W, b, a in zip(weights[:-1], biases[:-1], acts)]
        return cls(tuple(layers), weights[-1], biases[-1])

    @property
    def depth(self) -> int:
        """Number of activation layers (l)."""
        return len(self.layers)

    @property
    def n_in(self) -> int:
        return self.dims[0]

    @property
    def n_out(self) -> int:
        return self.dims[-1]

    @property
    def hidden_sizes(self) -> tuple:
        return self.dims[1:-1]

    @property
    def n_hidden(self) -> int:
        return int(sum(self.hidden_sizes))

    @property
    def weights(self) -> list:
        return [L.W for L in self.layers] + [self.W_out]

    @property
    def biases(self) -> list:
        return [L.b for L in self.layers] + [self.b_out]

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in or x.ndim > 2:
            raise ValueError(f"expected input of length {self.n_in}, got shape {x.shape}")
        return x

    def trace(self, x) -> ForwardTrace:
        """Forward pass keeping every layer input and pre-activation.

        Accepts a single point (n_0,) or a batch (N, n_0).
        """
        x = self._check_input(x)
        xs, zs = [x], []
        for L in self.layers:
            z = x @ L.W.T + L.b
            x = L.act(z)
            zs.append(z)
            xs.append(x)
        return ForwardTrace(xs, zs, x @ self.W_out.T + self.b_out)

    def forward(self, x) -> np.ndarray:
        return self.trace(x).output

    __call__ = forward

    def jacobian(self, x) -> np.ndarray:
        """Jacobian W_l D_{l-1} W_{l-1} ... D_0 W_0 at x.

        For a batch (N, n_0) returns (N, n_f, n_0). ReLU kinks use slope 0.
        """
        x = self._check_input(x)
        tr = self.trace(x)
        batched = x.ndim == 2
        J = self.layers[0].W if not batched else np.broadcast_to(self.layers[0].W, (x.shape[0],) + self.layers[0].W.shape)
        for k, L in enumerate(self.layers):
            if k > 0:
                J = L.W @ J
            d = L.act.derivative(tr.z[k])
            J = d[..., :, None] * J
        return self.W_out @ J

    def to_json(self) -> dict:
        layers = []
        for L in self.layers:
            doc = {"W": L.W.tolist(), "b": L.b.tolist()}
            doc.update(L.act.to_json())
            layers.append(doc)
        return {"layers": layers, "final": {"W": self.W_out.tolist(), "b": self.b_out.tolist()}}

    def __eq__(self, other):
        if not isinstance(other, Network) or self.dims != other.dims:
            return False
        return all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        ) and all(p.act == q.act for p, q in zip(self.layers, other.layers))

    __hash__ = None


def _check_affine(W, b, k: int, n_in: Optional[int]):
    try:
        W = np.array(W, dtype=float)
        b = np.array(b, dtype=float)
    except (TypeError, ValueError) as exc:
        raise NetworkSchemaError(f"weights are not numeric ({exc})", k) from None
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise NetworkSchemaError(f"W must be a nonempty matrix, got shape {W.shape}", k)
    if b.shape != (W.shape[0],):
        raise NetworkSchemaError(f"b has shape {b.shape}, expected ({W.shape[0]},)", k)
    if n_in is not None and W.shape[1] != n_in:
        raise NetworkSchemaError(f"W has {W.shape[1]} columns but previous layer has {n_in} outputs", k)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise NetworkSchemaError("non-finite weight or bias", k)
    W.setflags(write=False)
    b.setflags(write=False)
    return W, b


# ---------------------------------------------------------------- documents

def network_from_json(doc: dict) -> Network:
    if not isinstance(doc, dict) or "layers" not in doc or "final" not in doc:
        raise NetworkSchemaError("document must be an object with 'layers' and 'final'")
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise NetworkSchemaError("'layers' must be a nonempty list")
    layers = []
    n_in = None
    for k, entry in enumerate(doc["layers"]):
        if not isinstance(entry, dict) or not {"W", "b", "act"} <= entry.keys():
            raise NetworkSchemaError("layer entries need 'W', 'b' and 'act'", k)
        tag = entry["act"]
        if tag not in ACTIVATION_TAGS:
            raise UnsupportedActivationError(f"unsupported activation {tag!r}", k)
        try:
            act = Activation(tag, float(entry.get("leak", 0.0)))
        except NetworkSchemaError as exc:
            raise NetworkSchemaError(str(exc), k) from None
        W, b = _check_affine(entry["W"], entry["b"], k, n_in)
        n_in = W.shape[0]
        layers.append(Layer(W, b, act))
    final = doc["final"]
    if not isinstance(final, dict) or not {"W", "b"} <= final.keys():
        raise NetworkSchemaError("'final' needs 'W' and 'b'", len(layers))
    W, b = _check_affine(final["W"], final["b"], len(layers), n_in)
    return Network(tuple(layers), W, b)


def dumps_network(net: Network) -> str:
    return json.dumps(net.to_json(), indent=1) + "\n"


def loads_network(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkSchemaError(f"invalid JSON: {exc}") from None
    return network_from_json(doc)


def load_network(path) -> Network:
    return loads_network(Path(path).read_text())


def save_network(net: Network, path) -> None:
    Path(path).write_text(dumps_network(net))


# ---------------------------------------------------------------- regions

@dataclass(frozen=True, eq=False)
class InputRegion:
    """Axis-aligned input box [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("region needs finite bounds with lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def ball(cls, center, radius: float) -> "InputRegion":
        """l-infinity ball of half-width ``radius`` around ``center``."""
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        c = np.asarray(center, dtype=float).ravel()
        return cls(c - radius, c + radius)

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    @property
    def half_width(self) -> np.ndarray:
        return (self.upper - self.lower) / 2

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, other: "InputRegion") -> bool:
        return bool(np.all(self.lower <= other.lower) and np.all(other.upper <= self.upper))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


# ---------------------------------------------------------------- builders

def random_network(dims: Sequence[int], act="tanh", seed: int = 0, scale: float = 1.0) -> Network:
    """Network with i.i.d. normal weights and biases (std ``scale``)."""
    rng = np.random.default_rng(seed)
    Ws = [scale * rng.standard_normal((dims[k + 1], dims[k])) for k in range(len(dims) - 1)]
    bs = [scale * rng.standard_normal(dims[k + 1]) for k in range(len(dims) - 1)]
    return Network.from_arrays(Ws, bs, act)


def saturated_linear_controller(K) -> Network:
    """ReLU network computing clip(K x, -1, 1) = ReLU(Kx+1) - ReLU(Kx-1) - 1.

    Single-input controllers only (K is a row vector).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[0] != 1:
        raise ValueError("saturated controller expects a single control input")
    W0 = np.vstack([K, K])
    return Network.from_arrays([W0, np.array([[1.0, -1.0]])], [np.array([1.0, -1.0]), np.array([-1.0])], "relu")
