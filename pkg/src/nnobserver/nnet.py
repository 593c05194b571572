"""Feedforward networks, layer traces and the sign-split bounding network pair.

A network maps ``x`` through ``L`` hidden layers ``v = W w + b``, ``w = psi(v)``
followed by an affine output layer.  The auxiliary pair built from it takes an
ordered box ``[x_lo, x_hi]`` and returns outputs that bracket the network on
every point of the box.

All evaluators accept a single vector of shape ``(n,)`` or a batch of shape
``(B, n)``; traces keep the same leading shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import InitVar, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ActivationKind",
    "Activation",
    "NeuralNet",
    "AuxNetPair",
    "LayerTrace",
    "BracketReport",
    "NetworkError",
    "forward",
    "split_weights",
    "build_aux_pair",
    "aux_forward",
    "check_bracketing",
    "random_network",
    "network_to_dict",
    "network_from_dict",
    "load_network",
    "save_network",
]


class NetworkError(ValueError):
    """Invalid network definition, input shape or interval ordering."""


class ActivationKind(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"


@dataclass(frozen=True)
class Activation:
    """Scalar activation applied entrywise, identical in every hidden layer.

    Every supported kind is monotone nondecreasing and globally Lipschitz;
    ``lipschitz`` is the smallest global constant.
    """

    kind: ActivationKind
    slope: float = 0.0  # negative-side slope, LEAKY_RELU only

    def __post_init__(self):
        kind = ActivationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActivationKind.LEAKY_RELU:
            if not (0.0 <= self.slope < 1.0):
                raise NetworkError(
                    f"leaky_relu slope must lie in [0, 1) to stay monotone "
                    f"with unit Lipschitz constant, got {self.slope}"
                )
        elif self.slope != 0.0:
            raise NetworkError(f"slope is only meaningful for leaky_relu, not {kind.value}")

    @classmethod
    def parse(cls, name: str, slope: Optional[float] = None) -> "Activation":
        name = name.strip().lower()
        if name.startswith("leaky_relu(") and name.endswith(")"):
            return cls(ActivationKind.LEAKY_RELU, float(name[len("leaky_relu("):-1]))
        try:
            kind = ActivationKind(name)
        except ValueError:
            raise NetworkError(f"unsupported activation {name!r}") from None
        if kind is ActivationKind.LEAKY_RELU:
            return cls(kind, 0.01 if slope is None else float(slope))
        return cls(kind)

    @property
    def name(self) -> str:
        if self.kind is ActivationKind.LEAKY_RELU:
            return f"leaky_relu({self.slope!r})"
        return self.kind.value

    @property
    def lipschitz(self) -> float:
        if self.kind is ActivationKind.SIGMOID:
            return 0.25
        return 1.0

    @property
    def monotone(self) -> bool:
        return True

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        k = self.kind
        if k is ActivationKind.TANH:
            return np.tanh(v)
        if k is ActivationKind.RELU:
            return np.maximum(v, 0.0)
        if k is ActivationKind.SIGMOID:
            # tanh form avoids overflow in exp for large |v|
            return 0.5 * (1.0 + np.tanh(0.5 * v))
        return np.where(v >= 0.0, v, self.slope * v)

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        k = self.kind
        if k is ActivationKind.TANH:
            return 1.0 - np.tanh(v) ** 2
        if k is ActivationKind.RELU:
            return (v > 0.0).astype(float)
        if k is ActivationKind.SIGMOID:
            s = 0.5 * (1.0 + np.tanh(0.5 * v))
            return s * (1.0 - s)
        return np.where(v > 0.0, 1.0, self.slope)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NeuralNet:
    """Layered weights ``W[0..L]`` and biases ``b[0..L]``.

    ``weights[l]`` has shape ``(n_{l+1}, n_l)``; the last entry is the affine
    output layer.  ``clamp`` is an optional ``(lo, hi)`` pair of vectors that
    saturates the output entrywise.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: Activation = field(default_factory=lambda: Activation(ActivationKind.TANH))
    clamp: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        weights = tuple(_frozen(np.atleast_2d(W)) for W in self.weights)
        biases = tuple(_frozen(np.atleast_1d(b)) for b in self.biases)
        if not weights:
            raise NetworkError("network needs at least the output layer")
        if len(weights) != len(biases):
            raise NetworkError(f"{len(weights)} weight matrices but {len(biases)} bias vectors")
        for l, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
                raise NetworkError(f"layer {l + 1}: weight {W.shape} and bias {b.shape} disagree")
            if l > 0 and W.shape[1] != weights[l - 1].shape[0]:
                raise NetworkError(
                    f"layer {l + 1}: expects {W.shape[1]} inputs but layer {l} "
                    f"produces {weights[l - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NetworkError(f"layer {l + 1}: non-finite weight or bias")
        act = self.activation
        if isinstance(act, str):
            act = Activation.parse(act)
        clamp = self.clamp
        if clamp is not None:
            lo, hi = (np.broadcast_to(np.asarray(c, dtype=float), (weights[-1].shape[0],)) for c in clamp)
            if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
                raise NetworkError("output clamp must be a nonempty interval per output")
            clamp = (_frozen(lo), _frozen(hi))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "activation", act)
        object.__setattr__(self, "clamp", clamp)

    @property
    def layer_count(self) -> int:
        """Number of hidden (activated) layers ``L``."""
        return len(self.weights) - 1

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_phi(self) -> int:
        """Total hidden neuron count ``n_1 + ... + n_L``."""
        return sum(W.shape[0] for W in self.weights[:-1])

    def apply_clamp(self, z):
        if self.clamp is None:
            return z
        return np.clip(z, self.clamp[0], self.clamp[1])

    def __call__(self, x):
        return forward(self, x).output


@dataclass(frozen=True)
class LayerTrace:
    """Intermediate values of one evaluation.

    ``pre[l]`` is the pre-activation of hidden layer ``l+1``; ``post[0]`` is the
    input and ``post[l]`` the activation output of hidden layer ``l``.
    ``raw_output`` is the affine output before clamping.
    """

    pre: Tuple[np.ndarray, ...]
    post: Tuple[np.ndarray, ...]
    raw_output: np.ndarray
    output: np.ndarray

    def stacked_pre(self) -> np.ndarray:
        if not self.pre:
            return np.zeros(self.raw_output.shape[:-1] + (0,))
        return np.concatenate(self.pre, axis=-1)

    def stacked_post(self) -> np.ndarray:
        """Hidden activations ``w[1..L]`` stacked (the input is excluded)."""
        if len(self.post) <= 1:
            return np.zeros(self.raw_output.shape[:-1] + (0,))
        return np.concatenate(self.post[1:], axis=-1)


def _check_input(net: NeuralNet, x, what="x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_in:
        raise NetworkError(f"{what} must have trailing dimension {net.n_in}, got shape {x.shape}")
    return x


def forward(net: NeuralNet, x) -> LayerTrace:
    x = _check_input(net, x)
    psi = net.activation
    pre, post = [], [x]
    w = x
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        v = w @ W.T + b
        w = psi(v)
        pre.append(v)
        post.append(w)
    raw = w @ net.weights[-1].T + net.biases[-1]
    return LayerTrace(tuple(pre), tuple(post), raw, net.apply_clamp(raw))


def split_weights(W) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(W_neg, W_pos)``: strictly negative entries and nonnegative entries.

    Zeros go to ``W_pos``; the two parts have disjoint support so their sum is
    bitwise ``W``.
    """
    W = np.asarray(W, dtype=float)
    neg = np.where(W < 0.0, W, 0.0)
    pos = np.where(W < 0.0, 0.0, W)
    return neg, pos


@dataclass(frozen=True, eq=False)
class AuxNetPair:
    """Per-layer splits ``lower[l] <= 0 <= upper[l]`` with ``lower + upper == W``."""

    parent: NeuralNet
    lower: Tuple[np.ndarray, ...]
    upper: Tuple[np.ndarray, ...]
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        object.__setattr__(self, "lower", tuple(_frozen(W) for W in self.lower))
        object.__setattr__(self, "upper", tuple(_frozen(W) for W in self.upper))
        if not validate:
            return
        if len(self.lower) != len(self.parent.weights) or len(self.upper) != len(self.parent.weights):
            raise NetworkError("split pair must have one entry per layer")
        for l, (W, lo, hi) in enumerate(zip(self.parent.weights, self.lower, self.upper)):
            if lo.shape != W.shape or hi.shape != W.shape:
                raise NetworkError(f"layer {l + 1}: split shapes differ from parent")
            if np.any(lo > 0.0) or np.any(hi < 0.0):
                raise NetworkError(f"layer {l + 1}: lower split must be <= 0 and upper split >= 0")
            if not np.array_equal(lo + hi, W):
                raise NetworkError(f"layer {l + 1}: splits do not reconstruct the weights")


def build_aux_pair(net: NeuralNet) -> AuxNetPair:
    parts = [split_weights(W) for W in net.weights]
    return AuxNetPair(net, tuple(p[0] for p in parts), tuple(p[1] for p in parts))


def aux_forward(pair: AuxNetPair, x_lo, x_hi, check: bool = True) -> Tuple[LayerTrace, LayerTrace]:
    """Evaluate the coupled lower/upper networks on the box ``[x_lo, x_hi]``.

    The lower pre-activation reads the upper activation through the negative
    split and the lower activation through the nonnegative split; the upper
    network is the mirror image.  With ``check=False`` misordered boxes are
    evaluated as given (simulation uses this and flags ordering separately).
    """
    net = pair.parent
    x_lo = _check_input(net, x_lo, "x_lo")
    x_hi = _check_input(net, x_hi, "x_hi")
    if check and np.any(x_lo > x_hi):
        raise NetworkError("interval bounds out of order: x_lo must be <= x_hi entrywise")
    psi = net.activation
    pre_lo, pre_hi, post_lo, post_hi = [], [], [x_lo], [x_hi]
    w_lo, w_hi = x_lo, x_hi
    for Wn, Wp, b in zip(pair.lower[:-1], pair.upper[:-1], net.biases[:-1]):
        v_lo = w_hi @ Wn.T + w_lo @ Wp.T + b
        v_hi = w_lo @ Wn.T + w_hi @ Wp.T + b
        w_lo, w_hi = psi(v_lo), psi(v_hi)
        pre_lo.append(v_lo)
        pre_hi.append(v_hi)
        post_lo.append(w_lo)
        post_hi.append(w_hi)
    Wn, Wp, b = pair.lower[-1], pair.upper[-1], net.biases[-1]
    raw_lo = w_hi @ Wn.T + w_lo @ Wp.T + b
    raw_hi = w_lo @ Wn.T + w_hi @ Wp.T + b
    lo = LayerTrace(tuple(pre_lo), tuple(post_lo), raw_lo, net.apply_clamp(raw_lo))
    hi = LayerTrace(tuple(pre_hi), tuple(post_hi), raw_hi, net.apply_clamp(raw_hi))
    return lo, hi


@dataclass(frozen=True)
class BracketReport:
    samples: int
    seed: int
    max_violation: float  # output level
    max_layer_violation: float  # worst over hidden v and w
    worst_sample: int
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol and self.max_layer_violation <= self.tol


def sample_ordered_triples(box_lo, box_hi, samples: int, rng: np.random.Generator):
    """Uniform ``(x_lo, x, x_hi)`` with ``box_lo <= x_lo <= x <= x_hi <= box_hi``."""
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    u = np.sort(rng.random((samples, 3, box_lo.shape[0])), axis=1)
    pts = box_lo + u * (box_hi - box_lo)
    return pts[:, 0], pts[:, 1], pts[:, 2]


def check_bracketing(net: NeuralNet, pair: AuxNetPair, box_lo, box_hi,
                     samples: int = 10_000, seed: int = 0, tol: float = 1e-9) -> BracketReport:
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    if np.any(box_lo > box_hi):
        raise NetworkError("box_lo must be <= box_hi")
    if samples < 1:
        raise NetworkError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    x_lo, x, x_hi = sample_ordered_triples(box_lo, box_hi, samples, rng)
    mid = forward(net, x)
    lo, hi = aux_forward(pair, x_lo, x_hi)
    out_viol = np.maximum(lo.output - mid.output, mid.output - hi.output).max(axis=-1)
    layer_viol = np.zeros(samples)
    for a, m, b in zip(lo.pre + lo.post[1:], mid.pre + mid.post[1:], hi.pre + hi.post[1:]):
        layer_viol = np.maximum(layer_viol, np.maximum(a - m, m - b).max(axis=-1))
    worst = int(np.argmax(np.maximum(out_viol, layer_viol)))
    return BracketReport(samples, seed, max(0.0, float(out_viol.max())),
                         max(0.0, float(layer_viol.max())), worst, tol)


def random_network(widths: Sequence[int], activation="tanh", seed: int = 0,
                   scale: float = 1.0, clamp=None) -> NeuralNet:
    """Gaussian weights with ``1/sqrt(fan_in)`` scaling; handy for tests and demos."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        Ws.append(scale * rng.standard_normal((n_out, n_in)) / math.sqrt(n_in))
        bs.append(0.1 * scale * rng.standard_normal(n_out))
    act = Activation.parse(activation) if isinstance(activation, str) else activation
    return NeuralNet(tuple(Ws), tuple(bs), act, clamp)


# --- JSON ------------------------------------------------------------------

def network_to_dict(net: NeuralNet) -> dict:
    d = {
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(net.weights, net.biases)],
        "activation": net.activation.kind.value,
    }
    if net.activation.kind is ActivationKind.LEAKY_RELU:
        d["negative_slope"] = net.activation.slope
    if net.clamp is not None:
        d["clamp"] = [net.clamp[0].tolist(), net.clamp[1].tolist()]
    return d


def _finite_array(value, where: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise NetworkError(f"{where}: not a numeric array ({exc})") from None
    if not np.all(np.isfinite(a)):
        raise NetworkError(f"{where}: NaN or Inf values are not allowed")
    return a


def network_from_dict(d: dict) -> NeuralNet:
    try:
        layers = d["layers"]
        act_name = d.get("activation", "tanh")
    except (KeyError, TypeError, AttributeError):
        raise NetworkError("network JSON needs a 'layers' list") from None
    Ws, bs = [], []
    for i, layer in enumerate(layers):
        if not isinstance(layer, dict) or "W" not in layer or "b" not in layer:
            raise NetworkError(f"layers[{i}] needs 'W' and 'b'")
        W = _finite_array(layer["W"], f"layers[{i}].W")
        if W.ndim != 2:
            raise NetworkError(f"layers[{i}].W must be a row-major 2D array")
        Ws.append(W)
        bs.append(_finite_array(layer["b"], f"layers[{i}].b").reshape(-1))
    act = Activation.parse(act_name, d.get("negative_slope"))
    clamp = d.get("clamp")
    if clamp is not None:
        if len(clamp) != 2:
            raise NetworkError("clamp must be [lo[], hi[]]")
        clamp = (_finite_array(clamp[0], "clamp.lo"), _finite_array(clamp[1], "clamp.hi"))
    return NeuralNet(tuple(Ws), tuple(bs), act, clamp)


def load_network(path) -> NeuralNet:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def save_network(net: NeuralNet, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(network_to_dict(net), indent=1))
    return path
