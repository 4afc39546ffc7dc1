"""Dense ReLU networks with hand-written reverse-mode gradients and Adam.

Two representations are provided:

* :class:`Mlp` -- a single network, used for evaluation, serialization and
  gradient checks.
* :class:`MlpBank` -- ``G`` networks of identical architecture stacked along a
  leading axis so that a whole family of component subnets can be evaluated and
  differentiated with batched matrix products.

Single networks are float64.  Banks follow the dtype of their arrays, which lets
the trainer run long penalized fits in float32 when asked to.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised for inconsistent layer sizes or input dimensions."""


class TrainingDivergence(FloatingPointError):
    """Raised when an optimizer receives a non-finite gradient or loss."""


def _validate_sizes(layer_sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ShapeError(f"need at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ShapeError(f"all layer sizes must be >= 1, got {sizes}")
    if sizes[0] not in (1, 2):
        raise ShapeError(f"input dimension must be 1 or 2, got {sizes[0]}")
    if sizes[-1] != 1:
        raise ShapeError(f"output dimension must be 1, got {sizes[-1]}")
    return sizes


@dataclass
class Mlp:
    """Fully connected network, ReLU on hidden layers, identity output.

    ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])``.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        self.layer_sizes = _validate_sizes(self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of parameter blocks does not match layer_sizes")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if W.shape != want or b.shape != (want[0],):
                raise ShapeError(f"layer {l}: got W{W.shape} b{b.shape}, expected W{want}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> Mlp:
        return Mlp(
            self.layer_sizes,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
        )

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self, X)


def mlp_init(layer_sizes: Sequence[int], seed: int | np.random.Generator) -> Mlp:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    sizes = _validate_sizes(layer_sizes)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, seed if isinstance(seed, (int, np.integer)) else None)


def mlp_forward(net: Mlp, x) -> float:
    """Evaluate the network at a single input vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (net.input_dim,):
        raise ShapeError(f"expected input of dimension {net.input_dim}, got shape {x.shape}")
    return float(forward_batch(net, x[None, :])[0])


def _as_batch(net: Mlp, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if net.input_dim == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"expected inputs of shape (n, {net.input_dim}), got {X.shape}")
    return X


def forward_batch(net: Mlp, X) -> np.ndarray:
    """Evaluate on a batch ``X`` of shape ``(n, input_dim)``; returns ``(n,)``."""
    h = _as_batch(net, X)
    last = net.n_layers - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if l < last:
            np.maximum(h, 0.0, out=h)
    return h[:, 0]


@dataclass
class GradientTape:
    """Cached forward quantities for one batch plus gradient accumulators."""

    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    grad_weights: list[np.ndarray] = field(default_factory=list)
    grad_biases: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.pre[-1][:, 0]

    def gradients(self) -> list[np.ndarray]:
        out = []
        for gW, gb in zip(self.grad_weights, self.grad_biases):
            out.extend((gW, gb))
        return out


def forward_cached(net: Mlp, X) -> GradientTape:
    """Forward pass that records pre-activations for :func:`mlp_backward`."""
    h = _as_batch(net, X)
    tape = GradientTape(inputs=h)
    last = net.n_layers - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        tape.pre.append(z)
        h = np.maximum(z, 0.0) if l < last else z
        tape.post.append(h)
    tape.grad_weights = [np.zeros_like(W) for W in net.weights]
    tape.grad_biases = [np.zeros_like(b) for b in net.biases]
    return tape


def mlp_backward(net: Mlp, tape: GradientTape, grad_output) -> GradientTape:
    """Back-propagate ``dL/d output`` (one entry per batch row) into the tape.

    The ReLU subgradient at 0 is 0.
    """
    if not tape.pre:
        raise ValueError("tape holds no forward cache; call forward_cached first")
    g = np.asarray(grad_output, dtype=float).reshape(-1, 1)
    if g.shape[0] != tape.inputs.shape[0]:
        raise ShapeError("grad_output length does not match the cached batch")
    for l in range(net.n_layers - 1, -1, -1):
        if l < net.n_layers - 1:
            g = g * (tape.pre[l] > 0)
        prev = tape.inputs if l == 0 else tape.post[l - 1]
        tape.grad_weights[l] = g.T @ prev
        tape.grad_biases[l] = g.sum(axis=0)
        if l > 0:
            g = g @ net.weights[l]
    return tape


def squared_loss_backward(net: Mlp, X, y) -> tuple[float, GradientTape]:
    """Loss ``mean((y - net(X))**2)`` and its exact parameter gradient."""
    tape = forward_cached(net, X)
    r = np.asarray(y, dtype=float) - tape.output
    n = r.shape[0]
    mlp_backward(net, tape, -2.0 * r / n)
    return float(np.mean(r**2)), tape


# --------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kwargs) -> OptimState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
                lr: float | None = None) -> None:
    """In-place Adam step on ``params``; ``state.step`` is incremented by one."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient at step {state.step}")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def opt_step(net: Mlp, grads: GradientTape | Sequence[np.ndarray],
             state: OptimState) -> tuple[Mlp, OptimState]:
    """Functional Adam step: returns an updated copy of ``net`` and ``state``."""
    g = grads.gradients() if isinstance(grads, GradientTape) else list(grads)
    new = net.copy()
    params = new.parameters()
    if len(g) != len(params) or any(a.shape != b.shape for a, b in zip(g, params)):
        raise ShapeError("gradient shapes do not match network parameters")
    new_state = OptimState([m.copy() for m in state.m], [v.copy() for v in state.v],
                           state.step, state.lr, state.beta1, state.beta2, state.eps)
    adam_update(params, g, new_state)
    return new, new_state


# --------------------------------------------------------------------------
# Banks of identically shaped networks


@dataclass
class MlpBank:
    """``G`` networks sharing ``layer_sizes``; ``weights[l]`` is ``(G, out, in)``."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def from_nets(cls, nets: Sequence[Mlp]) -> MlpBank:
        sizes = nets[0].layer_sizes
        if any(n.layer_sizes != sizes for n in nets):
            raise ShapeError("all networks in a bank must share layer_sizes")
        L = len(sizes) - 1
        return cls(
            sizes,
            [np.stack([n.weights[l] for n in nets]) for l in range(L)],
            [np.stack([n.biases[l] for n in nets]) for l in range(L)],
        )

    def to_nets(self) -> list[Mlp]:
        return [
            Mlp(self.layer_sizes, [W[g].copy() for W in self.weights],
                [b[g].copy() for b in self.biases])
            for g in range(self.size)
        ]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def forward(self, Xg: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """``Xg`` has shape ``(G, input_dim, n)``; returns outputs ``(G, n)`` and a cache.

        The cache holds the layer inputs, i.e. the post-activations feeding
        each affine map, so ``cache[0] is Xg``.
        """
        cache = [Xg]
        h = Xg
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = np.matmul(W, h)
            z += b[:, :, None]
            if l < last:
                np.maximum(z, 0.0, out=z)
                cache.append(z)
            h = z
        return h[:, 0, :], cache

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients (W0, b0, W1, b1, ...) given ``dL/d output`` of shape ``(G, n)``.

        Hidden post-activations double as ReLU masks since ``relu(z) > 0`` iff ``z > 0``.
        """
        L = len(self.weights)
        g = grad_out[:, None, :]
        grads: list[np.ndarray] = [None] * (2 * L)  # type: ignore[list-item]
        for l in range(L - 1, -1, -1):
            a = cache[l]
            grads[2 * l] = np.matmul(g, a.transpose(0, 2, 1))
            grads[2 * l + 1] = g.sum(axis=2)
            if l > 0:
                g = np.matmul(self.weights[l].transpose(0, 2, 1), g)
                g *= a > 0
        return grads


# --------------------------------------------------------------------------
# Serialization: uint32 header length, JSON header, little-endian float64 payload


def _pack(header: dict, arrays: Sequence[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    flat = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
    return struct.pack("<I", len(head)) + head + flat.astype("<f8").tobytes()


def _unpack(blob: bytes) -> tuple[dict, np.ndarray]:
    (hlen,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4 : 4 + hlen].decode())
    return header, np.frombuffer(blob[4 + hlen :], dtype="<f8").astype(float)


def mlp_to_bytes(net: Mlp) -> bytes:
    header = {"format_version": FORMAT_VERSION, "layer_sizes": list(net.layer_sizes),
              "seed": None if net.seed is None else int(net.seed)}
    return _pack(header, net.parameters())


def mlp_from_bytes(blob: bytes) -> Mlp:
    header, flat = _unpack(blob)
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {header.get('format_version')}")
    sizes = tuple(header["layer_sizes"])
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise ValueError("payload length does not match layer_sizes")
    return Mlp(sizes, weights, biases, header.get("seed"))


def save_mlp(net: Mlp, path: str | Path) -> None:
    Path(path).write_bytes(mlp_to_bytes(net))


def load_mlp(path: str | Path) -> Mlp:
    return mlp_from_bytes(Path(path).read_bytes())


def pack_arrays(header: dict, arrays: Sequence[np.ndarray]) -> bytes:
    """Generic container used for grids and datasets (same layout as networks)."""
    return _pack({"format_version": FORMAT_VERSION, **header}, arrays)


def unpack_arrays(blob: bytes) -> tuple[dict, np.ndarray]:
    return _unpack(blob)
