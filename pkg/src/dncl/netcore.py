"""Minimal deterministic feed-forward engine.

Dense and activation layers, exact reverse-mode gradients, SGD with momentum
and coupled weight decay, and a versioned binary checkpoint format.

Matrix products go through ``np.einsum`` without path optimization, which
runs numpy's own summation loops instead of BLAS.  Each output row is then
reduced the same way whatever else is in the batch, so ``forward`` is exactly
batch-decomposable and training is bit-reproducible regardless of the BLAS
build or thread count.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .rng import SplitMix64

ACTIVATIONS = ("relu", "tanh", "identity")

MAGIC = b"NCLF"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input or parameter shapes do not agree with the layer table."""


class StaleTraceError(RuntimeError):
    """A trace is used after the network it came from was modified."""


class CheckpointError(ValueError):
    """A checkpoint could not be decoded."""


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient during training.

    ``checkpoint`` holds the serialized last finite state when available.
    """

    def __init__(self, message: str, checkpoint: bytes | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"dense dims must be positive, got {self.in_dim}x{self.out_dim}")


@dataclass(frozen=True)
class Activation:
    name: str

    def __post_init__(self):
        if self.name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.name!r}; expected one of {ACTIVATIONS}")


LayerSpec = Union[Dense, Activation]


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` through numpy's own einsum loops (never BLAS)."""
    return np.einsum("ni,io->no", x, w)


def _matmul_wt(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("no,io->ni", g, w)


def _outer_sum(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("ni,no->io", x, g)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient at exactly 0 is 0
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


@dataclass
class ActivationTrace:
    """Per-layer inputs and outputs recorded by :func:`forward`."""

    inputs: list
    outputs: list
    version: int
    net_id: int

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


class Network:
    """Layered feed-forward map.

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` with one ``(W, b)``
    pair per dense layer, ``W`` shaped ``(in_dim, out_dim)`` so a layer maps
    ``x -> x @ W + b``.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: Sequence[np.ndarray] | None = None):
        self.layers = list(layers)
        if not self.layers or not isinstance(self.layers[0], Dense):
            raise ShapeError("a network must start with a dense layer")
        dims = None
        for layer in self.layers:
            if isinstance(layer, Dense):
                if dims is not None and layer.in_dim != dims:
                    raise ShapeError(f"layer expects {layer.in_dim} inputs but receives {dims}")
                dims = layer.out_dim
        dense = self.dense_layers
        if params is None:
            params = []
            for layer in dense:
                params += [np.zeros((layer.in_dim, layer.out_dim)), np.zeros(layer.out_dim)]
        params = [np.array(p, dtype=np.float64) for p in params]
        if len(params) != 2 * len(dense):
            raise ShapeError(f"expected {2 * len(dense)} parameter arrays, got {len(params)}")
        for layer, w, b in zip(dense, params[0::2], params[1::2]):
            if w.shape != (layer.in_dim, layer.out_dim) or b.shape != (layer.out_dim,):
                raise ShapeError(
                    f"parameter shapes {w.shape}/{b.shape} do not match "
                    f"dense {layer.in_dim}x{layer.out_dim}"
                )
        self.params = params
        self.version = 0

    @classmethod
    def initialize(cls, layers: Sequence[LayerSpec], rng: SplitMix64) -> "Network":
        """Glorot-uniform weights, zero biases."""
        params = []
        for layer in layers:
            if isinstance(layer, Dense):
                a = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
                params.append(rng.uniform((layer.in_dim, layer.out_dim), -a, a))
                params.append(np.zeros(layer.out_dim))
        return cls(layers, params)

    @property
    def dense_layers(self) -> list[Dense]:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.dense_layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.dense_layers)

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding traces."""
        self.version += 1

    def copy(self) -> "Network":
        return Network(self.layers, [p.copy() for p in self.params])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output


def mlp(sizes: Sequence[int], activation: str = "tanh", final_activation: str = "identity") -> list[LayerSpec]:
    """Layer table for a dense stack ``sizes[0] -> ... -> sizes[-1]``."""
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        act = activation if i < len(sizes) - 2 else final_activation
        if act != "identity":
            layers.append(Activation(act))
    return layers


def forward(net: Network, batch: np.ndarray) -> ActivationTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"batch shape {x.shape} incompatible with input dim {net.in_dim}")
    inputs, outputs = [], []
    p = 0
    for layer in net.layers:
        inputs.append(x)
        if isinstance(layer, Dense):
            x = matmul(x, net.params[p]) + net.params[p + 1]
            p += 2
        else:
            x = _activate(layer.name, x)
        outputs.append(x)
    return ActivationTrace(inputs, outputs, net.version, id(net))


def backward(net: Network, trace: ActivationTrace, output_grad: np.ndarray, need_input_grad: bool = True):
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

    Returns ``(param_grads, input_grad)``; ``param_grads`` mirrors
    ``net.params``.  ``input_grad`` is None when ``need_input_grad`` is False.
    """
    if trace.net_id != id(net) or trace.version != net.version:
        raise StaleTraceError("trace does not belong to the current state of this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {trace.output.shape}")
    grads: list = [None] * len(net.params)
    p = len(net.params)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        x = trace.inputs[idx]
        if isinstance(layer, Dense):
            p -= 2
            grads[p] = _outer_sum(x, g)
            grads[p + 1] = g.sum(axis=0)
            if idx == 0 and not need_input_grad:
                return grads, None
            g = _matmul_wt(g, net.params[p])
        else:
            g = _activation_grad(layer.name, x, trace.outputs[idx], g)
    return grads, g


@dataclass
class OptimState:
    buffers: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], 0)


def sgd_step(params: list, grads: Sequence[np.ndarray], state: OptimState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place SGD update with momentum and coupled weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params) or len(state.buffers) != len(params):
        raise ShapeError("params, grads and momentum buffers differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"grad {i} has shape {g.shape}, param has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {i} at step {state.step}")
    for p, g, v in zip(params, grads, state.buffers):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    state.step += 1


def grad_check(net: Network, batch: np.ndarray, loss_closure: Callable, eps: float = 1e-6) -> float:
    """Largest relative gap between backprop and central differences.

    ``loss_closure(output)`` returns ``(loss, dloss_doutput)``.  The relative
    error per parameter is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    trace = forward(net, batch)
    _, dout = loss_closure(trace.output)
    analytic, _ = backward(net, trace, dout)
    worst = 0.0
    for p, ga in zip(net.params, analytic):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp, _ = loss_closure(forward(net, batch).output)
            flat[j] = old - eps
            lm, _ = loss_closure(forward(net, batch).output)
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            err = abs(gflat[j] - num) / max(1e-8, abs(gflat[j]) + abs(num))
            worst = max(worst, err)
    net.touch()
    return worst


# -- checkpoint format --------------------------------------------------------
#
#   magic    4s   b"NCLF"
#   version  u32
#   kind     u8   0 = network, 1 = ensemble
#   body          kind-specific (see below); all integers/floats little-endian
#   crc32    u32  over every preceding byte
#
# network body:   n_layers u32; per layer kind u8 (0 dense, 1 activation) then
#                 dense: in u32, out u32 | activation: code u8;
#                 then W (row-major f64) and b (f64) per dense layer in order.
# optimizer body: present u8; if 1: step u64 then buffers in parameter order.

_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack("<" + fmt, *vals))

    def array(self, a: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        if len(data) < 13:
            raise CheckpointError(f"checkpoint truncated: {len(data)} bytes")
        if data[:4] != MAGIC:
            raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version mismatch: expected {FORMAT_VERSION}, found {version}"
            )
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise CheckpointError("checkpoint corrupted or truncated (crc mismatch)")
        self.data = data[:-4]
        self.pos = 8

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        try:
            vals = struct.unpack_from(fmt, self.data, self.pos)
        except struct.error as exc:
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}") from exc
        self.pos += struct.calcsize(fmt)
        return vals if len(vals) > 1 else vals[0]

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        end = self.pos + 8 * n
        if end > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        a = np.frombuffer(self.data[self.pos : end], dtype="<f8").astype(np.float64).reshape(shape)
        self.pos = end
        return a

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError(f"{len(self.data) - self.pos} trailing bytes in checkpoint")


def _write_network(w: _Writer, net: Network) -> None:
    w.pack("I", len(net.layers))
    for layer in net.layers:
        if isinstance(layer, Dense):
            w.pack("BII", 0, layer.in_dim, layer.out_dim)
        else:
            w.pack("BB", 1, _ACT_CODES[layer.name])
    for p in net.params:
        w.array(p)


def _read_network(r: _Reader) -> Network:
    layers: list[LayerSpec] = []
    for _ in range(r.unpack("I")):
        kind = r.unpack("B")
        if kind == 0:
            layers.append(Dense(*r.unpack("II")))
        elif kind == 1:
            code = r.unpack("B")
            if code >= len(ACTIVATIONS):
                raise CheckpointError(f"unknown activation code {code}")
            layers.append(Activation(ACTIVATIONS[code]))
        else:
            raise CheckpointError(f"unknown layer kind {kind}")
    params = []
    for layer in layers:
        if isinstance(layer, Dense):
            params.append(r.array((layer.in_dim, layer.out_dim)))
            params.append(r.array((layer.out_dim,)))
    return Network(layers, params)


def _write_state(w: _Writer, state: OptimState | None) -> None:
    if state is None:
        w.pack("B", 0)
        return
    w.pack("BQ", 1, state.step)
    for buf in state.buffers:
        w.array(buf)


def _read_state(r: _Reader, params: Sequence[np.ndarray]) -> OptimState | None:
    if r.unpack("B") == 0:
        return None
    step = r.unpack("Q")
    return OptimState([r.array(p.shape) for p in params], step)


def _header(kind: int) -> _Writer:
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("IB", FORMAT_VERSION, kind)
    return w


def save_network(net: Network, state: OptimState | None = None) -> bytes:
    w = _header(0)
    _write_network(w, net)
    _write_state(w, state)
    return w.finish()


def load_network(data: bytes) -> tuple[Network, OptimState | None]:
    r = _Reader(data)
    if (kind := r.unpack("B")) != 0:
        raise CheckpointError(f"expected a network checkpoint (kind 0), found kind {kind}")
    net = _read_network(r)
    state = _read_state(r, net.params)
    r.done()
    return net, state


def checkpoint_roundtrip(net: Network, state: OptimState | None = None):
    return load_network(save_network(net, state))
