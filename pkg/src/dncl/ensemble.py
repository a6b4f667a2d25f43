"""Shared-trunk ensemble trained with negative correlation learning.

The trunk maps inputs to ``F`` features; head ``k`` is a linear map reading
only the ``k``-th contiguous block of ``F / K`` features.  Every head is
trained on

    L_k = 1/2 (G_k - Y)^2 - lam * (G_k - G_mean)^2

and the trunk receives the sum of all heads' back-propagated gradients.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import netcore
from .diagnostics import pairwise_diversity
from .losses import LossKind, mad_scale, pointwise_loss
from .netcore import (
    CheckpointError,
    Dense,
    Network,
    OptimState,
    TrainingDiverged,
    backward,
    forward,
    mlp,
    sgd_step,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

RECOMMENDED_LAMBDA = (1e-3, 1e-2)


@dataclass
class HeadOutputs:
    per_head: np.ndarray  # (K, N, O)
    mean: np.ndarray  # (N, O)

    @classmethod
    def from_heads(cls, per_head: np.ndarray) -> "HeadOutputs":
        per_head = np.asarray(per_head, dtype=np.float64)
        return cls(per_head, per_head.mean(axis=0))


@dataclass(frozen=True)
class Aggregator:
    mode: str = "uniform"
    weights: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("uniform", "weighted"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if self.mode == "weighted" and self.weights is None:
            raise ValueError("weighted aggregation needs weights")


def aggregate(head_outputs, agg: Aggregator = Aggregator()) -> np.ndarray:
    """Combine head predictions: the plain mean, or ``sum_k w_k G_k``."""
    per_head = head_outputs.per_head if isinstance(head_outputs, HeadOutputs) else np.asarray(head_outputs)
    if agg.mode == "uniform":
        return per_head.mean(axis=0)
    w = np.asarray(agg.weights, dtype=np.float64)
    if w.shape != (per_head.shape[0],):
        raise ValueError(f"got {w.size} weights for {per_head.shape[0]} heads")
    return np.tensordot(w, per_head, axes=1)


def _check_lambda(lam: float) -> None:
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")


def ncl_loss(head_outputs, targets, lam: float, constant_mean: bool = False):
    """Per-head NCL losses and the gradient of their sum.

    Parameters
    ----------
    head_outputs : HeadOutputs or array of shape (K, N, O)
    targets : array of shape (N, O) or (N,)
    lam : float
        Weight of the diversity term, ``lam >= 0``.
    constant_mean : bool
        Treat the ensemble mean as a constant when differentiating.  By
        default its dependence on every head (``dG_mean/dG_k = 1/K``) is
        included.

    Returns
    -------
    losses : ndarray (K,)
        Batch-mean of ``1/2 (G_k - Y)^2 - lam (G_k - G_mean)^2``, summed
        over output dimensions.
    grad : ndarray (K, N, O)
        Derivative of ``sum_k losses[k]`` with respect to every head output.
    """
    return generalized_ncl_loss(LossKind("l2"), head_outputs, targets, lam, constant_mean)


def generalized_ncl_loss(kind: LossKind, head_outputs, targets, lam: float,
                         constant_mean: bool = False, scale=None):
    """NCL with the accuracy term replaced by ``pointwise_loss(kind, .)``.

    For Tukey the residuals of each head are divided by ``1.4826 * MAD``
    computed over the batch (per output column).  ``scale`` overrides that
    divisor, shape broadcastable to (K, 1, O).  The scale is held fixed when
    differentiating.
    """
    _check_lambda(lam)
    G = head_outputs.per_head if isinstance(head_outputs, HeadOutputs) else np.asarray(head_outputs, dtype=np.float64)
    K, N = G.shape[0], G.shape[1]
    Y = np.asarray(targets, dtype=np.float64).reshape(G.shape[1:])
    resid = G - Y
    if kind.name == "tukey":
        if scale is None:
            scale = np.stack([mad_scale(r).scale for r in resid])[:, None, :]
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), G.shape)
        acc, dacc = pointwise_loss(kind, resid / scale)
        dacc = dacc / scale
    else:
        acc, dacc = pointwise_loss(kind, resid)
    dev = G - G.mean(axis=0)
    losses = (acc - lam * dev**2).sum(axis=2).mean(axis=1)
    if constant_mean:
        grad = dacc - 2.0 * lam * dev
    else:
        # own term carries (1 - 1/K); each other head j contributes 2 lam d_j / K
        total = dev.sum(axis=0)
        grad = dacc - 2.0 * lam * dev * (1.0 - 1.0 / K) + (2.0 * lam / K) * (total - dev)
    return losses, grad / N


class NclEnsemble:
    """Trunk network plus ``K`` linear heads on disjoint feature blocks."""

    def __init__(self, trunk: Network, heads: Sequence[Network], lam: float = 5e-3,
                 weights=None, constant_mean: bool = False):
        K = len(heads)
        if K < 1:
            raise ValueError("an ensemble needs at least one head")
        F = trunk.out_dim
        if F % K:
            raise ValueError(f"trunk feature dim {F} is not divisible by K={K}")
        width = F // K
        outs = {h.out_dim for h in heads}
        if len(outs) != 1:
            raise ValueError(f"heads disagree on output dim: {sorted(outs)}")
        for h in heads:
            if h.layers != [Dense(width, h.out_dim)]:
                raise ValueError(f"each head must be a single dense layer reading {width} features")
        _check_lambda(lam)
        self.trunk = trunk
        self.heads = list(heads)
        self.lam = float(lam)
        self.constant_mean = constant_mean
        self.weights = None if weights is None else np.array(weights, dtype=np.float64)
        if self.weights is not None and self.weights.shape != (K,):
            raise ValueError(f"got {self.weights.size} aggregation weights for {K} heads")

    @classmethod
    def build(cls, in_dim: int, hidden: Sequence[int], K: int, out_dim: int, rng: SplitMix64,
              lam: float = 5e-3, activation: str = "tanh", weighted: bool = False,
              constant_mean: bool = False) -> "NclEnsemble":
        """Random initialization; the last hidden size is the feature dim F."""
        hidden = list(hidden)
        if not hidden:
            raise ValueError("the trunk needs at least one hidden layer")
        if hidden[-1] % K:
            raise ValueError(f"feature dim {hidden[-1]} is not divisible by K={K}")
        trunk = Network.initialize(mlp([in_dim] + hidden, activation, final_activation=activation), rng)
        heads = [Network.initialize([Dense(hidden[-1] // K, out_dim)], rng) for _ in range(K)]
        weights = np.full(K, 1.0 / K) if weighted else None
        return cls(trunk, heads, lam, weights, constant_mean)

    @property
    def K(self) -> int:
        return len(self.heads)

    @property
    def in_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def out_dim(self) -> int:
        return self.heads[0].out_dim

    @property
    def block_width(self) -> int:
        return self.trunk.out_dim // self.K

    def block(self, k: int) -> slice:
        w = self.block_width
        return slice(k * w, (k + 1) * w)

    @property
    def aggregator(self) -> Aggregator:
        if self.weights is None:
            return Aggregator()
        return Aggregator("weighted", tuple(self.weights))

    @property
    def params(self) -> list:
        ps = list(self.trunk.params)
        for h in self.heads:
            ps += h.params
        if self.weights is not None:
            ps.append(self.weights)
        return ps

    def touch(self) -> None:
        self.trunk.touch()
        for h in self.heads:
            h.touch()

    def copy(self) -> "NclEnsemble":
        return NclEnsemble(self.trunk.copy(), [h.copy() for h in self.heads], self.lam,
                           None if self.weights is None else self.weights.copy(), self.constant_mean)

    def predict(self, x) -> np.ndarray:
        return aggregate(ensemble_forward(self, x), self.aggregator)

    def _forward(self, x):
        ttrace = forward(self.trunk, x)
        feats = ttrace.output
        htraces = [forward(h, feats[:, self.block(k)]) for k, h in enumerate(self.heads)]
        per_head = np.stack([t.output for t in htraces])
        return HeadOutputs.from_heads(per_head), ttrace, htraces

    def gradients(self, x, y, kind: LossKind | None = None):
        """Per-head losses, head outputs, and gradients aligned with ``params``."""
        kind = kind or LossKind()
        outs, ttrace, htraces = self._forward(x)
        y = np.asarray(y, dtype=np.float64).reshape(outs.mean.shape)
        losses, dG = generalized_ncl_loss(kind, outs, y, self.lam, self.constant_mean)
        feat_grad = np.zeros_like(ttrace.output)
        head_grads = []
        for k, (h, tr) in enumerate(zip(self.heads, htraces)):
            g, gin = backward(h, tr, dG[k])
            head_grads += g
            feat_grad[:, self.block(k)] = gin
        grads, _ = backward(self.trunk, ttrace, feat_grad, need_input_grad=False)
        grads += head_grads
        if self.weights is not None:
            # weights fit the aggregate by least squares; heads see no gradient from it
            agg = np.tensordot(self.weights, outs.per_head, axes=1)
            n = agg.shape[0]
            grads.append(np.array([((agg - y) * outs.per_head[k]).sum() / n for k in range(self.K)]))
        return losses, outs, grads


def ensemble_forward(model: NclEnsemble, batch) -> HeadOutputs:
    return model._forward(batch)[0]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 5e-3
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0 <= self.lam < 1:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")
        lo, hi = RECOMMENDED_LAMBDA
        if self.lam > 0 and not lo <= self.lam <= hi:
            warnings.warn(f"lambda={self.lam} outside the usual range [{lo}, {hi}]", stacklevel=2)
        return self


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "mean_head_loss", "ensemble_mse", "diversity")

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])


def _epoch_batches(rng: SplitMix64, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def mean_diversity(per_head: np.ndarray) -> float:
    """Mean off-diagonal pairwise Euclidean distance between heads (0 for K=1)."""
    K = per_head.shape[0]
    if K < 2:
        return 0.0
    d = pairwise_diversity(per_head.reshape(K, -1)).d
    return float(d.sum() / (K * (K - 1)))


def train(model: NclEnsemble, dataset, config: TrainConfig, checkpoint_path=None) -> TrainLog:
    """Mini-batch SGD on the summed NCL loss.

    ``model.lam`` is overwritten by ``config.lam``.  Each log row aggregates
    the batches of its epoch as they were seen, i.e. before each batch's
    update (with full-batch training: the state at the start of the epoch).
    On a non-finite loss or gradient the last finite state is serialized (and
    written to ``checkpoint_path`` if given) before :class:`TrainingDiverged`
    is raised.
    """
    config.validate()
    x = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.targets, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.lam = config.lam
    params = model.params
    state = OptimState.zeros_like(params)
    rng = SplitMix64(config.seed).spawn(1)
    log_ = TrainLog()
    K = model.K
    for epoch in range(1, config.epochs + 1):
        loss_sum, sq_err, sq_dist = 0.0, 0.0, np.zeros((K, K))
        for idx in _epoch_batches(rng, len(x), config.batch_size):
            losses, outs, grads = model.gradients(x[idx], y[idx], config.loss)
            if not np.all(np.isfinite(losses)):
                _abort(model, state, checkpoint_path, f"non-finite loss at epoch {epoch}")
            loss_sum += float(losses.mean()) * len(idx)
            sq_err += float(((aggregate(outs, model.aggregator) - y[idx]) ** 2).sum())
            G = outs.per_head.reshape(K, -1)
            sq_dist += ((G[:, None, :] - G[None, :, :]) ** 2).sum(axis=2)
            try:
                sgd_step(params, grads, state, config.lr, config.momentum, config.weight_decay)
            except TrainingDiverged as exc:
                _abort(model, state, checkpoint_path, str(exc))
            model.touch()
        diversity = float(np.sqrt(sq_dist).sum() / (K * (K - 1))) if K > 1 else 0.0
        log_.append(epoch=epoch, mean_head_loss=loss_sum / len(x),
                    ensemble_mse=sq_err / y.size, diversity=diversity)
        log.debug("epoch %d loss %.6g mse %.6g", epoch, losses.mean(), log_.rows[-1]["ensemble_mse"])
    return log_


def _abort(model, state, path, message):
    blob = save_ensemble(model, state)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    raise TrainingDiverged(message, checkpoint=blob)


def train_network(net: Network, dataset, config: TrainConfig) -> Network:
    """Plain L2 training of a single network with the same batching as :func:`train`."""
    config.validate()
    x = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.targets, dtype=np.float64).reshape(len(x), -1)
    state = OptimState.zeros_like(net.params)
    rng = SplitMix64(config.seed).spawn(1)
    for _ in range(config.epochs):
        for idx in _epoch_batches(rng, len(x), config.batch_size):
            trace = forward(net, x[idx])
            grads, _ = backward(net, trace, (trace.output - y[idx]) / len(idx), need_input_grad=False)
            sgd_step(net.params, grads, state, config.lr, config.momentum, config.weight_decay)
            net.touch()
    return net


def scalar_dynamics(init, target: float, lam: float, lr: float, iterations: int,
                    constant_mean: bool = False) -> np.ndarray:
    """Gradient descent on K free scalars under the NCL loss.

    Returns the trajectory, shape ``(iterations + 1, K)``; row 0 is ``init``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    f = np.array(init, dtype=np.float64)
    traj = [f.copy()]
    y = np.array([[target]])
    for _ in range(iterations):
        _, g = ncl_loss(f[:, None, None], y, lam, constant_mean)
        f = f - lr * g[:, 0, 0]
        traj.append(f.copy())
    return np.array(traj)


# -- checkpoints --------------------------------------------------------------
# kind 1 body: K u32, lam f64, constant_mean u8, weighted u8, [weights K f64],
# trunk network, K head networks, optimizer state (netcore layout).


def save_ensemble(model: NclEnsemble, state: OptimState | None = None) -> bytes:
    w = netcore._header(1)
    w.pack("IdBB", model.K, model.lam, int(model.constant_mean), int(model.weights is not None))
    if model.weights is not None:
        w.array(model.weights)
    netcore._write_network(w, model.trunk)
    for h in model.heads:
        netcore._write_network(w, h)
    netcore._write_state(w, state)
    return w.finish()


def load_ensemble(data: bytes) -> tuple[NclEnsemble, OptimState | None]:
    r = netcore._Reader(data)
    if (kind := r.unpack("B")) != 1:
        raise CheckpointError(f"expected an ensemble checkpoint (kind 1), found kind {kind}")
    K, lam, const, weighted = r.unpack("IdBB")
    weights = r.array((K,)) if weighted else None
    trunk = netcore._read_network(r)
    heads = [netcore._read_network(r) for _ in range(K)]
    try:
        model = NclEnsemble(trunk, heads, lam, weights, bool(const))
    except ValueError as exc:
        raise CheckpointError(f"inconsistent ensemble checkpoint: {exc}") from exc
    state = netcore._read_state(r, model.params)
    r.done()
    return model, state


def with_lambda(config: TrainConfig, lam: float) -> TrainConfig:
    return replace(config, lam=lam)


def fold_standardizer(model: NclEnsemble, mean, std) -> NclEnsemble:
    """Absorb ``(x - mean) / std`` into the first trunk layer, in place.

    Afterwards the model accepts raw (unstandardized) inputs.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    W, b = model.trunk.params[0], model.trunk.params[1]
    W_new = W / std[:, None]
    b -= mean @ W_new
    W[...] = W_new
    model.touch()
    return model
