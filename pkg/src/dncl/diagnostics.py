"""Ensemble diagnostics and evaluation metrics.

Expectations over training trials use population moments (divisor T) so the
bias-variance-covariance split is an exact algebraic identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .rng import SplitMix64


@dataclass
class DecompositionReport:
    bias_sq: float
    variance: float
    covariance: float
    mse_of_mean: float
    trials: int
    heads: int

    @property
    def residual(self) -> float:
        return self.bias_sq + self.variance + self.covariance - self.mse_of_mean

    def as_dict(self) -> dict:
        return {
            "bias_sq": self.bias_sq,
            "variance": self.variance,
            "covariance": self.covariance,
            "mse_of_mean": self.mse_of_mean,
            "trials": self.trials,
            "heads": self.heads,
        }


def bvc_decompose(predictions, targets) -> DecompositionReport:
    """Bias-variance-covariance split of the uniform ensemble's squared error.

    Parameters
    ----------
    predictions : array (T, K, N) or (T, K)
        Head predictions from ``T`` independent trainings of the same recipe.
    targets : array (N,) or scalar

    The three terms are averaged over samples:

    * bias_sq    = ((1/K) sum_k (E[G_k] - Y))^2
    * variance   = (1/K^2) sum_k Var(G_k)
    * covariance = (1/K^2) sum_k sum_{j != k} Cov(G_k, G_j)
    """
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim == 2:
        P = P[:, :, None]
    if P.ndim != 3:
        raise ValueError(f"predictions must be (T, K, N) or (T, K), got shape {P.shape}")
    T, K, N = P.shape
    if T < 2:
        raise ValueError(f"need >= 2 trials for a variance estimate, got {T}")
    Y = np.broadcast_to(np.asarray(targets, dtype=np.float64).reshape(-1), (N,))
    mean_k = P.mean(axis=0)  # (K, N)
    centred = P - mean_k
    cov = np.einsum("tkn,tjn->kjn", centred, centred) / T  # (K, K, N)
    diag = np.einsum("kkn->kn", cov)
    bias_sq = ((mean_k - Y).mean(axis=0)) ** 2
    variance = diag.sum(axis=0) / K**2
    covariance = (cov.sum(axis=(0, 1)) - diag.sum(axis=0)) / K**2
    mse = ((P.mean(axis=1) - Y) ** 2).mean(axis=0)
    return DecompositionReport(float(bias_sq.mean()), float(variance.mean()),
                               float(covariance.mean()), float(mse.mean()), T, K)


def ambiguity_identity(head_preds, targets):
    """Both sides of: ensemble error = mean member error - mean ambiguity."""
    G = np.asarray(head_preds, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    Y = np.asarray(targets, dtype=np.float64).reshape(-1)
    ens = G.mean(axis=0)
    lhs = float(((ens - Y) ** 2).mean())
    rhs = float(((G - Y) ** 2).mean(axis=1).mean() - ((G - ens) ** 2).mean(axis=1).mean())
    return lhs, rhs


@dataclass
class DiversityMatrix:
    d: np.ndarray

    @property
    def mean(self) -> float:
        """Mean over the off-diagonal entries."""
        K = self.d.shape[0]
        return float(self.d.sum() / (K * (K - 1)))


def pairwise_diversity(head_preds) -> DiversityMatrix:
    G = np.asarray(head_preds, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    G = G.reshape(G.shape[0], -1)
    if G.shape[0] < 2:
        raise ValueError("pairwise diversity needs at least 2 heads")
    diff = G[:, None, :] - G[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    return DiversityMatrix((d + d.T) / 2)


@dataclass
class RademacherEstimate:
    value: float
    mc_std: float
    trials: int
    bound: float
    groups: int = 1

    def as_dict(self) -> dict:
        return {"value": self.value, "mc_std": self.mc_std, "trials": self.trials,
                "bound": self.bound, "groups": self.groups}


_CHUNK = 2048


def _sign_sums(features: np.ndarray, trials: int, seed: int):
    """Yield ``sigma @ features`` for blocks of Rademacher draws."""
    rng = SplitMix64(seed)
    N = features.shape[0]
    done = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        sigma = rng.signs((m, N))
        yield sigma @ features
        done += m


def _check_features(features, bound):
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not bound > 0:
        raise ValueError(f"weight-norm bound must be positive, got {bound}")
    return phi


def _estimate(samples: np.ndarray, trials: int, bound: float, groups: int = 1) -> RademacherEstimate:
    std = float(samples.std() / math.sqrt(trials)) if trials > 1 else 0.0
    return RademacherEstimate(float(samples.mean()), std, trials, bound, groups)


def rademacher_linear(features, bound: float = 1.0, trials: int = 10_000, seed: int = 0) -> RademacherEstimate:
    """Monte-Carlo empirical Rademacher complexity of ``{x -> w . phi(x): ||w|| <= B}``.

    The supremum is attained in closed form, ``B * ||sum_i sigma_i phi(x_i)||``,
    so each draw contributes ``(2B/N) * ||sum_i sigma_i phi(x_i)||``.
    """
    phi = _check_features(features, bound)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    N = phi.shape[0]
    vals = np.concatenate([np.linalg.norm(s, axis=1) for s in _sign_sums(phi, trials, seed)])
    return _estimate(2.0 * bound / N * vals, trials, bound)


class GroupRatio(NamedTuple):
    ratio: float
    full: RademacherEstimate
    group: RademacherEstimate
    ratio_std: float


def rademacher_group_ratio(features, K: int, bound: float = 1.0, trials: int = 10_000,
                           seed: int = 0) -> GroupRatio:
    """Compare the averaged K-head class on disjoint feature blocks with the full class.

    The group class averages K heads, each with its own weight ball of radius
    B over one contiguous block, so a draw contributes
    ``(2B/(N K)) * sum_k ||sum_i sigma_i phi_k(x_i)||``.  Both estimates use
    the same sign draws; the returned ratio is group/full and lies in
    ``[1/K, 1/sqrt(K)]``.

    ``ratio_std`` is the delta-method Monte-Carlo error of the ratio.
    """
    phi = _check_features(features, bound)
    N, F = phi.shape
    if K < 1 or F % K:
        raise ValueError(f"feature dim {F} is not divisible by K={K}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    width = F // K
    full, group = [], []
    for s in _sign_sums(phi, trials, seed):
        full.append(np.linalg.norm(s, axis=1))
        group.append(np.linalg.norm(s.reshape(len(s), K, width), axis=2).sum(axis=1))
    full = 2.0 * bound / N * np.concatenate(full)
    group = 2.0 * bound / (N * K) * np.concatenate(group)
    f_est = _estimate(full, trials, bound)
    g_est = _estimate(group, trials, bound, K)
    if f_est.value == 0:
        return GroupRatio(float("nan"), f_est, g_est, float("nan"))
    ratio = g_est.value / f_est.value
    # delta method for a ratio of means from paired draws
    resid = group - ratio * full
    ratio_std = float(resid.std() / math.sqrt(trials) / f_est.value) if trials > 1 else 0.0
    return GroupRatio(ratio, f_est, g_est, ratio_std)


def regression_metrics(preds, targets) -> dict:
    e = np.asarray(preds, dtype=np.float64).ravel() - np.asarray(targets, dtype=np.float64).ravel()
    return {"MAE": float(np.abs(e).mean()), "RMSE": float(np.sqrt((e * e).mean()))}


def trait_metrics(preds, targets) -> dict:
    """Mean accuracy ``A = 1 - mean|Y - P|`` and the coefficient of determination.

    ``R2`` is NaN with ``R2_defined = False`` when the targets are constant.
    """
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    A = 1.0 - float(np.abs(y - p).mean())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return {"A": A, "R2": float("nan"), "R2_defined": False}
    return {"A": A, "R2": 1.0 - float(((y - p) ** 2).sum()) / ss_tot, "R2_defined": True}


def cumulative_score(preds, targets, level: float) -> float:
    """Percentage of samples with absolute error not greater than ``level``."""
    e = np.abs(np.asarray(preds, dtype=np.float64).ravel() - np.asarray(targets, dtype=np.float64).ravel())
    return 100.0 * float((e <= level).sum()) / e.size
