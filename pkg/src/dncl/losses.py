"""Pointwise regression losses: L2, SmoothL1 and Tukey's biweight.

Tukey's loss acts on residuals scaled by a robust spread estimate
(1.4826 times the median absolute deviation), see :func:`mad_scale`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TUKEY_C = 4.6851
MAD_CONSISTENCY = 1.4826
MAD_FLOOR = 1e-12


@dataclass(frozen=True)
class LossKind:
    """Loss selector.

    ``name`` is one of ``"l2"``, ``"smoothl1"`` or ``"tukey"``; ``t`` is the
    SmoothL1 threshold and ``c`` the Tukey cutoff.
    """

    name: str = "l2"
    t: float = 1.0
    c: float = TUKEY_C

    def __post_init__(self):
        if self.name not in ("l2", "smoothl1", "tukey"):
            raise ValueError(f"unknown loss {self.name!r}; expected l2, smoothl1 or tukey")
        if not self.t > 0:
            raise ValueError(f"smoothl1 threshold must be positive, got {self.t}")
        if not self.c > 0:
            raise ValueError(f"tukey cutoff must be positive, got {self.c}")


def L2() -> LossKind:
    return LossKind("l2")


def SmoothL1(t: float = 1.0) -> LossKind:
    return LossKind("smoothl1", t=t)


def Tukey(c: float = TUKEY_C) -> LossKind:
    return LossKind("tukey", c=c)


@dataclass
class ScaledResiduals:
    raw: np.ndarray
    scaled: np.ndarray
    mad: np.ndarray | float
    degenerate: np.ndarray | bool

    @property
    def scale(self):
        """Divisor applied to ``raw``; 1 where the MAD is degenerate."""
        return np.where(self.degenerate, 1.0, MAD_CONSISTENCY * np.asarray(self.mad))


def median(x: np.ndarray, axis: int = 0) -> np.ndarray:
    # np.median averages the two central order statistics for even lengths
    return np.median(x, axis=axis)


def mad_scale(residuals) -> ScaledResiduals:
    """Scale residuals by ``1.4826 * MAD``.

    For a 2-D ``(N, O)`` array every output column gets its own MAD.  Where
    the MAD falls below 1e-12 the residuals pass through unscaled and the
    ``degenerate`` flag is set.
    """
    xi = np.asarray(residuals, dtype=np.float64)
    if xi.size == 0 or xi.shape[0] == 0:
        raise ValueError("mad_scale needs at least one residual")
    mad = median(np.abs(xi - median(xi, axis=0)), axis=0)
    degenerate = mad < MAD_FLOOR
    scale = np.where(degenerate, 1.0, MAD_CONSISTENCY * mad)
    scaled = xi / scale
    if xi.ndim == 1:
        return ScaledResiduals(xi, scaled, float(mad), bool(degenerate))
    return ScaledResiduals(xi, scaled, mad, degenerate)


def pointwise_loss(kind: LossKind, residual):
    """Loss value and its derivative with respect to the residual.

    Works elementwise on scalars or arrays.  For Tukey the input is the
    already-scaled residual.  NaN residuals give NaN value and derivative;
    infinite residuals take the limiting branch (SmoothL1: inf and +-1,
    Tukey: c**2/6 and 0).
    """
    xi = np.asarray(residual, dtype=np.float64)
    if kind.name == "l2":
        value, grad = 0.5 * xi * xi, xi.copy()
    elif kind.name == "smoothl1":
        t = kind.t
        a = np.abs(xi)
        inside = a < t
        with np.errstate(invalid="ignore"):
            value = np.where(inside, 0.5 * xi * xi / t, a - 0.5 * t)
            grad = np.where(inside, xi / t, np.sign(xi))
    else:
        c = kind.c
        with np.errstate(invalid="ignore", over="ignore"):
            u = 1.0 - (xi / c) ** 2
            inside = np.abs(xi) <= c
            value = np.where(inside, c * c / 6.0 * (1.0 - u**3), c * c / 6.0)
            grad = np.where(inside, xi * u * u, 0.0)
        nan = np.isnan(xi)
        value = np.where(nan, np.nan, value)
        grad = np.where(nan, np.nan, grad)
    if np.ndim(residual) == 0:
        return float(value), float(grad)
    return value, grad
