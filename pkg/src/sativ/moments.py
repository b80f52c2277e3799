"""Design-implied moment matrices.

Conditional on a neighbor complier share cbar and group size n, the count of
treated neighbors is Binomial((n-1)*cbar, s) under saturation s, which makes
the conditional second-moment matrices Q0, Q1 (and the stacked Q) exactly
computable by enumerating the binomial support.  This module provides that
enumeration, the closed forms for the linear basis, the linear-interpolation
extension to non-integer (n-1)*cbar, the large-n limit matrices, the 2x2
block inverse of the stacked Q, and a symmetric Moore-Penrose pseudo-inverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .design import SaturationDesign
from .errors import ValidationError
from .model import BasisSpec

INTEGER_TOL = 1e-9
PINV_RTOL = 1e-12


@dataclass(frozen=True)
class MomentMatrices:
    """Q0 and Q1 at one evaluation point, with the stacked Q assembled on demand."""

    q0: np.ndarray
    q1: np.ndarray
    cbar: float
    n: int
    condition_on_positive: bool = False

    @property
    def q(self) -> np.ndarray:
        """The stacked matrix [[Q0+Q1, Q1], [Q1, Q1]]."""
        return assemble_q(self.q0, self.q1)


def assemble_q(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    k = q0.shape[0]
    out = np.empty((2 * k, 2 * k))
    out[:k, :k] = q0 + q1
    out[:k, k:] = q1
    out[k:, :k] = q1
    out[k:, k:] = q1
    return out


def binomial_pmf(trials: int, p: float) -> np.ndarray:
    """Full pmf of Binomial(trials, p), computed in log space for stability."""
    if trials < 0:
        raise ValidationError("trials must be nonnegative")
    if trials == 0:
        return np.ones(1)
    if p <= 0.0:
        out = np.zeros(trials + 1)
        out[0] = 1.0
        return out
    if p >= 1.0:
        out = np.zeros(trials + 1)
        out[-1] = 1.0
        return out
    m = np.arange(trials + 1)
    logpmf = (
        gammaln(trials + 1)
        - gammaln(m + 1)
        - gammaln(trials - m + 1)
        + m * math.log(p)
        + (trials - m) * math.log1p(-p)
    )
    return np.exp(logpmf)


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def q_z_at_count(
    basis: BasisSpec, count: int, n: int, design: SaturationDesign, z: int
) -> np.ndarray:
    """Q_z at an integer neighbor complier count, i.e. cbar = count/(n-1).

    Q_z = sum_j w_j s_j^z (1-s_j)^(1-z) * E[f(Dbar) f(Dbar)'] with
    (n-1)*Dbar ~ Binomial(count, s_j).
    """
    if n < 2:
        raise ValidationError("group size must be at least 2")
    if not 0 <= count <= n - 1:
        raise ValidationError("complier count outside 0..n-1")
    if z not in (0, 1):
        raise ValidationError("z must be 0 or 1")
    k = basis.k
    out = np.zeros((k, k))
    grid = np.arange(count + 1) / (n - 1)
    fvals = basis.values(grid)  # (count+1, K)
    for s, w in zip(design.saturations, design.weights):
        zweight = w * (s if z == 1 else 1.0 - s)
        if zweight == 0.0:
            continue
        pmf = binomial_pmf(count, s)
        out += zweight * (fvals.T @ (pmf[:, None] * fvals))
    return _symmetrize(out)


def q_exact(
    basis: BasisSpec,
    cbar: float,
    n: int,
    design: SaturationDesign,
    condition_on_positive: bool = False,
) -> MomentMatrices:
    """Exact Q0/Q1 at (cbar, n); requires (n-1)*cbar to be an integer.

    With ``condition_on_positive`` the expectation conditions on S > 0
    (the pure-control-excluded variant), i.e. the s = 0 atom is dropped and
    the remaining weights renormalized.
    """
    if not 0.0 <= cbar <= 1.0:
        raise ValidationError("cbar must lie in [0, 1]")
    count = (n - 1) * cbar
    if abs(count - round(count)) > INTEGER_TOL:
        raise ValidationError(
            f"(n-1)*cbar = {count} is not an integer; use q_extended instead"
        )
    dsn = design.positive_part() if condition_on_positive else design
    count = round(count)
    return MomentMatrices(
        q0=q_z_at_count(basis, count, n, dsn, z=0),
        q1=q_z_at_count(basis, count, n, dsn, z=1),
        cbar=cbar,
        n=n,
        condition_on_positive=condition_on_positive,
    )


def q_linear_closed_form(
    cbar: float, n: int, design: SaturationDesign, z: int
) -> np.ndarray:
    """Closed-form Q_z for the linear basis f(x) = (1, x).

    Valid for any real cbar in [0, 1]; agrees with the enumeration whenever
    (n-1)*cbar is an integer.
    """
    if not 0.0 <= cbar <= 1.0:
        raise ValidationError("cbar must lie in [0, 1]")
    if n < 2:
        raise ValidationError("group size must be at least 2")
    if z == 0:
        a = design.moment(0, 1)  # E(1-S)
        b = cbar * design.moment(1, 1)  # cbar E(S(1-S))
        c = cbar**2 * design.moment(2, 1) + cbar * design.moment(1, 2) / (n - 1)
    elif z == 1:
        a = design.moment(1, 0)  # E(S)
        b = cbar * design.moment(2, 0)  # cbar E(S^2)
        c = cbar**2 * design.moment(3, 0) + cbar * design.moment(2, 1) / (n - 1)
    else:
        raise ValidationError("z must be 0 or 1")
    return np.array([[a, b], [b, c]])


def q_extended(
    basis: BasisSpec,
    cbar: float,
    n: int,
    design: SaturationDesign,
    z: int,
    condition_on_positive: bool = False,
) -> np.ndarray:
    """Q_z extended to non-integer (n-1)*cbar by linear interpolation.

    Interpolates between the exact matrices at the two neighboring integer
    complier counts; returns the exact value when (n-1)*cbar is an integer.
    """
    if not 0.0 <= cbar <= 1.0:
        raise ValidationError("cbar must lie in [0, 1]")
    dsn = design.positive_part() if condition_on_positive else design
    count = (n - 1) * cbar
    lower = math.floor(count)
    if abs(count - round(count)) <= INTEGER_TOL:
        return q_z_at_count(basis, round(count), n, dsn, z)
    omega = count - lower
    ql = q_z_at_count(basis, lower, n, dsn, z)
    qu = q_z_at_count(basis, lower + 1, n, dsn, z)
    return (1.0 - omega) * ql + omega * qu


def moment_matrices_extended(
    basis: BasisSpec,
    cbar: float,
    n: int,
    design: SaturationDesign,
    condition_on_positive: bool = False,
) -> MomentMatrices:
    """Both extended blocks at (cbar, n), packaged with the stacked Q."""
    return MomentMatrices(
        q0=q_extended(basis, cbar, n, design, 0, condition_on_positive),
        q1=q_extended(basis, cbar, n, design, 1, condition_on_positive),
        cbar=cbar,
        n=n,
        condition_on_positive=condition_on_positive,
    )


def q_limit(basis: BasisSpec, cbar: float, design: SaturationDesign, z: int) -> np.ndarray:
    """Large-n limit of Q_z: E[S^z (1-S)^(1-z) f(cbar*S) f(cbar*S)']."""
    if not 0.0 <= cbar <= 1.0:
        raise ValidationError("cbar must lie in [0, 1]")
    k = basis.k
    out = np.zeros((k, k))
    for s, w in zip(design.saturations, design.weights):
        zweight = w * (s if z == 1 else 1.0 - s)
        if zweight == 0.0:
            continue
        fvec = basis.values(cbar * s)
        out += zweight * np.outer(fvec, fvec)
    return _symmetrize(out)


def block_inverse(q0_inv: np.ndarray, q1_inv: np.ndarray) -> np.ndarray:
    """Inverse of the stacked Q from the inverses of its blocks.

    Q^{-1} = [[Q0^{-1}, -Q0^{-1}], [-Q0^{-1}, Q0^{-1} + Q1^{-1}]].
    """
    if q0_inv.shape != q1_inv.shape or q0_inv.shape[0] != q0_inv.shape[1]:
        raise ValidationError("block inverses must be square matrices of equal size")
    k = q0_inv.shape[0]
    out = np.empty((2 * k, 2 * k))
    out[:k, :k] = q0_inv
    out[:k, k:] = -q0_inv
    out[k:, :k] = -q0_inv
    out[k:, k:] = q0_inv + q1_inv
    return out


def pseudo_inverse(m: np.ndarray, tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix via eigendecomposition.

    Eigenvalues below ``tol * max(|eigenvalue|, 1)`` are treated as exact
    zeros, which separates the structural zeros of degenerate designs from
    roundoff.  Coincides with the ordinary inverse when well-conditioned.
    """
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.abs(m).max()) if m.size else 0.0)
    if np.abs(m - m.T).max() > 1e-10 * scale:
        raise ValidationError("pseudo_inverse requires a symmetric matrix")
    vals, vecs = np.linalg.eigh(_symmetrize(m))
    cutoff = tol * max(float(np.abs(vals).max()), 1.0)
    inv_vals = np.where(np.abs(vals) > cutoff, 1.0 / np.where(vals == 0, 1.0, vals), 0.0)
    return _symmetrize((vecs * inv_vals) @ vecs.T)
