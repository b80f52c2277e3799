"""Random-coefficients potential-outcome model.

An individual's outcome is f(neighbor take-up share)' times a coefficient
vector that depends on her own treatment status: theta when untreated, psi
when treated.  Direct and indirect effects are linear functionals of the
mean coefficients, so everything here reduces to evaluating a basis vector
f at points of [0, 1] and taking dot products.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UnidentifiedEffectError, ValidationError

_BOUNDEDNESS_GRID = np.linspace(0.0, 1.0, 1001)

# Sub-population labels for mean coefficients.
LABEL_POPULATION = "population"
LABEL_COMPLIER = "complier"
LABEL_NEVER_TAKER = "never_taker"
_LABELS = (LABEL_POPULATION, LABEL_COMPLIER, LABEL_NEVER_TAKER)


@dataclass(frozen=True)
class BasisSpec:
    """A K-vector of bounded basis functions on [0, 1].

    Parameters
    ----------
    name : str
        Tag used in configs and cache keys ("linear", "quadratic", ...).
    funcs : tuple of callables
        Each maps a float array in [0, 1] to a float array.
    """

    name: str
    funcs: tuple[Callable[[np.ndarray], np.ndarray], ...]
    sup_bounds: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if not self.funcs:
            raise ValidationError("basis needs at least one function")
        bounds = []
        for i, f in enumerate(self.funcs):
            vals = np.asarray(f(_BOUNDEDNESS_GRID), dtype=float)
            if vals.shape != _BOUNDEDNESS_GRID.shape:
                raise ValidationError(f"basis function {i} is not vectorized over [0,1]")
            if not np.all(np.isfinite(vals)):
                raise ValidationError(f"basis function {i} is unbounded on [0,1]")
            bounds.append(float(np.max(np.abs(vals))))
        object.__setattr__(self, "sup_bounds", tuple(bounds))

    @property
    def k(self) -> int:
        return len(self.funcs)

    def values(self, x) -> np.ndarray:
        """Evaluate f at x: returns shape (K,) for scalar x, (len(x), K) for arrays."""
        arr = np.asarray(x, dtype=float)
        if np.any((arr < 0.0) | (arr > 1.0)):
            raise ValidationError("basis argument outside [0, 1]")
        out = np.stack([np.broadcast_to(f(arr), arr.shape) for f in self.funcs], axis=-1)
        return out


def linear_basis() -> BasisSpec:
    """f(x) = (1, x)."""
    return BasisSpec("linear", (lambda x: np.ones_like(x), lambda x: x))


def quadratic_basis() -> BasisSpec:
    """f(x) = (1, x, x^2)."""
    return BasisSpec(
        "quadratic",
        (lambda x: np.ones_like(x), lambda x: x, lambda x: x * x),
    )


_BUILTIN_BASES = {"linear": linear_basis, "quadratic": quadratic_basis}


def basis_by_name(name: str) -> BasisSpec:
    try:
        return _BUILTIN_BASES[name]()
    except KeyError:
        raise ValidationError(
            f"unknown basis {name!r}; available: {sorted(_BUILTIN_BASES)}"
        ) from None


@dataclass(frozen=True)
class Coefficients:
    """One individual's coefficient vectors (theta untreated, psi treated)."""

    theta: tuple[float, ...]
    psi: tuple[float, ...]

    def __post_init__(self):
        if len(self.theta) != len(self.psi):
            raise ValidationError("theta and psi must have the same length")
        if not all(np.isfinite(v) for v in self.theta + self.psi):
            raise ValidationError("coefficients must be finite")


@dataclass(frozen=True)
class MeanCoefficients:
    """Mean coefficients for a sub-population.

    ``theta_mean`` is E[theta | label] and ``contrast_mean`` is
    E[psi - theta | label]; each is present only where identified
    (never-takers have no identified contrast).
    """

    label: str
    theta_mean: tuple[float, ...] | None = None
    contrast_mean: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.label not in _LABELS:
            raise ValidationError(f"unknown label {self.label!r}; expected one of {_LABELS}")
        if self.label == LABEL_NEVER_TAKER and self.contrast_mean is not None:
            raise ValidationError("treated-arm contrast is not identified for never-takers")
        if self.theta_mean is None and self.contrast_mean is None:
            raise ValidationError("at least one of theta_mean/contrast_mean required")

    @property
    def psi_mean(self) -> tuple[float, ...] | None:
        if self.theta_mean is None or self.contrast_mean is None:
            return None
        return tuple(t + c for t, c in zip(self.theta_mean, self.contrast_mean))


def potential_outcome(coef: Coefficients, basis: BasisSpec, d: int, dbar: float) -> float:
    """Outcome f(dbar)'[(1-d) theta + d psi] at own treatment d and neighbor share dbar."""
    if d not in (0, 1):
        raise ValidationError("d must be 0 or 1")
    if not 0.0 <= dbar <= 1.0:
        raise ValidationError("dbar must lie in [0, 1]")
    fvec = basis.values(dbar)
    vec = np.asarray(coef.psi if d == 1 else coef.theta, dtype=float)
    if vec.size != basis.k:
        raise ValidationError("coefficient length does not match basis")
    return float(fvec @ vec)


def direct_effect(mean: MeanCoefficients, basis: BasisSpec, dbar: float) -> float:
    """Average effect of switching own treatment 0 -> 1 at fixed neighbor share dbar."""
    if not 0.0 <= dbar <= 1.0:
        raise ValidationError("dbar must lie in [0, 1]")
    if mean.contrast_mean is None:
        raise UnidentifiedEffectError(
            f"direct effect is not identified for label {mean.label!r}"
        )
    return float(basis.values(dbar) @ np.asarray(mean.contrast_mean, dtype=float))


def indirect_effect(
    mean: MeanCoefficients, basis: BasisSpec, d: int, dbar: float, delta: float
) -> float:
    """Average effect of raising the neighbor share dbar -> dbar + delta at own treatment d."""
    if d not in (0, 1):
        raise ValidationError("d must be 0 or 1")
    if delta <= 0.0:
        raise ValidationError("delta must be a positive increment")
    if not 0.0 <= dbar <= 1.0 or dbar + delta > 1.0 + 1e-12:
        raise ValidationError("need 0 <= dbar and dbar + delta <= 1")
    if d == 0:
        vec = mean.theta_mean
        what = "untreated-arm mean"
    else:
        vec = mean.psi_mean
        what = "treated-arm mean"
    if vec is None:
        raise UnidentifiedEffectError(
            f"{what} is not identified for label {mean.label!r}"
        )
    diff = basis.values(min(dbar + delta, 1.0)) - basis.values(dbar)
    return float(diff @ np.asarray(vec, dtype=float))
